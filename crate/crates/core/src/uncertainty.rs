//! Per-pixel uncertainty functionals over a predictive distribution and its
//! auxiliary moments: entropy, variation ratio, BALD (mutual information)
//! and mean standard deviation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregator::{AggregatorState, PredictiveMoments};
use crate::tensor::{same_hw, ClassTensor, ProbMap, Result, ScalarMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyKind {
    Entropy,
    #[serde(rename = "varratio")]
    VariationRatio,
    Bald,
    #[serde(rename = "meanstd")]
    MeanStd,
}

impl UncertaintyKind {
    pub const ALL: [UncertaintyKind; 4] = [
        UncertaintyKind::Entropy,
        UncertaintyKind::VariationRatio,
        UncertaintyKind::Bald,
        UncertaintyKind::MeanStd,
    ];

    /// Short name used on the command line and in file names.
    pub fn as_str(self) -> &'static str {
        match self {
            UncertaintyKind::Entropy => "entropy",
            UncertaintyKind::VariationRatio => "varratio",
            UncertaintyKind::Bald => "bald",
            UncertaintyKind::MeanStd => "meanstd",
        }
    }
}

impl fmt::Display for UncertaintyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UncertaintyKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        UncertaintyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown uncertainty kind '{s}'"))
    }
}

/// `-sum p ln p` with `0 ln 0 = 0`.
pub fn pixel_entropy(px: &[f64]) -> f64 {
    -px.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

pub fn entropy(p: &ProbMap) -> ScalarMap {
    let data = p.pixels().map(|px| pixel_entropy(px).max(0.0)).collect();
    ScalarMap::from_raw(p.height(), p.width(), data)
}

pub fn variation_ratio(p: &ProbMap) -> ScalarMap {
    let data = p
        .pixels()
        .map(|px| 1.0 - px.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    ScalarMap::from_raw(p.height(), p.width(), data)
}

/// Mutual information `H(E[p]) - E[H(p)]`, clamped below at zero.
pub fn bald(p_mean: &ProbMap, expected_entropy: &ScalarMap) -> Result<ScalarMap> {
    same_hw(p_mean.hw(), expected_entropy.hw(), p_mean.classes(), 1)?;
    let data = p_mean
        .pixels()
        .zip(expected_entropy.data())
        .map(|(px, &eh)| (pixel_entropy(px) - eh).max(0.0))
        .collect();
    Ok(ScalarMap::from_raw(p_mean.height(), p_mean.width(), data))
}

/// Class-averaged standard deviation `(1/C) sum_c sqrt(max(0, E[p_c^2] - E[p_c]^2))`.
pub fn mean_std(p_mean: &ProbMap, expected_square: &ClassTensor) -> Result<ScalarMap> {
    same_hw(
        p_mean.hw(),
        expected_square.hw(),
        p_mean.classes(),
        expected_square.classes(),
    )?;
    if p_mean.classes() != expected_square.classes() {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            left: (p_mean.height(), p_mean.width(), p_mean.classes()),
            right: (
                expected_square.height(),
                expected_square.width(),
                expected_square.classes(),
            ),
        });
    }
    let c = p_mean.classes();
    let data = p_mean
        .pixels()
        .zip(expected_square.data().chunks_exact(c))
        .map(|(m, sq)| {
            m.iter()
                .zip(sq)
                .map(|(&e, &e2)| (e2 - e * e).max(0.0).sqrt())
                .sum::<f64>()
                / c as f64
        })
        .collect();
    Ok(ScalarMap::from_raw(p_mean.height(), p_mean.width(), data))
}

pub fn uncertainty_from_state(s: &AggregatorState, kind: UncertaintyKind) -> ScalarMap {
    s.moments.uncertainty(kind)
}

/// How often the clamps in [`bald`] and [`mean_std`] engaged for a state, and
/// by how much. EMA aggregates are not exact joint moments, so the raw
/// expressions can dip below zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClampStats {
    pub pixels: usize,
    pub bald_clamped: usize,
    pub bald_worst: f64,
    pub meanstd_clamped: usize,
    pub meanstd_worst: f64,
}

impl ClampStats {
    pub fn of_state(s: &AggregatorState) -> Self {
        Self::of_moments(&s.moments)
    }

    pub fn of_moments(s: &PredictiveMoments) -> Self {
        let mut out = ClampStats {
            pixels: s.prediction.height() * s.prediction.width(),
            ..Default::default()
        };
        let c = s.prediction.classes();
        for ((px, &eh), sq) in s
            .prediction
            .pixels()
            .zip(s.expected_entropy.data())
            .zip(s.expected_square.data().chunks_exact(c))
        {
            let mi = pixel_entropy(px) - eh;
            if mi < 0.0 {
                out.bald_clamped += 1;
                out.bald_worst = out.bald_worst.min(mi);
            }
            let worst = px
                .iter()
                .zip(sq)
                .map(|(&e, &e2)| e2 - e * e)
                .fold(f64::INFINITY, f64::min);
            if worst < 0.0 {
                out.meanstd_clamped += 1;
                out.meanstd_worst = out.meanstd_worst.min(worst);
            }
        }
        out
    }

    pub fn merge(&mut self, other: &ClampStats) {
        self.pixels += other.pixels;
        self.bald_clamped += other.bald_clamped;
        self.bald_worst = self.bald_worst.min(other.bald_worst);
        self.meanstd_clamped += other.meanstd_clamped;
        self.meanstd_worst = self.meanstd_worst.min(other.meanstd_worst);
    }
}
