//! Streaming temporal aggregation of single-pass stochastic outputs.
//!
//! Each frame contributes one sample `O_t`. The running prediction is
//!
//! ```text
//! P_1 = O_1
//! P_t = a * O_t + (1 - a) * W(P_{t-1}, F_{t-1 -> t})
//! ```
//!
//! where `W` warps along optical flow and `a` is either a fixed factor (TA),
//! a per-pixel factor chosen from the photometric reconstruction error
//! (RTA), or `1/t` (cumulative average). The same recurrence runs on the
//! per-sample entropy and on the squared probabilities so BALD and mean
//! standard deviation can be read off the state at any frame.
//!
//! [`mc_predict`] is the brute-force Monte Carlo estimate the recurrence
//! approximates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{same_hw, ClassTensor, FlowField, ImageFrame, ProbMap, ScalarMap, TensorError};
use crate::uncertainty::{self, pixel_entropy, UncertaintyKind};
use crate::warp::{self, WarpConfig};

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("multiplying factor {0} outside (0, 1]")]
    AlphaRange(f64),
    #[error("invalid aggregation policy: {0}")]
    Policy(String),
    #[error("sample count must be at least 1")]
    ZeroSamples,
    #[error("model sample failed: {0}")]
    Model(String),
    #[error("{0} is required for this aggregation policy")]
    MissingInput(&'static str),
}

pub type Result<T> = std::result::Result<T, AggregateError>;

/// First and second predictive moments plus the expected per-sample entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveMoments {
    pub prediction: ProbMap,
    pub expected_entropy: ScalarMap,
    pub expected_square: ClassTensor,
}

impl PredictiveMoments {
    pub fn uncertainty(&self, kind: UncertaintyKind) -> ScalarMap {
        match kind {
            UncertaintyKind::Entropy => uncertainty::entropy(&self.prediction),
            UncertaintyKind::VariationRatio => uncertainty::variation_ratio(&self.prediction),
            UncertaintyKind::Bald => uncertainty::bald(&self.prediction, &self.expected_entropy)
                .expect("moment shapes agree"),
            UncertaintyKind::MeanStd => {
                uncertainty::mean_std(&self.prediction, &self.expected_square)
                    .expect("moment shapes agree")
            }
        }
    }
}

/// Running aggregate for one video stream. Memory is `O(H * W * C)`
/// regardless of how many frames have been folded in.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorState {
    pub moments: PredictiveMoments,
    /// 1-based index of the last frame folded in.
    pub frame_index: usize,
}

impl std::ops::Deref for AggregatorState {
    type Target = PredictiveMoments;

    fn deref(&self) -> &PredictiveMoments {
        &self.moments
    }
}

impl AggregatorState {
    /// Bytes held by the three aggregate tensors.
    pub fn heap_bytes(&self) -> usize {
        let m = &self.moments;
        (m.prediction.data().len()
            + m.expected_entropy.data().len()
            + m.expected_square.data().len())
            * std::mem::size_of::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Fixed multiplying factor `alpha`.
    #[default]
    TaFixed,
    /// Per-pixel factor from the reconstruction-error step function.
    RtaStep,
    /// `alpha_t = 1/t`: the running arithmetic mean.
    CumulativeAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregationPolicy {
    pub kind: PolicyKind,
    pub alpha: f64,
    pub alpha_acc: f64,
    pub alpha_err: f64,
    /// Reconstruction-error threshold in intensity levels.
    pub lambda: f64,
}

impl Default for AggregationPolicy {
    fn default() -> Self {
        Self {
            kind: PolicyKind::TaFixed,
            alpha: 0.2,
            alpha_acc: 0.2,
            alpha_err: 0.7,
            lambda: 10.0,
        }
    }
}

impl AggregationPolicy {
    pub fn ta(alpha: f64) -> Self {
        Self {
            kind: PolicyKind::TaFixed,
            alpha,
            ..Self::default()
        }
    }

    pub fn rta(alpha_acc: f64, alpha_err: f64, lambda: f64) -> Self {
        Self {
            kind: PolicyKind::RtaStep,
            alpha_acc,
            alpha_err,
            lambda,
            ..Self::default()
        }
    }

    /// RTA with the default thresholds.
    pub fn default_rta() -> Self {
        Self {
            kind: PolicyKind::RtaStep,
            ..Self::default()
        }
    }

    pub fn cumulative() -> Self {
        Self {
            kind: PolicyKind::CumulativeAverage,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |a: f64| a > 0.0 && a <= 1.0;
        if !unit(self.alpha) {
            return Err(AggregateError::AlphaRange(self.alpha));
        }
        if !(unit(self.alpha_acc) && unit(self.alpha_err) && self.alpha_acc <= self.alpha_err) {
            return Err(AggregateError::Policy(format!(
                "need 0 < alpha_acc <= alpha_err <= 1, got {} and {}",
                self.alpha_acc, self.alpha_err
            )));
        }
        if !(0.0..=255.0).contains(&self.lambda) {
            return Err(AggregateError::Policy(format!(
                "lambda {} outside [0, 255]",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Stand-in for a network with dropout active at test time. A given
/// `(frame, sample_index)` always yields the same output.
pub trait StochasticModel {
    fn sample(&self, frame: usize, sample_index: usize) -> Result<ProbMap>;
}

impl<M: StochasticModel + ?Sized> StochasticModel for &M {
    fn sample(&self, frame: usize, sample_index: usize) -> Result<ProbMap> {
        (**self).sample(frame, sample_index)
    }
}

pub fn init_state(o_1: &ProbMap) -> AggregatorState {
    let prediction = o_1
        .normalize()
        .expect("valid probability map has positive pixel sums");
    AggregatorState {
        moments: PredictiveMoments {
            expected_entropy: uncertainty::entropy(o_1),
            expected_square: o_1.squared(),
            prediction,
        },
        frame_index: 1,
    }
}

/// Warped EMA of all three aggregates with a per-pixel factor.
fn blend<F>(
    s: &AggregatorState,
    o_t: &ProbMap,
    flow: &FlowField,
    cfg: WarpConfig,
    alpha_at: F,
) -> Result<AggregatorState>
where
    F: Fn(usize) -> f64,
{
    let m = &s.moments;
    same_hw(
        m.prediction.hw(),
        o_t.hw(),
        m.prediction.classes(),
        o_t.classes(),
    )?;
    if m.prediction.classes() != o_t.classes() {
        return Err(TensorError::ShapeMismatch {
            left: (
                m.prediction.height(),
                m.prediction.width(),
                m.prediction.classes(),
            ),
            right: (o_t.height(), o_t.width(), o_t.classes()),
        }
        .into());
    }
    let warped_pred = warp::warp_prob(&m.prediction, flow, cfg)?;
    let warped_ent = warp::warp_scalar(&m.expected_entropy, flow, cfg)?;
    let warped_sq = warp::warp_class_tensor(&m.expected_square, flow, cfg)?;

    let (h, w, c) = (o_t.height(), o_t.width(), o_t.classes());
    let mut pred = Vec::with_capacity(h * w * c);
    let mut ent = Vec::with_capacity(h * w);
    let mut sq = Vec::with_capacity(h * w * c);
    let mut mixed = vec![0.0; c];
    for (p, ((o, wp), ws)) in o_t
        .pixels()
        .zip(warped_pred.pixels())
        .zip(warped_sq.data().chunks_exact(c))
        .enumerate()
    {
        let a = alpha_at(p);
        let keep = 1.0 - a;
        for k in 0..c {
            mixed[k] = o[k] * a + wp[k] * keep;
        }
        let sum: f64 = mixed.iter().sum();
        pred.extend(mixed.iter().map(|v| v / sum));
        ent.push(pixel_entropy(o).max(0.0) * a + warped_ent.data()[p] * keep);
        sq.extend((0..c).map(|k| o[k] * o[k] * a + ws[k] * keep));
    }
    Ok(AggregatorState {
        moments: PredictiveMoments {
            prediction: ProbMap::from_raw(h, w, c, pred),
            expected_entropy: ScalarMap::from_raw(h, w, ent),
            expected_square: ClassTensor::from_raw(h, w, c, sq),
        },
        frame_index: s.frame_index + 1,
    })
}

/// One fixed-factor step.
pub fn ta_step(
    s: &AggregatorState,
    o_t: &ProbMap,
    flow: &FlowField,
    alpha: f64,
    cfg: WarpConfig,
) -> Result<AggregatorState> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(AggregateError::AlphaRange(alpha));
    }
    blend(s, o_t, flow, cfg, |_| alpha)
}

/// Step function on the reconstruction error: `alpha_acc` where
/// `E <= lambda`, `alpha_err` elsewhere.
pub fn rta_alpha_map(error: &ScalarMap, policy: &AggregationPolicy) -> ScalarMap {
    let data = error
        .data()
        .iter()
        .map(|&e| {
            if e <= policy.lambda {
                policy.alpha_acc
            } else {
                policy.alpha_err
            }
        })
        .collect();
    ScalarMap::from_raw(error.height(), error.width(), data)
}

/// One region-gated step. Returns the new state and the reconstruction
/// error that drove the gate.
pub fn rta_step_with_error(
    s: &AggregatorState,
    o_t: &ProbMap,
    flow: &FlowField,
    current: &ImageFrame,
    previous: &ImageFrame,
    policy: &AggregationPolicy,
    cfg: WarpConfig,
) -> Result<(AggregatorState, ScalarMap)> {
    let error = warp::reconstruction_error(current, previous, flow, cfg)?;
    same_hw(error.hw(), o_t.hw(), 1, o_t.classes())?;
    let alpha = rta_alpha_map(&error, policy);
    let next = blend(s, o_t, flow, cfg, |p| alpha.data()[p])?;
    Ok((next, error))
}

pub fn rta_step(
    s: &AggregatorState,
    o_t: &ProbMap,
    flow: &FlowField,
    current: &ImageFrame,
    previous: &ImageFrame,
    policy: &AggregationPolicy,
    cfg: WarpConfig,
) -> Result<AggregatorState> {
    rta_step_with_error(s, o_t, flow, current, previous, policy, cfg).map(|(s, _)| s)
}

/// Monte Carlo estimate from `n` samples of one frame.
pub fn mc_predict<M: StochasticModel + ?Sized>(
    model: &M,
    frame: usize,
    n: usize,
) -> Result<PredictiveMoments> {
    if n == 0 {
        return Err(AggregateError::ZeroSamples);
    }
    let first = model.sample(frame, 0)?;
    let (h, w, c) = (first.height(), first.width(), first.classes());
    let mut sum_p = vec![0.0; h * w * c];
    let mut sum_h = vec![0.0; h * w];
    let mut sum_sq = vec![0.0; h * w * c];
    let mut fold = |o: &ProbMap| {
        for (p, px) in o.pixels().enumerate() {
            sum_h[p] += pixel_entropy(px).max(0.0);
            for (k, &v) in px.iter().enumerate() {
                sum_p[p * c + k] += v;
                sum_sq[p * c + k] += v * v;
            }
        }
    };
    fold(&first);
    for i in 1..n {
        let o = model.sample(frame, i)?;
        same_hw(o.hw(), (h, w), o.classes(), c)?;
        fold(&o);
    }
    let nf = n as f64;
    let mean = |v: Vec<f64>| v.into_iter().map(|x| x / nf).collect::<Vec<_>>();
    let prediction = ProbMap::from_raw(h, w, c, mean(sum_p)).normalize()?;
    Ok(PredictiveMoments {
        prediction,
        expected_entropy: ScalarMap::from_raw(h, w, mean(sum_h)),
        expected_square: ClassTensor::from_raw(h, w, c, mean(sum_sq)),
    })
}

/// Drives a policy over a stream of frames, one sample per frame.
#[derive(Debug, Clone)]
pub struct StreamAggregator {
    policy: AggregationPolicy,
    warp: WarpConfig,
    state: Option<AggregatorState>,
    previous_image: Option<ImageFrame>,
    last_error: Option<ScalarMap>,
}

impl StreamAggregator {
    pub fn new(policy: AggregationPolicy, warp: WarpConfig) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            policy,
            warp,
            state: None,
            previous_image: None,
            last_error: None,
        })
    }

    pub fn policy(&self) -> &AggregationPolicy {
        &self.policy
    }

    pub fn state(&self) -> Option<&AggregatorState> {
        self.state.as_ref()
    }

    /// Reconstruction error of the last RTA step, if any.
    pub fn last_error(&self) -> Option<&ScalarMap> {
        self.last_error.as_ref()
    }

    /// Folds in the next frame's sample. `flow` is `F(t-1 -> t)` and is
    /// ignored on the first frame; `image` is required by RTA.
    pub fn push(
        &mut self,
        o_t: &ProbMap,
        flow: Option<&FlowField>,
        image: Option<ImageFrame>,
    ) -> Result<&AggregatorState> {
        let next = match self.state.take() {
            None => init_state(o_t),
            Some(s) => {
                let flow = flow.ok_or(AggregateError::MissingInput("flow"))?;
                match self.policy.kind {
                    PolicyKind::TaFixed => ta_step(&s, o_t, flow, self.policy.alpha, self.warp)?,
                    PolicyKind::CumulativeAverage => {
                        ta_step(&s, o_t, flow, 1.0 / (s.frame_index + 1) as f64, self.warp)?
                    }
                    PolicyKind::RtaStep => {
                        let cur = image
                            .as_ref()
                            .ok_or(AggregateError::MissingInput("image"))?;
                        let prev = self
                            .previous_image
                            .as_ref()
                            .ok_or(AggregateError::MissingInput("previous image"))?;
                        let (next, err) =
                            rta_step_with_error(&s, o_t, flow, cur, prev, &self.policy, self.warp)?;
                        self.last_error = Some(err);
                        next
                    }
                }
            }
        };
        if self.policy.kind == PolicyKind::RtaStep {
            self.previous_image = Some(image.ok_or(AggregateError::MissingInput("image"))?);
        }
        Ok(self.state.insert(next))
    }
}
