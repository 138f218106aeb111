//! End-to-end commands: render a synthetic video to disk, aggregate a
//! manifest's frames into predictions and uncertainty maps, score them, and
//! time MC sampling against temporal aggregation.
//!
//! Aggregation is streaming: frame `t` is loaded, folded into the running
//! state and written out before frame `t + 1` is read.

use std::cell::Cell;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregator::{
    mc_predict, AggregateError, AggregationPolicy, PolicyKind, PredictiveMoments, StochasticModel,
    StreamAggregator,
};
use crate::evaluation::{
    self, default_recall_points, frame_error_rates, frame_uncertainty_scores, pr_sparsification,
    ranking_report, seg_metrics, ConfusionMatrix, EvalError, FrameReduction, PrCurve, RankingMode,
    RankingReport, SegMetrics, DEFAULT_RETRIEVAL,
};
use crate::format::{read_tensor, write_tensor, FormatError, Tensor};
use crate::synthworld::{
    corrupt_flow, sample_logits, LabelSchedule, LogitMap, NoiseSpec, Rect, SceneSpec, SynthError,
    VideoStream,
};
use crate::tensor::{FlowField, ImageFrame, LabelMap, ProbMap, ScalarMap, VOID_LABEL};
use crate::uncertainty::{ClampStats, UncertaintyKind};
use crate::warp::WarpConfig;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Tensor { path: PathBuf, source: FormatError },
    #[error("invalid input: {0}")]
    Validation(String),
}

impl PipelineError {
    /// Process exit status: 2 for configuration problems, 3 for I/O, 4 for
    /// inputs that exist but are malformed or inconsistent.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Io { .. } => 3,
            PipelineError::Tensor {
                source: FormatError::Io(_),
                ..
            } => 3,
            PipelineError::Tensor { .. } | PipelineError::Validation(_) => 4,
        }
    }

    fn io(path: &Path) -> impl FnOnce(io::Error) -> Self + '_ {
        move |source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<AggregateError> for PipelineError {
    fn from(e: AggregateError) -> Self {
        match e {
            AggregateError::AlphaRange(_)
            | AggregateError::Policy(_)
            | AggregateError::ZeroSamples => PipelineError::Config(e.to_string()),
            other => PipelineError::Validation(other.to_string()),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::RecallPoints(_) | EvalError::Percentage(_) => {
                PipelineError::Config(e.to_string())
            }
            other => PipelineError::Validation(other.to_string()),
        }
    }
}

impl From<SynthError> for PipelineError {
    fn from(e: SynthError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Mc,
    Ta,
    Rta,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Mc => "mc",
            Mode::Ta => "ta",
            Mode::Rta => "rta",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mc" => Ok(Mode::Mc),
            "ta" => Ok(Mode::Ta),
            "rta" => Ok(Mode::Rta),
            other => Err(format!("unknown mode '{other}'")),
        }
    }
}

fn default_kinds() -> Vec<UncertaintyKind> {
    UncertaintyKind::ALL.to_vec()
}

fn default_retrieval() -> Vec<f64> {
    DEFAULT_RETRIEVAL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// `ta` mode uses `alpha`, or `1/t` when `kind` is `cumulative-average`;
    /// `rta` mode uses `alpha_acc`, `alpha_err` and `lambda`.
    pub policy: AggregationPolicy,
    pub kinds: Vec<UncertaintyKind>,
    pub warp: WarpConfig,
    pub recall_points: Vec<f64>,
    pub retrieval: Vec<f64>,
    /// Replaces the noise seed of a synthetic model.
    pub seed: Option<u64>,
    pub mc_samples: usize,
    /// Artificial cost per stochastic forward pass.
    pub sample_delay_ms: u64,
    /// Artificial cost per flow estimate (ta and rta only).
    pub flow_delay_ms: u64,
    pub ranking_mode: RankingMode,
    pub frame_reduction: FrameReduction,
    /// Frames timed by `bench`; all frames when unset.
    pub bench_frames: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            policy: AggregationPolicy::default(),
            kinds: default_kinds(),
            warp: WarpConfig::default(),
            recall_points: default_recall_points(),
            retrieval: default_retrieval(),
            seed: None,
            mc_samples: 20,
            sample_delay_ms: 0,
            flow_delay_ms: 0,
            ranking_mode: RankingMode::Global,
            frame_reduction: FrameReduction::Mean,
            bench_frames: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(PipelineError::io(path))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        if self.mc_samples == 0 {
            return Err(PipelineError::Config(
                "mc_samples must be at least 1".into(),
            ));
        }
        if self.kinds.is_empty() {
            return Err(PipelineError::Config(
                "no uncertainty kinds requested".into(),
            ));
        }
        if self.bench_frames == Some(0) {
            return Err(PipelineError::Config(
                "bench_frames must be at least 1".into(),
            ));
        }
        evaluation::check_recall_points(&self.recall_points)?;
        for &p in &self.retrieval {
            if !(p > 0.0 && p <= 1.0) {
                return Err(EvalError::Percentage(p).into());
            }
        }
        Ok(())
    }

    /// Policy for a streaming mode, `None` for `mc`.
    pub fn policy_for(&self, mode: Mode) -> Option<AggregationPolicy> {
        let mut p = self.policy;
        match mode {
            Mode::Mc => return None,
            Mode::Ta if p.kind == PolicyKind::CumulativeAverage => {}
            Mode::Ta => p.kind = PolicyKind::TaFixed,
            Mode::Rta => p.kind = PolicyKind::RtaStep,
        }
        Some(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// `F(t -> t+1)`, indexed at frame `t+1` pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_to_next: Option<PathBuf>,
    /// Stored stochastic outputs for this frame, one file per sample.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_logits: Option<PathBuf>,
}

/// Where stochastic outputs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    /// Noisy passes over each frame's `clean_logits`.
    Synthetic { noise: NoiseSpec },
    /// Precomputed per-frame `samples`.
    Stored,
}

fn default_void() -> u8 {
    VOID_LABEL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub video_id: String,
    pub classes: usize,
    #[serde(default = "default_void")]
    pub void_label: u8,
    pub frames: Vec<FrameRecord>,
    pub model: ModelSpec,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base: PathBuf,
}

impl Manifest {
    /// Parses a manifest and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(PipelineError::io(path))?;
        let mut m: Manifest = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
        m.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(PipelineError::Validation("manifest has no frames".into()));
        }
        if self.classes == 0 || self.classes > usize::from(u8::MAX) {
            return Err(PipelineError::Validation(format!(
                "bad class count {}",
                self.classes
            )));
        }
        if self.void_label != VOID_LABEL {
            return Err(PipelineError::Validation(format!(
                "void label must be {VOID_LABEL}, got {}",
                self.void_label
            )));
        }
        for (t, f) in self.frames.iter().enumerate() {
            let paths = std::iter::once(&f.image)
                .chain(&f.labels)
                .chain(&f.flow_to_next)
                .chain(&f.samples)
                .chain(&f.clean_logits);
            for p in paths {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(PipelineError::Io {
                        path: full,
                        source: io::Error::new(
                            io::ErrorKind::NotFound,
                            format!("referenced by frame {t}"),
                        ),
                    });
                }
            }
            match &self.model {
                ModelSpec::Synthetic { .. } if f.clean_logits.is_none() => {
                    return Err(PipelineError::Validation(format!(
                        "frame {t} has no clean_logits"
                    )));
                }
                ModelSpec::Stored if f.samples.is_empty() => {
                    return Err(PipelineError::Validation(format!(
                        "frame {t} has no samples"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Checks the inputs a mode needs beyond what `load` guarantees.
    pub fn check_mode(&self, mode: Mode, mc_samples: usize) -> Result<()> {
        let last = self.frames.len() - 1;
        if mode != Mode::Mc {
            if let Some(t) = self.frames[..last]
                .iter()
                .position(|f| f.flow_to_next.is_none())
            {
                return Err(PipelineError::Validation(format!(
                    "{mode} needs flow_to_next on frame {t}"
                )));
            }
        }
        if mode == Mode::Mc && self.model == ModelSpec::Stored {
            if let Some(t) = self
                .frames
                .iter()
                .position(|f| f.samples.len() < mc_samples)
            {
                return Err(PipelineError::Validation(format!(
                    "frame {t} stores {} samples, mc needs {mc_samples}",
                    self.frames[t].samples.len()
                )));
            }
        }
        Ok(())
    }

    fn tensor(&self, p: &Path) -> Result<Tensor> {
        let full = self.resolve(p);
        read_tensor(&full).map_err(|source| PipelineError::Tensor { path: full, source })
    }

    fn typed<T>(
        &self,
        p: &Path,
        f: impl FnOnce(&Tensor) -> std::result::Result<T, FormatError>,
    ) -> Result<T> {
        let t = self.tensor(p)?;
        f(&t).map_err(|source| PipelineError::Tensor {
            path: self.resolve(p),
            source,
        })
    }

    pub fn image(&self, t: usize) -> Result<ImageFrame> {
        self.typed(&self.frames[t].image, Tensor::to_image)
    }

    pub fn labels(&self, t: usize) -> Result<Option<LabelMap>> {
        match &self.frames[t].labels {
            Some(p) => self.typed(p, |x| x.to_labels(self.classes)).map(Some),
            None => Ok(None),
        }
    }

    /// `F(t-1 -> t)`, the flow consumed when stepping to frame `t`.
    pub fn flow_into(&self, t: usize) -> Result<FlowField> {
        let p = t
            .checked_sub(1)
            .and_then(|s| self.frames[s].flow_to_next.as_ref())
            .ok_or_else(|| PipelineError::Validation(format!("no flow into frame {t}")))?;
        self.typed(p, Tensor::to_flow)
    }

    pub fn sampler(&self, t: usize, seed: Option<u64>) -> Result<Box<dyn FrameSampler>> {
        let f = &self.frames[t];
        Ok(match &self.model {
            ModelSpec::Synthetic { noise } => {
                let p = f.clean_logits.as_ref().expect("validated at load");
                let mut noise = *noise;
                if let Some(s) = seed {
                    noise.seed = s;
                }
                Box::new(LogitSampler {
                    logits: self.typed(p, Tensor::to_logit_map)?,
                    noise,
                })
            }
            ModelSpec::Stored => Box::new(StoredSampler {
                paths: f.samples.iter().map(|p| self.resolve(p)).collect(),
            }),
        })
    }

    /// Lazily loads what `mode` needs, frame by frame.
    pub fn frame_inputs(
        &self,
        mode: Mode,
        seed: Option<u64>,
    ) -> impl Iterator<Item = Result<FrameInputs>> + '_ {
        (0..self.frames.len()).map(move |t| {
            Ok(FrameInputs {
                image: if mode == Mode::Rta {
                    Some(self.image(t)?)
                } else {
                    None
                },
                flow_in: if mode != Mode::Mc && t > 0 {
                    Some(self.flow_into(t)?)
                } else {
                    None
                },
                sampler: self.sampler(t, seed)?,
            })
        })
    }
}

/// Stochastic forward passes over one frame.
pub trait FrameSampler {
    fn sample(&self, sample_index: usize) -> Result<ProbMap>;
}

#[derive(Debug, Clone)]
pub struct LogitSampler {
    pub logits: LogitMap,
    pub noise: NoiseSpec,
}

impl FrameSampler for LogitSampler {
    fn sample(&self, sample_index: usize) -> Result<ProbMap> {
        Ok(sample_logits(&self.logits, &self.noise, sample_index))
    }
}

/// Reads sample `i % len` from disk.
#[derive(Debug, Clone)]
pub struct StoredSampler {
    pub paths: Vec<PathBuf>,
}

impl FrameSampler for StoredSampler {
    fn sample(&self, sample_index: usize) -> Result<ProbMap> {
        let p = &self.paths[sample_index % self.paths.len()];
        read_tensor(p)
            .and_then(|t| t.to_prob_map())
            .map_err(|source| PipelineError::Tensor {
                path: p.clone(),
                source,
            })
    }
}

/// Everything the aggregator reads for one frame.
pub struct FrameInputs {
    pub image: Option<ImageFrame>,
    /// `F(t-1 -> t)`; absent on the first frame.
    pub flow_in: Option<FlowField>,
    pub sampler: Box<dyn FrameSampler>,
}

/// Wall-clock seconds spent on one frame. Not reproducible across runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub sample_s: f64,
    pub flow_s: f64,
    pub aggregate_s: f64,
}

impl FrameTiming {
    pub fn total(&self) -> f64 {
        self.sample_s + self.flow_s + self.aggregate_s
    }

    fn add(&mut self, o: &FrameTiming) {
        self.sample_s += o.sample_s;
        self.flow_s += o.flow_s;
        self.aggregate_s += o.aggregate_s;
    }
}

pub struct FrameOutput<'a> {
    pub index: usize,
    pub moments: &'a PredictiveMoments,
    pub maps: &'a [(UncertaintyKind, ScalarMap)],
    pub timing: FrameTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub video_id: String,
    pub mode: Mode,
    pub frames: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<AggregationPolicy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_samples: Option<usize>,
    pub kinds: Vec<UncertaintyKind>,
    pub warp: WarpConfig,
    pub clamp: ClampStats,
    /// Summed over frames. Nondeterministic.
    pub timing: FrameTiming,
}

/// Single-frame view for `mc_predict`, recording time spent sampling.
struct TimedFrame<'a> {
    sampler: &'a dyn FrameSampler,
    delay: Duration,
    spent: Cell<Duration>,
}

impl TimedFrame<'_> {
    fn draw(&self, i: usize) -> Result<ProbMap> {
        let t0 = Instant::now();
        if !self.delay.is_zero() {
            thread::sleep(self.delay);
        }
        let out = self.sampler.sample(i);
        self.spent.set(self.spent.get() + t0.elapsed());
        out
    }
}

impl StochasticModel for TimedFrame<'_> {
    fn sample(&self, _frame: usize, sample_index: usize) -> crate::aggregator::Result<ProbMap> {
        self.draw(sample_index)
            .map_err(|e| AggregateError::Model(e.to_string()))
    }
}

/// Runs `mode` over a stream of frames, handing each frame's result to
/// `sink` before the next frame is pulled. `mc` draws samples `0..N` on
/// every frame; `ta` and `rta` draw sample `t` on frame `t`.
pub fn run_aggregation<I, S>(
    frames: I,
    mode: Mode,
    cfg: &RunConfig,
    mut sink: S,
) -> Result<AggregateSummary>
where
    I: IntoIterator<Item = Result<FrameInputs>>,
    S: FnMut(FrameOutput<'_>) -> Result<()>,
{
    cfg.validate()?;
    let policy = cfg.policy_for(mode);
    let mut agg = policy
        .map(|p| StreamAggregator::new(p, cfg.warp))
        .transpose()?;
    let sample_delay = Duration::from_millis(cfg.sample_delay_ms);
    let flow_delay = Duration::from_millis(cfg.flow_delay_ms);
    let mut clamp: Option<ClampStats> = None;
    let mut totals = FrameTiming::default();
    let mut count = 0;

    for (t, item) in frames.into_iter().enumerate() {
        let f = item?;
        let start = Instant::now();
        let timed = TimedFrame {
            sampler: &*f.sampler,
            delay: sample_delay,
            spent: Cell::new(Duration::ZERO),
        };
        let mut flow_s = Duration::ZERO;
        let mc_moments;
        let moments = match agg.as_mut() {
            None => {
                mc_moments = mc_predict(&timed, t, cfg.mc_samples)?;
                &mc_moments
            }
            Some(agg) => {
                let o = timed.draw(t)?;
                let flow = if t > 0 {
                    let t0 = Instant::now();
                    if !flow_delay.is_zero() {
                        thread::sleep(flow_delay);
                    }
                    let flow = f.flow_in.as_ref().ok_or_else(|| {
                        PipelineError::Validation(format!("no flow into frame {t}"))
                    })?;
                    flow_s = t0.elapsed();
                    Some(flow)
                } else {
                    None
                };
                &agg.push(&o, flow, f.image)?.moments
            }
        };
        let maps: Vec<(UncertaintyKind, ScalarMap)> = cfg
            .kinds
            .iter()
            .map(|&k| (k, moments.uncertainty(k)))
            .collect();
        let sample_s = timed.spent.get();
        let timing = FrameTiming {
            sample_s: sample_s.as_secs_f64(),
            flow_s: flow_s.as_secs_f64(),
            aggregate_s: start
                .elapsed()
                .saturating_sub(sample_s + flow_s)
                .as_secs_f64(),
        };
        let stats = ClampStats::of_moments(moments);
        match clamp.as_mut() {
            Some(c) => c.merge(&stats),
            None => clamp = Some(stats),
        }
        totals.add(&timing);
        sink(FrameOutput {
            index: t,
            moments,
            maps: &maps,
            timing,
        })?;
        count += 1;
    }
    if count == 0 {
        return Err(PipelineError::Validation("no frames to aggregate".into()));
    }
    Ok(AggregateSummary {
        video_id: String::new(),
        mode,
        frames: count,
        policy,
        mc_samples: (mode == Mode::Mc).then_some(cfg.mc_samples),
        kinds: cfg.kinds.clone(),
        warp: cfg.warp,
        clamp: clamp.unwrap_or_default(),
        timing: totals,
    })
}

pub fn prediction_file(t: usize) -> String {
    format!("pred_{t:05}.fct")
}

pub fn uncertainty_file(kind: UncertaintyKind, t: usize) -> String {
    format!("unc_{kind}_{t:05}.fct")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(PipelineError::io(dir))
}

fn save(t: &Tensor, path: PathBuf) -> Result<()> {
    write_tensor(t, &path).map_err(|source| PipelineError::Tensor { path, source })
}

fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable report");
    text.push('\n');
    fs::write(path, text).map_err(PipelineError::io(path))
}

/// Writes `pred_*.fct`, `unc_<kind>_*.fct`, `timing.csv` and
/// `aggregate.json` into `out`.
pub fn cmd_aggregate(
    manifest_path: &Path,
    cfg: &RunConfig,
    mode: Mode,
    out: &Path,
) -> Result<AggregateSummary> {
    cfg.validate()?;
    let manifest = Manifest::load(manifest_path)?;
    manifest.check_mode(mode, cfg.mc_samples)?;
    create_dir(out)?;
    let timing_path = out.join("timing.csv");
    let mut timing =
        BufWriter::new(File::create(&timing_path).map_err(PipelineError::io(&timing_path))?);
    let io_err = PipelineError::io(&timing_path);
    writeln!(timing, "frame,sample_s,flow_s,aggregate_s").map_err(io_err)?;

    let mut summary = run_aggregation(manifest.frame_inputs(mode, cfg.seed), mode, cfg, |o| {
        save(
            &Tensor::from(&o.moments.prediction),
            out.join(prediction_file(o.index)),
        )?;
        for (k, m) in o.maps {
            save(&Tensor::from(m), out.join(uncertainty_file(*k, o.index)))?;
        }
        writeln!(
            timing,
            "{},{:.6},{:.6},{:.6}",
            o.index, o.timing.sample_s, o.timing.flow_s, o.timing.aggregate_s
        )
        .map_err(PipelineError::io(&timing_path))
    })?;
    timing.flush().map_err(PipelineError::io(&timing_path))?;
    summary.video_id = manifest.video_id.clone();
    save_json(&summary, &out.join("aggregate.json"))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindReport {
    pub kind: UncertaintyKind,
    pub pr_curve: PrCurve,
    pub ranking: RankingReport,
    /// Per labeled frame, in `labeled_frames` order.
    pub frame_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub video_id: String,
    pub labeled_frames: Vec<usize>,
    pub seg: SegMetrics,
    pub frame_error_rates: Vec<f64>,
    pub frame_reduction: FrameReduction,
    pub kinds: Vec<KindReport>,
}

impl EvalReport {
    /// One row per PR point: `kind,recall,miou`.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("kind,recall,miou\n");
        for k in &self.kinds {
            for p in &k.pr_curve.points {
                s.push_str(&format!("{},{},{}\n", k.kind, p.recall, p.miou));
            }
        }
        s
    }
}

/// Scores the labeled frames of a manifest against the outputs of
/// [`cmd_aggregate`] in `pred_dir`. Uncertainty kinds from `cfg.kinds`
/// are included when their maps exist for the first labeled frame.
pub fn evaluate_dir(manifest: &Manifest, pred_dir: &Path, cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut labeled = Vec::new();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for t in 0..manifest.frames.len() {
        let Some(gt) = manifest.labels(t)? else {
            continue;
        };
        let path = pred_dir.join(prediction_file(t));
        let p = read_tensor(&path)
            .and_then(|x| x.to_prob_map())
            .map_err(|source| PipelineError::Tensor { path, source })?;
        if p.hw() != gt.hw() || p.classes() != manifest.classes {
            return Err(PipelineError::Validation(format!(
                "frame {t}: prediction is {}x{}x{}, labels are {}x{} with {} classes",
                p.height(),
                p.width(),
                p.classes(),
                gt.height(),
                gt.width(),
                manifest.classes
            )));
        }
        labeled.push(t);
        preds.push(p.argmax_labels());
        gts.push(gt);
    }
    if labeled.is_empty() {
        return Err(PipelineError::Validation("no labeled frames".into()));
    }

    let mut cm = ConfusionMatrix::new(manifest.classes);
    for (p, g) in preds.iter().zip(&gts) {
        cm.accumulate(p, g)?;
    }
    let seg = seg_metrics(&cm)?;
    let errors = frame_error_rates(&preds, &gts)?;

    let first = labeled[0];
    let kinds: Vec<UncertaintyKind> = cfg
        .kinds
        .iter()
        .copied()
        .filter(|&k| pred_dir.join(uncertainty_file(k, first)).is_file())
        .collect();
    let mut reports = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let uncs = labeled
            .iter()
            .map(|&t| {
                let path = pred_dir.join(uncertainty_file(kind, t));
                read_tensor(&path)
                    .and_then(|x| x.to_scalar_map())
                    .map_err(|source| PipelineError::Tensor { path, source })
            })
            .collect::<Result<Vec<_>>>()?;
        let pr_curve = pr_sparsification(
            &preds,
            &gts,
            &uncs,
            manifest.classes,
            &cfg.recall_points,
            cfg.ranking_mode,
        )?;
        let frame_scores = frame_uncertainty_scores(&uncs, cfg.frame_reduction);
        let ranking = ranking_report(&errors, &frame_scores, &cfg.retrieval)?;
        reports.push(KindReport {
            kind,
            pr_curve,
            ranking,
            frame_scores,
        });
    }
    Ok(EvalReport {
        video_id: manifest.video_id.clone(),
        labeled_frames: labeled,
        seg,
        frame_error_rates: errors,
        frame_reduction: cfg.frame_reduction,
        kinds: reports,
    })
}

/// Writes the report as JSON to `out` and its PR points as CSV next to it.
pub fn cmd_evaluate(
    manifest_path: &Path,
    pred_dir: &Path,
    cfg: &RunConfig,
    out: &Path,
) -> Result<EvalReport> {
    let manifest = Manifest::load(manifest_path)?;
    let report = evaluate_dir(&manifest, pred_dir, cfg)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_json(&report, out)?;
    let csv = out.with_extension("csv");
    fs::write(&csv, report.curve_csv()).map_err(PipelineError::io(&csv))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCorruption {
    pub region: Rect,
    pub magnitude: f64,
    pub seed: u64,
}

/// Input document for `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub scene: SceneSpec,
    pub noise: NoiseSpec,
    /// Noise added to every stored flow inside a fixed region. Labels and
    /// images are unaffected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_corruption: Option<FlowCorruption>,
    /// Defaults to every frame labeled, nothing void.
    #[serde(default)]
    pub labels: LabelSchedule,
}

/// Renders `cfg` into `out` and returns the manifest path.
pub fn simulate_to_dir(cfg: &SimulateConfig, out: &Path) -> Result<PathBuf> {
    cfg.noise.validate()?;
    let stream = VideoStream::new(cfg.scene.clone())?;
    create_dir(out)?;
    let last = cfg.scene.frames - 1;
    let mut frames = Vec::with_capacity(cfg.scene.frames);
    for bundle in stream {
        let b = bundle?;
        let t = b.index;
        let rec = FrameRecord {
            image: format!("image_{t:05}.fct").into(),
            labels: cfg
                .labels
                .is_labeled(t)
                .then(|| format!("labels_{t:05}.fct").into()),
            flow_to_next: (t < last).then(|| format!("flow_{t:05}.fct").into()),
            samples: Vec::new(),
            clean_logits: Some(format!("logits_{t:05}.fct").into()),
        };
        save(&Tensor::from(&b.image), out.join(&rec.image))?;
        if let (Some(p), Some(l)) = (&rec.labels, cfg.labels.labels(&b)) {
            save(&Tensor::from(&l), out.join(p))?;
        }
        save(
            &Tensor::from(&b.clean_logits),
            out.join(rec.clean_logits.as_ref().expect("set above")),
        )?;
        if let Some(p) = &rec.flow_to_next {
            let flow = match &cfg.flow_corruption {
                Some(c) => corrupt_flow(
                    &b.flow_to_next,
                    c.region,
                    c.magnitude,
                    c.seed.wrapping_add(t as u64),
                )?,
                None => b.flow_to_next,
            };
            save(&Tensor::from(&flow), out.join(p))?;
        }
        frames.push(rec);
    }
    let manifest = Manifest {
        video_id: format!("synth-{}", cfg.scene.seed),
        classes: cfg.scene.classes,
        void_label: VOID_LABEL,
        frames,
        model: ModelSpec::Synthetic { noise: cfg.noise },
        base: PathBuf::new(),
    };
    let path = out.join("manifest.json");
    save_json(&manifest, &path)?;
    Ok(path)
}

pub fn cmd_simulate(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<PathBuf> {
    let text = fs::read_to_string(config_path).map_err(PipelineError::io(config_path))?;
    let mut cfg: SimulateConfig = serde_json::from_str(&text)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", config_path.display())))?;
    if let Some(s) = seed {
        cfg.scene.seed = s;
        cfg.noise.seed = s;
    }
    simulate_to_dir(&cfg, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: Mode,
    pub samples_per_frame: usize,
    pub seconds_per_frame: f64,
    pub sample_s: f64,
    pub flow_s: f64,
    pub aggregate_s: f64,
    /// `mc seconds / this mode's seconds`.
    pub speedup: f64,
}

/// All timing fields are nondeterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub video_id: String,
    pub frames: usize,
    pub sample_delay_ms: u64,
    pub flow_delay_ms: u64,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, mode: Mode) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from(
            "mode,samples_per_frame,seconds_per_frame,sample_s,flow_s,aggregate_s,speedup\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
                r.mode,
                r.samples_per_frame,
                r.seconds_per_frame,
                r.sample_s,
                r.flow_s,
                r.aggregate_s,
                r.speedup
            ));
        }
        s
    }
}

/// Times `mc` with `n_mc` samples against `ta` and `rta` over the same
/// frames. Outputs are computed but not written.
pub fn bench_manifest(manifest: &Manifest, cfg: &RunConfig, n_mc: usize) -> Result<BenchReport> {
    if n_mc == 0 {
        return Err(PipelineError::Config("n_mc must be at least 1".into()));
    }
    let cfg = RunConfig {
        mc_samples: n_mc,
        ..cfg.clone()
    };
    cfg.validate()?;
    let limit = cfg
        .bench_frames
        .unwrap_or(usize::MAX)
        .min(manifest.frames.len());
    let mut rows = Vec::new();
    for mode in [Mode::Mc, Mode::Ta, Mode::Rta] {
        manifest.check_mode(mode, n_mc)?;
        let wall = Instant::now();
        let summary = run_aggregation(
            manifest.frame_inputs(mode, cfg.seed).take(limit),
            mode,
            &cfg,
            |_| Ok(()),
        )?;
        let elapsed = wall.elapsed().as_secs_f64();
        let per = |x: f64| x / summary.frames as f64;
        rows.push(BenchRow {
            mode,
            samples_per_frame: if mode == Mode::Mc { n_mc } else { 1 },
            seconds_per_frame: per(summary.timing.total()),
            sample_s: per(summary.timing.sample_s),
            flow_s: per(summary.timing.flow_s),
            aggregate_s: per(summary.timing.aggregate_s),
            speedup: 0.0,
        });
        debug_assert!(elapsed >= summary.timing.total() * 0.99);
    }
    let mc = rows[0].seconds_per_frame;
    for r in &mut rows {
        r.speedup = mc / r.seconds_per_frame;
    }
    Ok(BenchReport {
        video_id: manifest.video_id.clone(),
        frames: limit,
        sample_delay_ms: cfg.sample_delay_ms,
        flow_delay_ms: cfg.flow_delay_ms,
        rows,
    })
}

/// Writes `bench.json` and `bench.csv` into `out` when given.
pub fn cmd_bench(
    manifest_path: &Path,
    cfg: &RunConfig,
    n_mc: usize,
    out: Option<&Path>,
) -> Result<BenchReport> {
    let manifest = Manifest::load(manifest_path)?;
    let report = bench_manifest(&manifest, cfg, n_mc)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        save_json(&report, &dir.join("bench.json"))?;
        let csv = dir.join("bench.csv");
        fs::write(&csv, report.csv()).map_err(PipelineError::io(&csv))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{NoiseKind, SceneObject, Shape};

    fn static_config(h: usize, w: usize, frames: usize) -> SimulateConfig {
        SimulateConfig {
            scene: SceneSpec {
                height: h,
                width: w,
                classes: 3,
                background_class: 0,
                background_intensity: None,
                background_margin: 3.0,
                objects: vec![SceneObject {
                    shape: Shape::Rect {
                        width: 8.0,
                        height: 6.0,
                    },
                    class: 1,
                    center: [w as f64 / 2.0, h as f64 / 2.0],
                    velocity: [0.0, 0.0],
                    intensity: None,
                    margin: 4.0,
                }],
                frames,
                seed: 3,
                frame_margin_jitter: 0.0,
                channels: 1,
            },
            noise: NoiseSpec {
                kind: NoiseKind::GaussianLogit,
                scale: 1.0,
                boundary_boost: 1.0,
                boundary_width: 2,
                seed: 11,
            },
            flow_corruption: None,
            labels: Default::default(),
        }
    }

    #[test]
    fn simulate_static_scene_writes_zero_flows() {
        let dir = tempfile::tempdir().unwrap();
        let path = simulate_to_dir(&static_config(32, 32, 10), dir.path()).unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.frames.len(), 10);
        let flows: Vec<_> = m
            .frames
            .iter()
            .filter_map(|f| f.flow_to_next.as_ref())
            .collect();
        assert_eq!(flows.len(), 9);
        for t in 1..10 {
            assert!(m.flow_into(t).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mc_single_sample_matches_ta_first_frame() {
        let dir = tempfile::tempdir().unwrap();
        let path = simulate_to_dir(&static_config(16, 16, 1), dir.path()).unwrap();
        let cfg = RunConfig {
            mc_samples: 1,
            ..RunConfig::default()
        };
        cmd_aggregate(&path, &cfg, Mode::Mc, &dir.path().join("mc")).unwrap();
        cmd_aggregate(&path, &cfg, Mode::Ta, &dir.path().join("ta")).unwrap();
        for name in std::iter::once(prediction_file(0))
            .chain(UncertaintyKind::ALL.iter().map(|&k| uncertainty_file(k, 0)))
        {
            let a = fs::read(dir.path().join("mc").join(&name)).unwrap();
            let b = fs::read(dir.path().join("ta").join(&name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn mode_requirements() {
        let dir = tempfile::tempdir().unwrap();
        let path = simulate_to_dir(&static_config(8, 8, 3), dir.path()).unwrap();
        let mut m = Manifest::load(&path).unwrap();
        m.frames[1].flow_to_next = None;
        assert!(m.check_mode(Mode::Mc, 5).is_ok());
        let e = m.check_mode(Mode::Ta, 5).unwrap_err();
        assert_eq!(e.exit_code(), 4);
        // the last frame needs no outgoing flow
        m.frames[1].flow_to_next = Some("flow_00001.fct".into());
        m.frames[2].flow_to_next = None;
        assert!(m.check_mode(Mode::Rta, 5).is_ok());
    }

    #[test]
    fn error_categories_have_distinct_codes() {
        let dir = tempfile::tempdir().unwrap();
        let missing = cmd_aggregate(
            &dir.path().join("nope.json"),
            &RunConfig::default(),
            Mode::Mc,
            dir.path(),
        );
        assert_eq!(missing.unwrap_err().exit_code(), 3);

        let bad_cfg = RunConfig {
            policy: AggregationPolicy::ta(1.5),
            ..RunConfig::default()
        };
        let path = simulate_to_dir(&static_config(8, 8, 2), dir.path()).unwrap();
        assert_eq!(
            cmd_aggregate(&path, &bad_cfg, Mode::Ta, &dir.path().join("o"))
                .unwrap_err()
                .exit_code(),
            2
        );

        fs::write(dir.path().join("labels_00000.fct"), b"XXXX").unwrap();
        let e = evaluate_dir(
            &Manifest::load(&path).unwrap(),
            dir.path(),
            &RunConfig::default(),
        )
        .unwrap_err();
        assert_eq!(e.exit_code(), 4);
    }

    #[test]
    fn config_parses_with_partial_fields() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"mc_samples": 7, "kinds": ["bald"]}"#).unwrap();
        assert_eq!(cfg.mc_samples, 7);
        assert_eq!(cfg.kinds, vec![UncertaintyKind::Bald]);
        assert_eq!(cfg.policy, AggregationPolicy::default());
        assert_eq!(cfg.retrieval, vec![0.1, 0.3, 0.5, 0.7]);
        assert!(serde_json::from_str::<RunConfig>(r#"{"mc_samples": "x"}"#).is_err());
    }

    #[test]
    fn policy_for_modes() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.policy_for(Mode::Mc), None);
        assert_eq!(cfg.policy_for(Mode::Ta).unwrap().kind, PolicyKind::TaFixed);
        assert_eq!(cfg.policy_for(Mode::Rta).unwrap().kind, PolicyKind::RtaStep);
        let cum = RunConfig {
            policy: AggregationPolicy::cumulative(),
            ..RunConfig::default()
        };
        assert_eq!(
            cum.policy_for(Mode::Ta).unwrap().kind,
            PolicyKind::CumulativeAverage
        );
    }
}
