//! Deterministic synthetic videos with exact optical flow, and a seedable
//! stochastic segmenter over them.
//!
//! Objects are constant-intensity rectangles and disks translating at fixed
//! velocities and bouncing off the frame border. Every pixel of frame `t`
//! belongs to one surface (an object or the background); the ground-truth
//! flow into frame `t` is indexed at the destination pixel and equals the
//! displacement of the surface found there, so backward sampling along it
//! is exact away from dis-occlusions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregator::{self, StochasticModel};
use crate::tensor::{FlowField, ImageFrame, LabelMap, ProbMap, TensorError, VOID_LABEL};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidSpec(String),
    #[error("region {0:?} is outside the flow field")]
    RegionOutOfBounds(Rect),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Rect { width: f64, height: f64 },
    Disk { radius: f64 },
}

impl Shape {
    /// Half extents along x and y.
    fn half_extent(&self) -> (f64, f64) {
        match *self {
            Shape::Rect { width, height } => (width / 2.0, height / 2.0),
            Shape::Disk { radius } => (radius, radius),
        }
    }

    fn covers(&self, cx: f64, cy: f64, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { width, height } => {
                x >= cx - width / 2.0
                    && x < cx + width / 2.0
                    && y >= cy - height / 2.0
                    && y < cy + height / 2.0
            }
            Shape::Disk { radius } => (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius,
        }
    }
}

fn default_margin() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub class: u8,
    /// Center at frame 0, pixels.
    pub center: [f64; 2],
    /// Pixels per frame.
    pub velocity: [f64; 2],
    /// Rendered intensity; defaults to a per-class level.
    #[serde(default)]
    pub intensity: Option<f64>,
    /// Clean logit margin of the true class inside this object.
    #[serde(default = "default_margin")]
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    #[serde(default)]
    pub background_class: u8,
    #[serde(default)]
    pub background_intensity: Option<f64>,
    #[serde(default = "default_margin")]
    pub background_margin: f64,
    pub objects: Vec<SceneObject>,
    pub frames: usize,
    pub seed: u64,
    /// Each frame scales all margins by `1 - jitter * u`, `u ~ U[0, 1)`,
    /// giving easy and hard frames.
    #[serde(default)]
    pub frame_margin_jitter: f64,
    /// 1 (gray) or 3.
    #[serde(default = "one")]
    pub channels: usize,
}

fn one() -> usize {
    1
}

/// Intensity assigned to a class when the scene does not override it.
pub fn class_intensity(class: u8, classes: usize) -> f64 {
    let span = (classes.max(2) - 1) as f64;
    (30.0 + 190.0 * f64::from(class) / span).round()
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.height == 0 || self.width == 0 {
            return bad("frame dimensions must be positive".into());
        }
        if self.classes < 2 || self.classes > 255 {
            return bad(format!("classes must be in 2..=255, got {}", self.classes));
        }
        if self.frames == 0 {
            return bad("at least one frame is required".into());
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if usize::from(self.background_class) >= self.classes {
            return bad("background class out of range".into());
        }
        if !(0.0..1.0).contains(&self.frame_margin_jitter) {
            return bad("frame_margin_jitter must be in [0, 1)".into());
        }
        let intensity_ok = |v: Option<f64>| v.is_none_or(|v| (0.0..=255.0).contains(&v));
        if !intensity_ok(self.background_intensity) || !self.background_margin.is_finite() {
            return bad("background intensity/margin out of range".into());
        }
        for (i, o) in self.objects.iter().enumerate() {
            if usize::from(o.class) >= self.classes {
                return bad(format!("object {i}: class {} >= {}", o.class, self.classes));
            }
            if !(o.velocity.iter().chain(&o.center).all(|v| v.is_finite()) && o.margin.is_finite())
            {
                return bad(format!("object {i}: non-finite parameters"));
            }
            if !intensity_ok(o.intensity) {
                return bad(format!("object {i}: intensity outside [0, 255]"));
            }
            let (hx, hy) = o.shape.half_extent();
            if !(hx > 0.0 && hy > 0.0) {
                return bad(format!("object {i}: empty shape"));
            }
            let (w, h) = (self.width as f64, self.height as f64);
            if o.center[0] - hx < 0.0
                || o.center[0] + hx > w
                || o.center[1] - hy < 0.0
                || o.center[1] + hy > h
            {
                return bad(format!("object {i}: outside the frame at t = 0"));
            }
        }
        Ok(())
    }

    fn background_level(&self) -> f64 {
        self.background_intensity
            .unwrap_or_else(|| class_intensity(self.background_class, self.classes))
    }

    fn object_level(&self, o: &SceneObject) -> f64 {
        o.intensity
            .unwrap_or_else(|| class_intensity(o.class, self.classes))
    }

    /// The scene used by the direction checks and the CLI examples: one fast
    /// rectangle, two slower objects, frames of varying difficulty.
    pub fn benchmark(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jitter = |v: f64, spread: f64| v + spread * (rng.random::<f64>() - 0.5);
        SceneSpec {
            height: 48,
            width: 64,
            classes: 4,
            background_class: 0,
            background_intensity: None,
            background_margin: 3.0,
            objects: vec![
                SceneObject {
                    shape: Shape::Rect {
                        width: 14.0,
                        height: 12.0,
                    },
                    class: 1,
                    center: [jitter(16.0, 6.0), jitter(16.0, 6.0)],
                    velocity: [jitter(5.0, 1.0), jitter(1.5, 1.0)],
                    intensity: None,
                    margin: 2.0,
                },
                SceneObject {
                    shape: Shape::Disk { radius: 7.0 },
                    class: 2,
                    center: [jitter(44.0, 6.0), jitter(30.0, 6.0)],
                    velocity: [jitter(-1.0, 0.6), jitter(0.5, 0.6)],
                    intensity: None,
                    margin: 2.5,
                },
                SceneObject {
                    shape: Shape::Rect {
                        width: 8.0,
                        height: 16.0,
                    },
                    class: 3,
                    center: [jitter(52.0, 4.0), jitter(12.0, 4.0)],
                    velocity: [jitter(-0.5, 0.4), jitter(0.8, 0.4)],
                    intensity: None,
                    margin: 1.5,
                },
            ],
            frames: 60,
            seed,
            frame_margin_jitter: 0.6,
            channels: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    #[default]
    GaussianLogit,
    DropoutMask,
}

fn default_boundary_width() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(default)]
    pub kind: NoiseKind,
    /// Logit noise std (gaussian-logit) or drop rate in `[0, 1)` (dropout-mask).
    pub scale: f64,
    /// Extra logit noise std within `boundary_width` pixels of a label edge.
    #[serde(default)]
    pub boundary_boost: f64,
    #[serde(default = "default_boundary_width")]
    pub boundary_width: usize,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let ok_scale = match self.kind {
            NoiseKind::GaussianLogit => self.scale >= 0.0 && self.scale.is_finite(),
            NoiseKind::DropoutMask => (0.0..1.0).contains(&self.scale),
        };
        if !ok_scale || !(self.boundary_boost >= 0.0 && self.boundary_boost.is_finite()) {
            return Err(SynthError::InvalidSpec(format!(
                "noise parameters out of range: {self:?}"
            )));
        }
        Ok(())
    }

    /// Boundary-boosted gaussian logit noise used with [`SceneSpec::benchmark`].
    pub fn benchmark(seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::GaussianLogit,
            scale: 0.2,
            boundary_boost: 0.5,
            boundary_width: 2,
            seed,
        }
    }
}

/// Which frames carry ground truth, and whether pixels without a
/// correspondence in the previous frame are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelSchedule {
    /// Frames before this one are left unlabeled.
    pub first: usize,
    /// Label every `every`-th frame from `first`. 0 is treated as 1.
    pub every: usize,
    /// Mark dis-occluded pixels void.
    pub void_disoccluded: bool,
}

impl LabelSchedule {
    /// Used with [`SceneSpec::benchmark`]. The first frames are skipped
    /// because a streaming aggregate there still rests on one or two samples.
    pub fn benchmark() -> Self {
        LabelSchedule {
            first: 5,
            every: 1,
            void_disoccluded: true,
        }
    }

    pub fn is_labeled(&self, t: usize) -> bool {
        t >= self.first && (t - self.first).is_multiple_of(self.every.max(1))
    }

    pub fn labels(&self, bundle: &SynthFrameBundle) -> Option<LabelMap> {
        if !self.is_labeled(bundle.index) {
            return None;
        }
        if !self.void_disoccluded {
            return Some(bundle.labels.clone());
        }
        let data = bundle
            .labels
            .data()
            .iter()
            .zip(&bundle.disoccluded)
            .map(|(&l, &d)| if d { VOID_LABEL } else { l })
            .collect();
        let (h, w) = bundle.labels.hw();
        Some(LabelMap::from_raw(h, w, data))
    }
}

/// Real-valued `H x W x C` logits, unconstrained in sign.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f64>,
}

impl LogitMap {
    pub fn from_vec(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || classes == 0 {
            return Err(TensorError::ZeroDimension {
                height,
                width,
                channels: classes,
            }
            .into());
        }
        if data.len() != height * width * classes {
            return Err(TensorError::LengthMismatch {
                expected: height * width * classes,
                got: data.len(),
            }
            .into());
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index }.into());
        }
        Ok(Self {
            height,
            width,
            classes,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn argmax_map(&self) -> Vec<u8> {
        self.data
            .chunks_exact(self.classes)
            .map(crate::tensor::argmax)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFrameBundle {
    pub index: usize,
    pub image: ImageFrame,
    pub labels: LabelMap,
    /// `F(t -> t+1)`, indexed at frame `t+1` pixels. Zero on the last frame.
    pub flow_to_next: FlowField,
    pub clean_logits: LogitMap,
    /// Pixels of this frame with no valid correspondence in the previous
    /// frame. All false on frame 0.
    pub disoccluded: Vec<bool>,
}

/// Surface id per pixel: 0 is background, `i + 1` is object `i`.
type SurfaceMap = Vec<u16>;

/// Lazily renders a scene one frame at a time. Holds only the current and
/// next object placements.
#[derive(Debug, Clone)]
pub struct VideoStream {
    spec: SceneSpec,
    t: usize,
    centers: Vec<[f64; 2]>,
    velocities: Vec<[f64; 2]>,
    margin_rng: ChaCha8Rng,
    prev_surfaces: Option<SurfaceMap>,
    /// Flow into the current frame.
    incoming_flow: Vec<f64>,
}

impl VideoStream {
    pub fn new(spec: SceneSpec) -> Result<Self> {
        spec.validate()?;
        let centers = spec.objects.iter().map(|o| o.center).collect();
        let velocities = spec.objects.iter().map(|o| o.velocity).collect();
        let margin_rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 0x6d61_7267_696e));
        Ok(Self {
            spec,
            t: 0,
            centers,
            velocities,
            margin_rng,
            prev_surfaces: None,
            incoming_flow: Vec::new(),
        })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    fn surfaces(&self, centers: &[[f64; 2]]) -> SurfaceMap {
        let (h, w) = (self.spec.height, self.spec.width);
        let mut out = vec![0u16; h * w];
        for (i, (o, c)) in self.spec.objects.iter().zip(centers).enumerate() {
            let (hx, hy) = o.shape.half_extent();
            let x0 = (c[0] - hx).floor().max(0.0) as usize;
            let x1 = ((c[0] + hx).ceil() as usize).min(w - 1);
            let y0 = (c[1] - hy).floor().max(0.0) as usize;
            let y1 = ((c[1] + hy).ceil() as usize).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if o.shape.covers(c[0], c[1], x as f64, y as f64) {
                        out[y * w + x] = (i + 1) as u16;
                    }
                }
            }
        }
        out
    }

    /// Advances every object by one frame with reflection at the border.
    fn advance(&self) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
        let dims = [self.spec.width as f64, self.spec.height as f64];
        let mut centers = self.centers.clone();
        let mut velocities = self.velocities.clone();
        for (i, o) in self.spec.objects.iter().enumerate() {
            let (hx, hy) = o.shape.half_extent();
            let half = [hx, hy];
            for axis in 0..2 {
                let lo = half[axis];
                let hi = dims[axis] - half[axis];
                let mut p = centers[i][axis] + velocities[i][axis];
                if hi <= lo {
                    p = centers[i][axis];
                } else {
                    // Reflect until inside; handles velocities larger than the room.
                    while p < lo || p > hi {
                        if p < lo {
                            p = 2.0 * lo - p;
                        } else {
                            p = 2.0 * hi - p;
                        }
                        velocities[i][axis] = -velocities[i][axis];
                    }
                }
                centers[i][axis] = p;
            }
        }
        (centers, velocities)
    }

    fn render(
        &mut self,
        surfaces: &SurfaceMap,
        next: &[[f64; 2]],
        next_surfaces: &SurfaceMap,
    ) -> Result<SynthFrameBundle> {
        let spec = &self.spec;
        let (h, w, c) = (spec.height, spec.width, spec.classes);
        let frame_factor = 1.0 - spec.frame_margin_jitter * self.margin_rng.random::<f64>();

        let level = |s: u16| {
            if s == 0 {
                spec.background_level()
            } else {
                spec.object_level(&spec.objects[usize::from(s) - 1])
            }
        };
        let class_of = |s: u16| {
            if s == 0 {
                spec.background_class
            } else {
                spec.objects[usize::from(s) - 1].class
            }
        };
        let margin_of = |s: u16| {
            if s == 0 {
                spec.background_margin
            } else {
                spec.objects[usize::from(s) - 1].margin
            }
        };

        let mut image = Vec::with_capacity(h * w * spec.channels);
        let mut labels = Vec::with_capacity(h * w);
        let mut logits = vec![0.0; h * w * c];
        for (p, &s) in surfaces.iter().enumerate() {
            let v = level(s);
            if spec.channels == 1 {
                image.push(v);
            } else {
                image.extend([v, (0.5 * v + 60.0).round(), 255.0 - v]);
            }
            let k = class_of(s);
            labels.push(k);
            logits[p * c + usize::from(k)] = margin_of(s) * frame_factor;
        }

        let mut flow = vec![0.0; h * w * 2];
        if self.t + 1 < spec.frames {
            for (p, &s) in next_surfaces.iter().enumerate() {
                if s != 0 {
                    let i = usize::from(s) - 1;
                    flow[p * 2] = next[i][0] - self.centers[i][0];
                    flow[p * 2 + 1] = next[i][1] - self.centers[i][1];
                }
            }
        }

        let disoccluded = match &self.prev_surfaces {
            None => vec![false; h * w],
            Some(prev) => disocclusion_mask(prev, surfaces, &self.incoming_flow, w, h),
        };

        Ok(SynthFrameBundle {
            index: self.t,
            image: ImageFrame::from_vec(h, w, spec.channels, image)?,
            labels: LabelMap::from_vec(h, w, c, labels)?,
            flow_to_next: FlowField::from_vec(h, w, flow)?,
            clean_logits: LogitMap::from_vec(h, w, c, logits)?,
            disoccluded,
        })
    }
}

/// A pixel is dis-occluded when any bilinear support pixel of its backward
/// sample position lies on a different surface (or outside the frame).
fn disocclusion_mask(
    prev: &SurfaceMap,
    cur: &SurfaceMap,
    flow: &[f64],
    w: usize,
    h: usize,
) -> Vec<bool> {
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let sx = x as f64 - flow[p * 2];
            let sy = y as f64 - flow[p * 2 + 1];
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let mut bad = false;
            for (ix, iy, wt) in [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ] {
                if wt == 0.0 {
                    continue;
                }
                if ix < 0.0 || iy < 0.0 || ix >= w as f64 || iy >= h as f64 {
                    bad = true;
                    break;
                }
                if prev[iy as usize * w + ix as usize] != cur[p] {
                    bad = true;
                    break;
                }
            }
            out[p] = bad;
        }
    }
    out
}

impl Iterator for VideoStream {
    type Item = Result<SynthFrameBundle>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.t >= self.spec.frames {
            return None;
        }
        let surfaces = self.surfaces(&self.centers);
        let (next_centers, next_velocities) = self.advance();
        let next_surfaces = self.surfaces(&next_centers);
        let bundle = self.render(&surfaces, &next_centers, &next_surfaces);
        self.incoming_flow = bundle
            .as_ref()
            .map(|b| b.flow_to_next.data().to_vec())
            .unwrap_or_default();
        self.prev_surfaces = Some(surfaces);
        self.centers = next_centers;
        self.velocities = next_velocities;
        self.t += 1;
        Some(bundle)
    }
}

pub fn generate_video(spec: &SceneSpec) -> Result<Vec<SynthFrameBundle>> {
    VideoStream::new(spec.clone())?.collect()
}

/// SplitMix64 finalizer over two words; derives independent stream seeds.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Pixels within `width` (Chebyshev distance) of a pixel with another label.
pub fn boundary_mask(labels: &[u8], h: usize, w: usize, width: usize) -> Vec<bool> {
    let mut edge = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            let differs = (x + 1 < w && labels[y * w + x + 1] != l)
                || (y + 1 < h && labels[(y + 1) * w + x] != l);
            if differs {
                edge[y * w + x] = true;
                if x + 1 < w && labels[y * w + x + 1] != l {
                    edge[y * w + x + 1] = true;
                }
                if y + 1 < h && labels[(y + 1) * w + x] != l {
                    edge[(y + 1) * w + x] = true;
                }
            }
        }
    }
    if width == 0 {
        return edge;
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !edge[y * w + x] {
                continue;
            }
            for yy in y.saturating_sub(width)..=(y + width).min(h - 1) {
                for xx in x.saturating_sub(width)..=(x + width).min(w - 1) {
                    out[yy * w + xx] = true;
                }
            }
        }
    }
    out
}

/// One stochastic forward pass over clean logits. The draw is keyed by
/// `(noise.seed, sample_index)`: the sample index plays the role of one
/// dropout mask, so two frames with identical content and the same sample
/// index give identical outputs.
pub fn sample_logits(logits: &LogitMap, noise: &NoiseSpec, sample_index: usize) -> ProbMap {
    let (h, w, c) = (logits.height, logits.width, logits.classes);
    let near = if noise.boundary_boost > 0.0 {
        boundary_mask(&logits.argmax_map(), h, w, noise.boundary_width)
    } else {
        vec![false; h * w]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix(noise.seed, sample_index as u64));
    let mut out = Vec::with_capacity(h * w * c);
    let mut z = vec![0.0; c];
    for (p, px) in logits.data.chunks_exact(c).enumerate() {
        let boost = if near[p] { noise.boundary_boost } else { 0.0 };
        for (k, &l) in px.iter().enumerate() {
            let g: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.random();
            z[k] = match noise.kind {
                NoiseKind::GaussianLogit => l + (noise.scale + boost) * g,
                NoiseKind::DropoutMask => {
                    let kept = if u < noise.scale {
                        0.0
                    } else {
                        l / (1.0 - noise.scale)
                    };
                    kept + boost * g
                }
            };
        }
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(z.iter().map(|v| (v - m).exp()));
        let s: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= s);
    }
    ProbMap::from_raw(h, w, c, out)
}

pub fn sample_segmenter(
    bundle: &SynthFrameBundle,
    noise: &NoiseSpec,
    sample_index: usize,
) -> ProbMap {
    sample_logits(&bundle.clean_logits, noise, sample_index)
}

/// In-memory stochastic segmenter over a rendered video.
#[derive(Debug, Clone)]
pub struct SynthSegmenter<'a> {
    pub frames: &'a [SynthFrameBundle],
    pub noise: NoiseSpec,
}

impl StochasticModel for SynthSegmenter<'_> {
    fn sample(&self, frame: usize, sample_index: usize) -> aggregator::Result<ProbMap> {
        let bundle = self
            .frames
            .get(frame)
            .ok_or_else(|| aggregator::AggregateError::Model(format!("no frame {frame}")))?;
        Ok(sample_segmenter(bundle, &self.noise, sample_index))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// Adds seeded `U[-magnitude, magnitude]` noise to both flow components
/// inside `region`.
pub fn corrupt_flow(f: &FlowField, region: Rect, magnitude: f64, seed: u64) -> Result<FlowField> {
    let (h, w) = f.hw();
    if region.width == 0
        || region.height == 0
        || region.x + region.width > w
        || region.y + region.height > h
    {
        return Err(SynthError::RegionOutOfBounds(region));
    }
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(SynthError::InvalidSpec(format!(
            "flow corruption magnitude {magnitude}"
        )));
    }
    let mut data = f.data().to_vec();
    if magnitude > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for y in region.y..region.y + region.height {
            for x in region.x..region.x + region.width {
                let i = (y * w + x) * 2;
                data[i] += rng.random_range(-magnitude..=magnitude);
                data[i + 1] += rng.random_range(-magnitude..=magnitude);
            }
        }
    }
    Ok(FlowField::from_vec(h, w, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::{reconstruction_error, warp_image, WarpConfig};

    fn one_rect(velocity: [f64; 2], frames: usize) -> SceneSpec {
        SceneSpec {
            height: 16,
            width: 24,
            classes: 3,
            background_class: 0,
            background_intensity: None,
            background_margin: 4.0,
            objects: vec![SceneObject {
                shape: Shape::Rect {
                    width: 6.0,
                    height: 4.0,
                },
                class: 2,
                center: [6.0, 8.0],
                velocity,
                intensity: None,
                margin: 4.0,
            }],
            frames,
            seed: 3,
            frame_margin_jitter: 0.0,
            channels: 1,
        }
    }

    #[test]
    fn static_scene_repeats() {
        let v = generate_video(&one_rect([0.0, 0.0], 5)).unwrap();
        assert_eq!(v.len(), 5);
        for b in &v {
            assert_eq!(b.image, v[0].image);
            assert_eq!(b.labels, v[0].labels);
            assert!(b.flow_to_next.data().iter().all(|&d| d == 0.0));
            assert!(b.disoccluded.iter().all(|&d| !d));
        }
    }

    #[test]
    fn unit_velocity_shifts_labels_one_column() {
        let v = generate_video(&one_rect([1.0, 0.0], 6)).unwrap();
        let (h, w) = (16, 24);
        for pair in v.windows(2) {
            let (a, b) = (&pair[0].labels, &pair[1].labels);
            for y in 0..h {
                for x in 0..w {
                    let expect = if x == 0 { a.get(y, 0) } else { a.get(y, x - 1) };
                    assert_eq!(b.get(y, x), expect, "({y}, {x})");
                }
            }
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let spec = SceneSpec::benchmark(11);
        assert_eq!(
            generate_video(&spec).unwrap(),
            generate_video(&spec).unwrap()
        );
    }

    #[test]
    fn objects_bounce_and_stay_inside() {
        let spec = one_rect([7.3, 5.1], 40);
        for b in generate_video(&spec).unwrap() {
            let count = b.labels.data().iter().filter(|&&l| l == 2).count();
            assert_eq!(count, 24, "frame {}", b.index);
        }
    }

    #[test]
    fn flow_reconstructs_next_frame_outside_disocclusions() {
        for seed in 0..4 {
            let v = generate_video(&SceneSpec::benchmark(seed)).unwrap();
            for pair in v.windows(2) {
                let (prev, cur) = (&pair[0], &pair[1]);
                let e = reconstruction_error(
                    &cur.image,
                    &prev.image,
                    &prev.flow_to_next,
                    WarpConfig::default(),
                )
                .unwrap();
                for (p, &err) in e.data().iter().enumerate() {
                    if !cur.disoccluded[p] {
                        assert!(
                            err <= 1.0,
                            "seed {seed} frame {} pixel {p}: {err}",
                            cur.index
                        );
                    }
                }
                let warped =
                    warp_image(&prev.image, &prev.flow_to_next, WarpConfig::default()).unwrap();
                assert_eq!(warped.hw(), cur.image.hw());
            }
        }
    }

    #[test]
    fn labels_follow_flow_outside_disocclusions() {
        let v = generate_video(&SceneSpec::benchmark(5)).unwrap();
        let (h, w) = v[0].labels.hw();
        for pair in v.windows(2) {
            let (prev, cur) = (&pair[0], &pair[1]);
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    if cur.disoccluded[p] {
                        continue;
                    }
                    let (dx, dy) = prev.flow_to_next.at(y, x);
                    let sx = (x as f64 - dx).round().clamp(0.0, (w - 1) as f64) as usize;
                    let sy = (y as f64 - dy).round().clamp(0.0, (h - 1) as f64) as usize;
                    assert_eq!(prev.labels.get(sy, sx), cur.labels.get(y, x));
                }
            }
        }
    }

    #[test]
    fn label_schedule_skips_frames_and_voids_disocclusions() {
        let v = generate_video(&one_rect([3.0, 0.0], 4)).unwrap();
        let s = LabelSchedule {
            first: 1,
            every: 2,
            void_disoccluded: true,
        };
        assert!(s.labels(&v[0]).is_none() && s.labels(&v[2]).is_none());
        let l = s.labels(&v[1]).unwrap();
        let voided = l.data().iter().filter(|&&x| x == VOID_LABEL).count();
        assert!(voided > 0);
        assert_eq!(voided, v[1].disoccluded.iter().filter(|&&d| d).count());
        for (p, (&a, &b)) in l.data().iter().zip(v[1].labels.data()).enumerate() {
            assert!(a == b || v[1].disoccluded[p]);
        }
        assert_eq!(LabelSchedule::default().labels(&v[3]).unwrap(), v[3].labels);
    }

    #[test]
    fn margin_jitter_varies_frames() {
        let mut spec = one_rect([0.0, 0.0], 4);
        spec.frame_margin_jitter = 0.5;
        let v = generate_video(&spec).unwrap();
        assert_ne!(v[0].clean_logits, v[1].clean_logits);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = one_rect([0.0, 0.0], 3);
        s.objects[0].center = [1.0, 1.0];
        assert!(s.validate().is_err());
        let mut s = one_rect([0.0, 0.0], 3);
        s.objects[0].class = 3;
        assert!(s.validate().is_err());
        let mut s = one_rect([0.0, 0.0], 3);
        s.frames = 0;
        assert!(s.validate().is_err());
        let n = NoiseSpec {
            kind: NoiseKind::DropoutMask,
            scale: 1.0,
            boundary_boost: 0.0,
            boundary_width: 1,
            seed: 0,
        };
        assert!(n.validate().is_err());
    }

    fn softmax(z: &[f64]) -> Vec<f64> {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn zero_noise_is_clean_softmax() {
        let v = generate_video(&one_rect([0.0, 0.0], 1)).unwrap();
        let noise = NoiseSpec {
            kind: NoiseKind::GaussianLogit,
            scale: 0.0,
            boundary_boost: 0.0,
            boundary_width: 2,
            seed: 1,
        };
        let a = sample_segmenter(&v[0], &noise, 0);
        let b = sample_segmenter(&v[0], &noise, 17);
        assert_eq!(a, b);
        for (px, lg) in a.pixels().zip(v[0].clean_logits.data().chunks_exact(3)) {
            for (x, y) in px.iter().zip(softmax(lg)) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn same_key_same_output() {
        let v = generate_video(&SceneSpec::benchmark(2)).unwrap();
        let noise = NoiseSpec::benchmark(9);
        assert_eq!(
            sample_segmenter(&v[3], &noise, 4),
            sample_segmenter(&v[3], &noise, 4)
        );
        assert_ne!(
            sample_segmenter(&v[3], &noise, 4),
            sample_segmenter(&v[3], &noise, 5)
        );
        let dropout = NoiseSpec {
            kind: NoiseKind::DropoutMask,
            scale: 0.3,
            ..noise
        };
        assert_eq!(
            sample_segmenter(&v[3], &dropout, 4),
            sample_segmenter(&v[3], &dropout, 4)
        );
    }

    #[test]
    fn sampler_mean_matches_independent_monte_carlo() {
        // Single interior pixel with logits [0, 0, 4], unit gaussian logit noise.
        let logits = LogitMap::from_vec(1, 1, 3, vec![0.0, 0.0, 4.0]).unwrap();
        let noise = NoiseSpec {
            kind: NoiseKind::GaussianLogit,
            scale: 1.0,
            boundary_boost: 0.0,
            boundary_width: 0,
            seed: 21,
        };
        let n = 1000;
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|i| sample_logits(&logits, &noise, i).data().to_vec())
            .collect();

        // Independent oracle: Box-Muller on its own generator.
        let mut rng = ChaCha8Rng::seed_from_u64(0xabcdef);
        let oracle: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let z: Vec<f64> = [0.0, 0.0, 4.0]
                    .iter()
                    .map(|l| {
                        let u1: f64 = 1.0 - rng.random::<f64>();
                        let u2: f64 = rng.random();
                        l + (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                    })
                    .collect();
                softmax(&z)
            })
            .collect();

        for k in 0..3 {
            let stats = |xs: &[Vec<f64>]| {
                let m = xs.iter().map(|x| x[k]).sum::<f64>() / n as f64;
                let v = xs.iter().map(|x| (x[k] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                (m, v / n as f64)
            };
            let (ma, va) = stats(&samples);
            let (mb, vb) = stats(&oracle);
            let se = (va + vb).sqrt();
            assert!(
                (ma - mb).abs() <= 3.0 * se,
                "class {k}: {ma} vs {mb} (se {se})"
            );
        }
    }

    #[test]
    fn boundary_boost_concentrates_noise_on_edges() {
        let v = generate_video(&one_rect([0.0, 0.0], 1)).unwrap();
        let noise = NoiseSpec {
            kind: NoiseKind::GaussianLogit,
            scale: 0.2,
            boundary_boost: 3.0,
            boundary_width: 1,
            seed: 4,
        };
        let mask = boundary_mask(v[0].labels.data(), 16, 24, 1);
        let model = SynthSegmenter { frames: &v, noise };
        let m = aggregator::mc_predict(&model, 0, 50).unwrap();
        let ent = crate::uncertainty::entropy(&m.prediction);
        let mut edge = (0.0, 0);
        let mut inner = (0.0, 0);
        for (p, &e) in ent.data().iter().enumerate() {
            let acc = if mask[p] { &mut edge } else { &mut inner };
            acc.0 += e;
            acc.1 += 1;
        }
        let (e, i) = (edge.0 / edge.1 as f64, inner.0 / inner.1 as f64);
        assert!(e > 2.0 * i, "edge {e} inner {i}");
    }

    #[test]
    fn corrupt_flow_cases() {
        let f = FlowField::constant(8, 8, 1.0, -1.0).unwrap();
        let full = Rect {
            x: 0,
            y: 0,
            width: 8,
            height: 8,
        };
        assert_eq!(corrupt_flow(&f, full, 0.0, 1).unwrap(), f);
        let g = corrupt_flow(&f, full, 5.0, 1).unwrap();
        assert!(g
            .data()
            .iter()
            .zip(f.data())
            .all(|(a, b)| (a - b).abs() <= 5.0));
        assert_ne!(g, f);
        let part = Rect {
            x: 2,
            y: 2,
            width: 3,
            height: 3,
        };
        let g = corrupt_flow(&f, part, 5.0, 1).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let inside = (2..5).contains(&x) && (2..5).contains(&y);
                assert_eq!(g.at(y, x) == f.at(y, x), !inside);
            }
        }
        let oob = Rect {
            x: 6,
            y: 0,
            width: 3,
            height: 1,
        };
        assert!(matches!(
            corrupt_flow(&f, oob, 1.0, 1),
            Err(SynthError::RegionOutOfBounds(_))
        ));
    }

    #[test]
    fn corrupted_flow_crosses_rta_threshold() {
        let v = generate_video(&one_rect([2.0, 0.0], 3)).unwrap();
        let (prev, cur) = (&v[0], &v[1]);
        let region = Rect {
            x: 2,
            y: 4,
            width: 14,
            height: 8,
        };
        let bad = corrupt_flow(&prev.flow_to_next, region, 6.0, 7).unwrap();
        let clean = reconstruction_error(
            &cur.image,
            &prev.image,
            &prev.flow_to_next,
            WarpConfig::default(),
        )
        .unwrap();
        let e = reconstruction_error(&cur.image, &prev.image, &bad, WarpConfig::default()).unwrap();
        let above = e.data().iter().filter(|&&v| v > 10.0).count();
        assert!(above > 10, "only {above} pixels above threshold");
        assert!(e.data().iter().sum::<f64>() > clean.data().iter().sum::<f64>());
    }
}
