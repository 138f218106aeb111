//! Resampling of per-pixel grids along an optical flow field, and the
//! photometric reconstruction error used to gate aggregation.
//!
//! The flow passed to every function here is the forward flow from the
//! previous frame to the current one, `F(t-1 -> t)`. In backward mode the
//! output pixel `(x, y)` pulls from `(x - dx, y - dy)` in the source grid,
//! with `(dx, dy)` read at the output pixel.

use serde::{Deserialize, Serialize};

use crate::tensor::{
    normalize_pixels, same_hw, ClassTensor, FlowField, ImageFrame, ProbMap, Result, ScalarMap,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarpMode {
    #[default]
    BackwardBilinear,
    ForwardSplat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Border {
    /// Out-of-frame samples replicate the nearest edge pixel.
    #[default]
    Clamp,
    /// Out-of-frame samples read as zero.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WarpConfig {
    #[serde(default)]
    pub mode: WarpMode,
    #[serde(default)]
    pub border: Border,
}

/// Flat index of a neighbor, or `None` when it reads as zero.
#[inline]
fn neighbor(ix: i64, iy: i64, w: usize, h: usize, border: Border) -> Option<usize> {
    let (wi, hi) = (w as i64, h as i64);
    match border {
        Border::Clamp => {
            let cx = ix.clamp(0, wi - 1) as usize;
            let cy = iy.clamp(0, hi - 1) as usize;
            Some(cy * w + cx)
        }
        Border::Zero => {
            if ix < 0 || iy < 0 || ix >= wi || iy >= hi {
                None
            } else {
                Some(iy as usize * w + ix as usize)
            }
        }
    }
}

/// Bilinear sample of an `h x w x ch` grid at real position `(sx, sy)`.
#[inline]
fn sample_bilinear(
    src: &[f64],
    (h, w, ch): (usize, usize, usize),
    sx: f64,
    sy: f64,
    border: Border,
    out: &mut [f64],
) {
    let x0f = sx.floor();
    let y0f = sy.floor();
    let fx = sx - x0f;
    let fy = sy - y0f;
    let x0 = x0f as i64;
    let y0 = y0f as i64;
    let x1 = x0.saturating_add(1);
    let y1 = y0.saturating_add(1);

    let w00 = (1.0 - fx) * (1.0 - fy);
    let w10 = fx * (1.0 - fy);
    let w01 = (1.0 - fx) * fy;
    let w11 = fx * fy;

    let n00 = neighbor(x0, y0, w, h, border);
    let n10 = neighbor(x1, y0, w, h, border);
    let n01 = neighbor(x0, y1, w, h, border);
    let n11 = neighbor(x1, y1, w, h, border);
    let fetch = |n: Option<usize>, c: usize| n.map_or(0.0, |i| src[i * ch + c]);

    for (c, o) in out.iter_mut().enumerate() {
        *o = w00 * fetch(n00, c) + w10 * fetch(n10, c) + w01 * fetch(n01, c) + w11 * fetch(n11, c);
    }
}

fn backward(
    src: &[f64],
    dims: (usize, usize, usize),
    flow: &FlowField,
    border: Border,
) -> Vec<f64> {
    let (h, w, ch) = dims;
    let mut out = vec![0.0; h * w * ch];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.at(y, x);
            let i = (y * w + x) * ch;
            sample_bilinear(
                src,
                dims,
                x as f64 - dx,
                y as f64 - dy,
                border,
                &mut out[i..i + ch],
            );
        }
    }
    out
}

/// Pixels receiving less total splat weight than this are holes.
const SPLAT_HOLE_WEIGHT: f64 = 1e-9;

fn forward_splat(
    src: &[f64],
    dims: (usize, usize, usize),
    flow: &FlowField,
    border: Border,
) -> Vec<f64> {
    let (h, w, ch) = dims;
    let mut acc = vec![0.0; h * w * ch];
    let mut weight = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.at(y, x);
            let tx = x as f64 + dx;
            let ty = y as f64 + dy;
            let (x0f, y0f) = (tx.floor(), ty.floor());
            let (fx, fy) = (tx - x0f, ty - y0f);
            let (x0, y0) = (x0f as i64, y0f as i64);
            let targets = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0.saturating_add(1), y0, fx * (1.0 - fy)),
                (x0, y0.saturating_add(1), (1.0 - fx) * fy),
                (x0.saturating_add(1), y0.saturating_add(1), fx * fy),
            ];
            let s = (y * w + x) * ch;
            for (ix, iy, wt) in targets {
                // Mass that leaves the frame is dropped in both border modes.
                if wt == 0.0 || ix < 0 || iy < 0 || ix >= w as i64 || iy >= h as i64 {
                    continue;
                }
                let t = iy as usize * w + ix as usize;
                weight[t] += wt;
                for c in 0..ch {
                    acc[t * ch + c] += wt * src[s + c];
                }
            }
        }
    }
    for p in 0..h * w {
        let px = &mut acc[p * ch..(p + 1) * ch];
        if weight[p] > SPLAT_HOLE_WEIGHT {
            px.iter_mut().for_each(|v| *v /= weight[p]);
        } else {
            match border {
                Border::Clamp => px.copy_from_slice(&src[p * ch..(p + 1) * ch]),
                Border::Zero => px.iter_mut().for_each(|v| *v = 0.0),
            }
        }
    }
    acc
}

fn warp_raw(
    src: &[f64],
    dims: (usize, usize, usize),
    flow: &FlowField,
    cfg: WarpConfig,
) -> Vec<f64> {
    match cfg.mode {
        WarpMode::BackwardBilinear => backward(src, dims, flow, cfg.border),
        WarpMode::ForwardSplat => forward_splat(src, dims, flow, cfg.border),
    }
}

/// Warps a probability map and renormalizes every pixel. A pixel whose
/// samples all fell outside the frame (zero-fill border) becomes uniform.
pub fn warp_prob(p: &ProbMap, flow: &FlowField, cfg: WarpConfig) -> Result<ProbMap> {
    same_hw(p.hw(), flow.hw(), p.classes(), 2)?;
    let (h, w, c) = (p.height(), p.width(), p.classes());
    let mut raw = warp_raw(p.data(), (h, w, c), flow, cfg);
    for px in raw.chunks_exact_mut(c) {
        if !(px.iter().sum::<f64>() > 0.0) {
            px.iter_mut().for_each(|v| *v = 1.0 / c as f64);
        }
    }
    let data = normalize_pixels(&raw, w, c)?;
    Ok(ProbMap::from_raw(h, w, c, data))
}

pub fn warp_scalar(m: &ScalarMap, flow: &FlowField, cfg: WarpConfig) -> Result<ScalarMap> {
    same_hw(m.hw(), flow.hw(), 1, 2)?;
    let (h, w) = m.hw();
    Ok(ScalarMap::from_raw(
        h,
        w,
        warp_raw(m.data(), (h, w, 1), flow, cfg),
    ))
}

pub fn warp_class_tensor(
    t: &ClassTensor,
    flow: &FlowField,
    cfg: WarpConfig,
) -> Result<ClassTensor> {
    same_hw(t.hw(), flow.hw(), t.classes(), 2)?;
    let (h, w, c) = (t.height(), t.width(), t.classes());
    Ok(ClassTensor::from_raw(
        h,
        w,
        c,
        warp_raw(t.data(), (h, w, c), flow, cfg),
    ))
}

/// Same sampling as [`warp_prob`] without renormalization; intensities are
/// clamped to `[0, 255]`.
pub fn warp_image(img: &ImageFrame, flow: &FlowField, cfg: WarpConfig) -> Result<ImageFrame> {
    same_hw(img.hw(), flow.hw(), img.channels(), 2)?;
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut data = warp_raw(img.data(), (h, w, ch), flow, cfg);
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 255.0));
    Ok(ImageFrame::from_raw(h, w, ch, data))
}

/// Per-pixel `|I_t - W(I_prev, F)|`, averaged over channels. Values lie in
/// `[0, 255]`.
pub fn reconstruction_error(
    current: &ImageFrame,
    previous: &ImageFrame,
    flow: &FlowField,
    cfg: WarpConfig,
) -> Result<ScalarMap> {
    same_hw(
        current.hw(),
        previous.hw(),
        current.channels(),
        previous.channels(),
    )?;
    if current.channels() != previous.channels() {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            left: (current.height(), current.width(), current.channels()),
            right: (previous.height(), previous.width(), previous.channels()),
        });
    }
    let warped = warp_image(previous, flow, cfg)?;
    let ch = current.channels();
    let data = current
        .data()
        .chunks_exact(ch)
        .zip(warped.data().chunks_exact(ch))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / ch as f64)
        .collect();
    let (h, w) = current.hw();
    Ok(ScalarMap::from_raw(h, w, data))
}
