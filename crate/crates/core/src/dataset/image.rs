//! 2D image embedding of feature vectors for convolutional classifiers.
//!
//! A sample's feature vector `v` is lifted to a square matrix (outer product
//! `v v^T` by default, row tiling as an alternative), bicubic-resized to the
//! network's input side, and placed in channel 0 of a 3-channel tensor whose
//! remaining channels are zero-valued.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a feature vector becomes a square matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedKind {
    /// `M[i][j] = v[i] * v[j]` — preserves all pairwise feature interactions.
    OuterProduct,
    /// `M[i][j] = v[j]` — every row repeats the vector.
    Tile,
}

impl Default for EmbedKind {
    fn default() -> Self {
        EmbedKind::OuterProduct
    }
}

/// A 3-channel square image tensor in channel-major (CHW) layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    /// `3 * height * width` values; channels 1 and 2 are identically zero.
    pub data: Vec<f64>,
    pub source_sample_id: u64,
}

impl ImageTensor {
    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }
}

/// Catmull-Rom cubic interpolation of four consecutive taps at fractional
/// offset `t` in `[0, 1)` between `p1` and `p2`.
#[inline]
fn catmull_rom(p0: f64, p1: f64, p2: f64, p3: f64, t: f64) -> f64 {
    0.5 * ((2.0 * p1)
        + (p2 - p0) * t
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t * t
        + (3.0 * p1 - p0 - 3.0 * p2 + p3) * t * t * t)
}

/// Samples a 1D signal at real coordinate `x` with Catmull-Rom taps.
/// Out-of-range taps are linearly extrapolated from the boundary pair, which
/// keeps the kernel exact on affine signals all the way to the edges.
fn sample_line(line: &[f64], x: f64) -> f64 {
    let n = line.len();
    if n == 1 {
        return line[0];
    }
    let i0 = x.floor();
    let t = x - i0;
    let i0 = i0 as isize;
    let get = |i: isize| -> f64 {
        if i < 0 {
            let m = (-i) as f64;
            (1.0 + m) * line[0] - m * line[1]
        } else if (i as usize) >= n {
            let m = (i as usize - (n - 1)) as f64;
            (1.0 + m) * line[n - 1] - m * line[n - 2]
        } else {
            line[i as usize]
        }
    };
    catmull_rom(get(i0 - 1), get(i0), get(i0 + 1), get(i0 + 2), t)
}

/// Destination-to-source coordinate map. Corners map onto corners, so
/// endpoint values are preserved exactly; a single-pixel output samples the
/// source center.
#[inline]
fn src_coord(dst: usize, dst_len: usize, src_len: usize) -> f64 {
    if dst_len <= 1 {
        (src_len as f64 - 1.0) / 2.0
    } else {
        dst as f64 * (src_len as f64 - 1.0) / (dst_len as f64 - 1.0)
    }
}

/// Separable Catmull-Rom bicubic resize of a single `h x w` plane (row-major)
/// to `out_h x out_w`.
pub fn bicubic_resize(
    src: &[f64],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f64>> {
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid("image dimensions must be positive"));
    }
    if src.len() != h * w {
        return Err(Error::invalid(format!(
            "plane length {} does not match {h}x{w}",
            src.len()
        )));
    }
    // Horizontal pass: h x out_w.
    let mut mid = vec![0.0; h * out_w];
    let mut row = vec![0.0; w];
    for y in 0..h {
        row.copy_from_slice(&src[y * w..(y + 1) * w]);
        for x in 0..out_w {
            mid[y * out_w + x] = sample_line(&row, src_coord(x, out_w, w));
        }
    }
    // Vertical pass: out_h x out_w.
    let mut out = vec![0.0; out_h * out_w];
    let mut col = vec![0.0; h];
    for x in 0..out_w {
        for y in 0..h {
            col[y] = mid[y * out_w + x];
        }
        for y in 0..out_h {
            out[y * out_w + x] = sample_line(&col, src_coord(y, out_h, h));
        }
    }
    Ok(out)
}

/// Lifts a feature vector to a square matrix of side `v.len()`.
pub fn embed_matrix(v: &[f64], kind: EmbedKind) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("cannot embed an empty feature vector"));
    }
    let n = v.len();
    let mut m = vec![0.0; n * n];
    match kind {
        EmbedKind::OuterProduct => {
            for i in 0..n {
                for j in 0..n {
                    m[i * n + j] = v[i] * v[j];
                }
            }
        }
        EmbedKind::Tile => {
            for i in 0..n {
                m[i * n..(i + 1) * n].copy_from_slice(v);
            }
        }
    }
    Ok(m)
}

/// Expands a feature vector into a `target x target x 3` image tensor:
/// embedding matrix, bicubic resize, result in channel 0, channels 1-2 zero.
pub fn expand_features_to_image(
    features: &[f64],
    sample_id: u64,
    target: usize,
    kind: EmbedKind,
) -> Result<ImageTensor> {
    if target < 4 {
        return Err(Error::invalid("target image side must be at least 4"));
    }
    let side = features.len();
    let matrix = embed_matrix(features, kind)?;
    let plane = bicubic_resize(&matrix, side, side, target, target)?;
    let hw = target * target;
    let mut data = vec![0.0; 3 * hw];
    data[..hw].copy_from_slice(&plane);
    Ok(ImageTensor {
        height: target,
        width: target,
        data,
        source_sample_id: sample_id,
    })
}
