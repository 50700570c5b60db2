//! Bilinear image sampling, eager and as tape kernels.
//!
//! Coordinate convention: `(0, 0)` is the center of the top-left pixel, `x`
//! runs along columns (width `w`), `y` along rows (height `h`). A sample is
//! valid iff `0 <= x <= w-1` and `0 <= y <= h-1`; invalid samples produce
//! value 0 and must be masked by the caller — out-of-bounds positions never
//! fabricate values or gradients.

use super::tensor::DTensor;
use super::TapeError;

/// Interpolation cell and weights for one sample. `None` if out of bounds.
#[inline]
fn cell(x: f64, y: f64, w: usize, h: usize) -> Option<(usize, usize, f64, f64)> {
    if !(x >= 0.0 && x <= (w - 1) as f64 && y >= 0.0 && y <= (h - 1) as f64) {
        return None;
    }
    // Clamp the cell index so x == w-1 lands in the last cell with fx == 1.
    let ix = (x.floor() as usize).min(w.saturating_sub(2));
    let iy = (y.floor() as usize).min(h.saturating_sub(2));
    Some((ix, iy, x - ix as f64, y - iy as f64))
}

pub(crate) fn bilinear_forward(image: &DTensor, coords: &DTensor) -> DTensor {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let m = coords.shape()[0];
    let img = image.data();
    let co = coords.data();
    let mut out = vec![0.0; m * c];
    for s in 0..m {
        let (x, y) = (co[2 * s], co[2 * s + 1]);
        let Some((ix, iy, fx, fy)) = cell(x, y, w, h) else { continue };
        let (w00, w10, w01, w11) = ((1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy);
        let base00 = (iy * w + ix) * c;
        let base10 = (iy * w + ix + 1) * c;
        let base01 = ((iy + 1) * w + ix) * c;
        let base11 = ((iy + 1) * w + ix + 1) * c;
        for ch in 0..c {
            out[s * c + ch] =
                w00 * img[base00 + ch] + w10 * img[base10 + ch] + w01 * img[base01 + ch] + w11 * img[base11 + ch];
        }
    }
    DTensor::from_parts(vec![m, c], out)
}

/// Gradients w.r.t. image (scatter of the four weights) and coords (the
/// interpolant's in-cell slope). Invalid samples contribute nothing.
pub(crate) fn bilinear_backward(image: &DTensor, coords: &DTensor, dz: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let m = coords.shape()[0];
    let img = image.data();
    let co = coords.data();
    let mut gi = vec![0.0; img.len()];
    let mut gc = vec![0.0; m * 2];
    for s in 0..m {
        let (x, y) = (co[2 * s], co[2 * s + 1]);
        let Some((ix, iy, fx, fy)) = cell(x, y, w, h) else { continue };
        let base00 = (iy * w + ix) * c;
        let base10 = (iy * w + ix + 1) * c;
        let base01 = ((iy + 1) * w + ix) * c;
        let base11 = ((iy + 1) * w + ix + 1) * c;
        let (w00, w10, w01, w11) = ((1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy);
        let (mut gx, mut gy) = (0.0, 0.0);
        for ch in 0..c {
            let d = dz[s * c + ch];
            gi[base00 + ch] += d * w00;
            gi[base10 + ch] += d * w10;
            gi[base01 + ch] += d * w01;
            gi[base11 + ch] += d * w11;
            let v00 = img[base00 + ch];
            let v10 = img[base10 + ch];
            let v01 = img[base01 + ch];
            let v11 = img[base11 + ch];
            gx += d * ((1.0 - fy) * (v10 - v00) + fy * (v11 - v01));
            gy += d * ((1.0 - fx) * (v01 - v00) + fx * (v11 - v10));
        }
        gc[2 * s] = gx;
        gc[2 * s + 1] = gy;
    }
    (gi, gc)
}

/// 0/1 validity per sample, replicated across channels to `[m, c]`.
/// With `z` supplied, a sample additionally requires `z > z_min`.
pub(crate) fn sample_mask_forward(image: &DTensor, coords: &DTensor, z: Option<&DTensor>, z_min: f64) -> DTensor {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let m = coords.shape()[0];
    let co = coords.data();
    let mut out = vec![0.0; m * c];
    for s in 0..m {
        let (x, y) = (co[2 * s], co[2 * s + 1]);
        let mut ok = cell(x, y, w, h).is_some();
        if let Some(z) = z {
            ok &= z.data()[s] > z_min;
        }
        if ok {
            for ch in 0..c {
                out[s * c + ch] = 1.0;
            }
        }
    }
    DTensor::from_parts(vec![m, c], out)
}

/// Eager bilinear sampling of `image` (`[h, w, c]`) at `coords` (`[m, 2]`).
/// Returns the `[m, c]` sampled values (zero where invalid) and one validity
/// flag per sample.
pub fn bilinear_sample(image: &DTensor, coords: &DTensor) -> Result<(DTensor, Vec<bool>), TapeError> {
    if image.shape().len() != 3 || image.shape().iter().any(|&d| d == 0) {
        return Err(TapeError::EmptyImage);
    }
    if coords.shape().len() != 2 || coords.shape()[1] != 2 {
        return Err(TapeError::ShapeMismatch(format!(
            "coords must be [m, 2], got {:?}",
            coords.shape()
        )));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let values = bilinear_forward(image, coords);
    let valid = coords
        .data()
        .chunks_exact(2)
        .map(|p| cell(p[0], p[1], w, h).is_some())
        .collect();
    Ok((values, valid))
}
