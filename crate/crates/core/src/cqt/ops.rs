//! Frequency-axis utilities on real magnitude tensors.
//!
//! All functions treat the last axis as the log-frequency (bin) axis.

use ndarray::{Array, Array3, Array4, Axis, Dimension, Slice};

use crate::error::{invalid, Result};
use crate::scalar::Real;

/// Moves content `s` bins up the frequency axis (down for negative `s`),
/// zero-filling the vacated bins.
pub fn shift_bins<T: Real, D: Dimension>(mag: &Array<T, D>, s: isize) -> Array<T, D> {
    let axis = Axis(mag.ndim() - 1);
    let n = mag.len_of(axis) as isize;
    let mut out = Array::<T, D>::zeros(mag.raw_dim());
    if s.abs() >= n {
        return out;
    }
    let (src, dst) = if s >= 0 {
        (Slice::from(0..(n - s)), Slice::from(s..n))
    } else {
        (Slice::from(-s..n), Slice::from(0..(n + s)))
    };
    out.slice_axis_mut(axis, dst).assign(&mag.slice_axis(axis, src));
    out
}

/// Bin offset of harmonic `h`: `floor(log2(h) * bpo)`.
pub fn harmonic_shift(h: u32, bpo: usize) -> usize {
    // The epsilon keeps exact powers of two from landing just below an integer.
    ((h as f64).log2() * bpo as f64 + 1e-9).floor() as usize
}

/// Stacks frequency-shifted copies so that bin `k` of layer `i` holds the
/// value found at harmonic `harmonics[i]` of bin `k`.
///
/// Output shape is `harmonics x (input shape)`.
pub fn harmonic_stack<T: Real>(mag: &Array3<T>, harmonics: &[u32], bpo: usize) -> Result<Array4<T>> {
    if harmonics.is_empty() {
        return Err(invalid("harmonic list is empty"));
    }
    if harmonics.contains(&0) {
        return Err(invalid("harmonic numbers start at 1"));
    }
    let (c, f, b) = mag.dim();
    let mut out = Array4::<T>::zeros((harmonics.len(), c, f, b));
    for (layer, &h) in harmonics.iter().enumerate() {
        let s = harmonic_shift(h, bpo) as isize;
        out.index_axis_mut(Axis(0), layer).assign(&shift_bins(mag, -s));
    }
    Ok(out)
}

/// Moving average over frames (axis 1) with a `window_frames`-long box,
/// keeping only fully covered positions.
pub fn avg_pool_time<T: Real>(mag: &Array3<T>, window_frames: usize) -> Result<Array3<T>> {
    let (c, f, b) = mag.dim();
    if window_frames == 0 {
        return Err(invalid("window_frames must be at least 1"));
    }
    if window_frames > f {
        return Err(invalid(format!("window of {window_frames} frames exceeds {f} available")));
    }
    let n_out = f - window_frames + 1;
    let scale = T::one() / T::from_usize_lossy(window_frames);
    let mut out = Array3::<T>::zeros((c, n_out, b));
    for ch in 0..c {
        for k in 0..b {
            let col = mag.slice(ndarray::s![ch, .., k]);
            let mut acc: T = col.iter().take(window_frames).copied().sum();
            out[[ch, 0, k]] = acc * scale;
            for j in 1..n_out {
                acc += col[j + window_frames - 1] - col[j - 1];
                out[[ch, j, k]] = acc * scale;
            }
        }
    }
    Ok(out)
}
