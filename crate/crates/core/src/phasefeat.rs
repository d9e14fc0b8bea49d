//! Phase-alignment features.
//!
//! Alignment values compare the phases of two periodicities and fold the
//! difference into `[0, π]`: 0 means the components peak together, π means
//! they are in antiphase. Feature maps interleave these rows with scaled
//! magnitudes so a convolution across rows sees both.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::cqt::{harmonic_shift, Rhythmogram};
use crate::error::{invalid, Error, Result};
use crate::scalar::{wrap_angle, Real};

/// Default integer multiples for [`build_featuremap_multiples`].
pub const DEFAULT_MULTIPLES: [u32; 5] = [2, 3, 4, 6, 8];

fn check_finite<T: Real>(values: &[T]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("phase"))
    }
}

fn fold<T: Real>(c: T) -> T {
    if c < T::PI() {
        c
    } else {
        T::two_pi() - c
    }
}

/// Folded phase difference of two components of the same frequency.
pub fn phase_alignment<T: Real>(phi_a: T, phi_b: T) -> Result<T> {
    check_finite(&[phi_a, phi_b])?;
    Ok(fold((wrap_angle(phi_a) - wrap_angle(phi_b)).abs()))
}

/// Alignment of a component at `freq_ratio` times the frequency of another.
///
/// Both phasors are rewound until the slower one reaches phase 0; the result
/// is the folded phase of the faster one at that instant. This does not depend
/// on where in the rhythm the frame sits.
pub fn phase_alignment_multiple<T: Real>(phi_1: T, phi_m: T, freq_ratio: T) -> Result<T> {
    check_finite(&[phi_1, phi_m, freq_ratio])?;
    if freq_ratio < T::one() {
        return Err(invalid(format!("frequency ratio {freq_ratio} is below 1")));
    }
    Ok(fold(wrap_angle(phi_m - phi_1 * freq_ratio)))
}

fn check_freq<T: Real>(phi: T, f: T) -> Result<()> {
    check_finite(&[phi, f])?;
    if f > T::zero() {
        Ok(())
    } else {
        Err(invalid(format!("frequency must be positive, got {f}")))
    }
}

/// Seconds since the last peak of a component with centered phase `phi`.
pub fn time_to_prev_peak<T: Real>(phi: T, f: T) -> Result<T> {
    check_freq(phi, f)?;
    Ok(wrap_angle(phi) / (T::two_pi() * f))
}

/// Seconds until the next peak. At `phi = 0` the frame sits on a peak and the
/// next one is a full period away.
pub fn time_to_next_peak<T: Real>(phi: T, f: T) -> Result<T> {
    check_freq(phi, f)?;
    Ok((T::two_pi() - wrap_angle(phi)) / (T::two_pi() * f))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "harmonic")]
pub enum RowKind {
    Magnitude,
    NeighborAlignment,
    MultipleAlignment(u32),
}

/// Scaling applied to each row kind when the map was built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleInfo {
    /// Magnitude rows hold `|c| * magnitude_scale`.
    pub magnitude_scale: f64,
    /// Alignment rows are stored in radians unscaled.
    pub alignment_scale: f64,
}

/// Interleaved magnitude and alignment rows, `rows x frames x bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Array3<T>,
    pub row_kind: Vec<RowKind>,
    /// Rows contributed by each source channel.
    pub channel_stride: usize,
    pub scale_info: ScaleInfo,
    pub bins_per_octave: usize,
    pub frame_times: Vec<f64>,
    pub bin_freqs: Vec<f64>,
}

impl<T: Real> FeatureMap<T> {
    pub fn n_rows(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn n_frames(&self) -> usize {
        self.data.len_of(Axis(1))
    }

    pub fn n_bins(&self) -> usize {
        self.data.len_of(Axis(2))
    }

    /// Number of leading bins that hold real values in `row`. Multiple
    /// alignment rows lose the top bins, whose partner is off the grid; those
    /// slots are stored as 0.
    pub fn valid_bins(&self, row: usize) -> usize {
        match self.row_kind[row] {
            RowKind::MultipleAlignment(h) => self.n_bins().saturating_sub(harmonic_shift(h, self.bins_per_octave)),
            _ => self.n_bins(),
        }
    }

    /// Validity mask over `rows x bins`.
    pub fn mask(&self) -> Array2<bool> {
        Array2::from_shape_fn((self.n_rows(), self.n_bins()), |(r, b)| b < self.valid_bins(r))
    }

    pub fn validate(&self) -> Result<()> {
        if self.row_kind.len() != self.n_rows()
            || self.frame_times.len() != self.n_frames()
            || self.bin_freqs.len() != self.n_bins()
        {
            return Err(Error::Shape("feature map axes disagree with data shape".into()));
        }
        if self.channel_stride == 0 || !self.n_rows().is_multiple_of(self.channel_stride) {
            return Err(Error::Shape(format!(
                "{} rows do not divide into channels of {}",
                self.n_rows(),
                self.channel_stride
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map"));
        }
        for (r, kind) in self.row_kind.iter().enumerate() {
            let row = self.data.index_axis(Axis(0), r);
            let ok = match kind {
                RowKind::Magnitude => row.iter().all(|&v| v >= T::zero()),
                _ => row.iter().all(|&v| v >= T::zero() && v <= T::PI()),
            };
            if !ok {
                return Err(invalid(format!("row {r} ({kind:?}) is out of range")));
            }
        }
        Ok(())
    }
}

/// Options shared by the feature-map builders.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FeatureOptions {
    /// When set, alignment values are zeroed wherever either compared
    /// component falls below this fraction of the largest magnitude.
    pub alignment_mask_threshold: Option<f64>,
}

struct Prepared<T> {
    mags: Array3<T>,
    phases: Array3<T>,
    scale: T,
    floor: Option<T>,
}

fn prepare<T: Real>(rg: &Rhythmogram<T>, opts: &FeatureOptions) -> Result<Prepared<T>> {
    rg.validate()?;
    let mags = rg.magnitudes();
    let phases = rg.phases();
    let peak = mags.iter().copied().fold(T::zero(), T::max);
    let scale = if peak > T::zero() { T::PI() / peak } else { T::one() };
    let floor = opts.alignment_mask_threshold.map(|t| T::lit(t) * peak);
    Ok(Prepared { mags, phases, scale, floor })
}

impl<T: Real> Prepared<T> {
    fn gated(&self, value: T, a: (usize, usize, usize), b: (usize, usize, usize)) -> T {
        match self.floor {
            Some(fl) if self.mags[a] < fl || self.mags[b] < fl => T::zero(),
            _ => value,
        }
    }

    fn fill_pair(&self, out: &mut Array3<T>, row: usize, ch: usize, neighbor: usize) {
        let (_, frames, bins) = self.mags.dim();
        for j in 0..frames {
            for k in 0..bins {
                out[[row, j, k]] = self.mags[[ch, j, k]] * self.scale;
                let a = (ch, j, k);
                let b = (neighbor, j, k);
                let x = fold((wrap_angle(self.phases[a]) - wrap_angle(self.phases[b])).abs());
                out[[row + 1, j, k]] = self.gated(x, a, b);
            }
        }
    }
}

fn scale_info<T: Real>(p: &Prepared<T>) -> ScaleInfo {
    ScaleInfo { magnitude_scale: p.scale.to_f64_lossy(), alignment_scale: 1.0 }
}

/// Rows alternate magnitude of channel `i` and its alignment with channel
/// `i + 1` (the last channel is compared with the first).
pub fn build_featuremap_neighbor<T: Real>(rg: &Rhythmogram<T>) -> Result<FeatureMap<T>> {
    build_featuremap_neighbor_with(rg, &FeatureOptions::default())
}

pub fn build_featuremap_neighbor_with<T: Real>(rg: &Rhythmogram<T>, opts: &FeatureOptions) -> Result<FeatureMap<T>> {
    let c = rg.n_channels();
    if c < 2 {
        return Err(invalid(format!("neighbor alignment needs at least 2 channels, got {c}")));
    }
    let p = prepare(rg, opts)?;
    let mut data = Array3::zeros((2 * c, rg.n_frames(), rg.n_bins()));
    let mut row_kind = Vec::with_capacity(2 * c);
    for ch in 0..c {
        p.fill_pair(&mut data, 2 * ch, ch, (ch + 1) % c);
        row_kind.extend([RowKind::Magnitude, RowKind::NeighborAlignment]);
    }
    Ok(FeatureMap {
        data,
        row_kind,
        channel_stride: 2,
        scale_info: scale_info(&p),
        bins_per_octave: rg.config.bins_per_octave,
        frame_times: rg.frame_times.clone(),
        bin_freqs: rg.bin_freqs.clone(),
    })
}

/// Per channel: magnitude, neighbor alignment, then the alignment of each bin
/// with its own channel at every multiple in `multiples`.
pub fn build_featuremap_multiples<T: Real>(rg: &Rhythmogram<T>, multiples: &[u32]) -> Result<FeatureMap<T>> {
    build_featuremap_multiples_with(rg, multiples, &FeatureOptions::default())
}

pub fn build_featuremap_multiples_with<T: Real>(
    rg: &Rhythmogram<T>,
    multiples: &[u32],
    opts: &FeatureOptions,
) -> Result<FeatureMap<T>> {
    if multiples.is_empty() {
        return Err(invalid("multiples list is empty"));
    }
    if let Some(&h) = multiples.iter().find(|&&h| h < 2) {
        return Err(invalid(format!("multiple {h} is not above 1")));
    }
    let c = rg.n_channels();
    if c == 0 {
        return Err(invalid("rhythmogram has no channels"));
    }
    let p = prepare(rg, opts)?;
    let (frames, bins) = (rg.n_frames(), rg.n_bins());
    let bpo = rg.config.bins_per_octave;
    let stride = 2 + multiples.len();
    let mut data = Array3::zeros((c * stride, frames, bins));
    let mut row_kind = Vec::with_capacity(c * stride);
    for ch in 0..c {
        let base = ch * stride;
        p.fill_pair(&mut data, base, ch, (ch + 1) % c);
        row_kind.extend([RowKind::Magnitude, RowKind::NeighborAlignment]);
        for (i, &h) in multiples.iter().enumerate() {
            let s = harmonic_shift(h, bpo);
            let ratio = T::lit(h as f64);
            let row = base + 2 + i;
            for j in 0..frames {
                for k in 0..bins.saturating_sub(s) {
                    let a = (ch, j, k);
                    let b = (ch, j, k + s);
                    let x = fold(wrap_angle(p.phases[b] - p.phases[a] * ratio));
                    data[[row, j, k]] = p.gated(x, a, b);
                }
            }
            row_kind.push(RowKind::MultipleAlignment(h));
        }
    }
    Ok(FeatureMap {
        data,
        row_kind,
        channel_stride: stride,
        scale_info: scale_info(&p),
        bins_per_octave: bpo,
        frame_times: rg.frame_times.clone(),
        bin_freqs: rg.bin_freqs.clone(),
    })
}
