//! Constant-Q analysis of activation channels.
//!
//! Each channel becomes a rhythmogram: complex coefficients over frames and
//! log-spaced periodicity bins. The transform uses a sparse frequency-domain
//! kernel (Brown & Puckette) with atoms centered on the frame, so a pulse train
//! peaking at a frame center has phase 0 at its fundamental bin.

mod kernel;
mod ops;

pub use kernel::{analyze_real, forward, inverse, inverse_regularized, plan, default_regularization, CqtKernel};
pub use ops::{avg_pool_time, harmonic_shift, harmonic_stack, shift_bins};

use ndarray::{Array3, Axis};
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    Hann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CqtConfig {
    pub f_min: f64,
    pub f_max: f64,
    pub bins_per_octave: usize,
    pub signal_rate_hz: f64,
    pub hop_frames: usize,
    /// Bandwidth offset in units of `f_min`. Zero gives a constant-Q
    /// transform; larger values shorten the low-frequency windows.
    pub tf_tradeoff: f64,
    /// Window length in cycles of the bin frequency.
    pub q_cycles: f64,
    pub window: Window,
}

impl Default for CqtConfig {
    fn default() -> Self {
        Self {
            f_min: 0.5,
            f_max: 16.0,
            bins_per_octave: 24,
            signal_rate_hz: 100.0,
            hop_frames: 10,
            tf_tradeoff: 0.0,
            q_cycles: 4.0,
            window: Window::Hann,
        }
    }
}

impl CqtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_min.is_finite() && self.f_max.is_finite() && self.signal_rate_hz.is_finite()) {
            return Err(Error::NonFinite("cqt config"));
        }
        if !(self.f_min > 0.0 && self.f_min < self.f_max) {
            return Err(invalid(format!("need 0 < f_min < f_max, got {} and {}", self.f_min, self.f_max)));
        }
        if self.f_max > self.signal_rate_hz / 2.0 {
            return Err(invalid(format!(
                "f_max {} Hz is above the Nyquist frequency {} Hz",
                self.f_max,
                self.signal_rate_hz / 2.0
            )));
        }
        if self.bins_per_octave == 0 {
            return Err(invalid("bins_per_octave must be at least 1"));
        }
        if self.hop_frames == 0 {
            return Err(invalid("hop_frames must be at least 1"));
        }
        if !(self.tf_tradeoff >= 0.0) {
            return Err(invalid("tf_tradeoff must be non-negative"));
        }
        if !(self.q_cycles > 0.0) {
            return Err(invalid("q_cycles must be positive"));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        // Guard against log2 landing a hair under an integer.
        let octaves = (self.f_max / self.f_min).log2();
        (self.bins_per_octave as f64 * octaves + 1e-9).floor() as usize + 1
    }

    pub fn bin_frequency(&self, k: usize) -> f64 {
        self.f_min * (k as f64 / self.bins_per_octave as f64).exp2()
    }

    pub fn bin_freqs(&self) -> Vec<f64> {
        (0..self.n_bins()).map(|k| self.bin_frequency(k)).collect()
    }

    /// Analysis window length, in signal frames, of bin `k`.
    pub fn window_len(&self, k: usize) -> usize {
        let f = self.bin_frequency(k) + self.tf_tradeoff * self.f_min;
        (self.q_cycles * self.signal_rate_hz / f).round().max(1.0) as usize
    }

    pub fn longest_window(&self) -> usize {
        self.window_len(0)
    }

    /// Frames centered before the first sample. The grid extends half the
    /// longest window past both ends of the signal so that every atom
    /// overlapping the signal has a coefficient.
    pub fn lead_frames(&self) -> usize {
        (self.longest_window() / 2).div_ceil(self.hop_frames)
    }

    /// Number of analysis frames for a signal of `n_signal` samples.
    pub fn n_frames_for(&self, n_signal: usize) -> usize {
        if n_signal == 0 {
            0
        } else {
            (n_signal - 1) / self.hop_frames + 2 + 2 * self.lead_frames()
        }
    }

    /// Center time in seconds of frame `j`.
    pub fn frame_time(&self, j: usize) -> f64 {
        (j as f64 - self.lead_frames() as f64) * self.hop_secs()
    }

    pub fn hop_secs(&self) -> f64 {
        self.hop_frames as f64 / self.signal_rate_hz
    }
}

/// Nearest bin to `f`; exact halves round up.
pub fn bin_of_frequency(config: &CqtConfig, f: f64) -> Result<usize> {
    let n = config.n_bins();
    let top = config.bin_frequency(n - 1).max(config.f_max);
    if !f.is_finite() || f < config.f_min * (1.0 - 1e-12) || f > top * (1.0 + 1e-12) {
        return Err(invalid(format!("{f} Hz is outside [{}, {}] Hz", config.f_min, config.f_max)));
    }
    let x = config.bins_per_octave as f64 * (f / config.f_min).log2();
    Ok(((x + 0.5).floor().max(0.0) as usize).min(n - 1))
}

/// Complex CQT coefficients, `channels x frames x bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rhythmogram<T> {
    pub coeffs: Array3<Complex<T>>,
    pub frame_times: Vec<f64>,
    pub bin_freqs: Vec<f64>,
    pub config: CqtConfig,
}

impl<T: Real> Rhythmogram<T> {
    pub fn zeros(n_channels: usize, n_frames: usize, config: &CqtConfig) -> Self {
        let n_bins = config.n_bins();
        Self {
            coeffs: Array3::from_elem((n_channels, n_frames, n_bins), Complex::new(T::zero(), T::zero())),
            frame_times: (0..n_frames).map(|j| config.frame_time(j)).collect(),
            bin_freqs: config.bin_freqs(),
            config: config.clone(),
        }
    }

    pub fn n_channels(&self) -> usize {
        self.coeffs.len_of(Axis(0))
    }

    pub fn n_frames(&self) -> usize {
        self.coeffs.len_of(Axis(1))
    }

    pub fn n_bins(&self) -> usize {
        self.coeffs.len_of(Axis(2))
    }

    pub fn magnitudes(&self) -> Array3<T> {
        self.coeffs.mapv(|c| c.norm())
    }

    pub fn phases(&self) -> Array3<T> {
        self.coeffs.mapv(|c| c.arg())
    }

    /// Magnitudes summed over channels, `frames x bins`.
    pub fn channel_sum_magnitudes(&self) -> ndarray::Array2<T> {
        self.magnitudes().sum_axis(Axis(0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.bin_freqs.len() != self.n_bins() || self.frame_times.len() != self.n_frames() {
            return Err(Error::Shape("rhythmogram axes disagree with coefficient shape".into()));
        }
        if self.coeffs.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite("rhythmogram"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_121_bins() {
        let cfg = CqtConfig::default();
        assert_eq!(cfg.n_bins(), 121);
        assert_eq!(cfg.longest_window(), 800);
    }

    #[test]
    fn bins_are_log_spaced() {
        let cfg = CqtConfig::default();
        let f = cfg.bin_freqs();
        let step = (1.0f64 / 24.0).exp2();
        for w in f.windows(2) {
            assert!((w[1] / w[0] - step).abs() < 1e-13);
        }
        assert!(f.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn bin_lookup() {
        let cfg = CqtConfig::default();
        assert_eq!(bin_of_frequency(&cfg, 0.5).unwrap(), 0);
        assert_eq!(bin_of_frequency(&cfg, 2.0).unwrap(), 48);
        assert_eq!(bin_of_frequency(&cfg, 16.0).unwrap(), 120);
        assert!(bin_of_frequency(&cfg, 0.4).is_err());
        assert!(bin_of_frequency(&cfg, 17.0).is_err());
        // Exactly halfway between bins 0 and 1 in log-frequency rounds up.
        let half = 0.5 * (0.5f64 / 24.0).exp2();
        assert_eq!(bin_of_frequency(&cfg, half * (1.0 + 1e-12)).unwrap(), 1);
    }

    #[test]
    fn window_lengths_shrink_with_frequency() {
        let cfg = CqtConfig::default();
        let lens: Vec<usize> = (0..cfg.n_bins()).map(|k| cfg.window_len(k)).collect();
        assert!(lens.windows(2).all(|w| w[1] <= w[0]));
        let wide = CqtConfig { tf_tradeoff: 1.0, ..cfg.clone() };
        assert!(wide.window_len(0) < cfg.window_len(0));
    }

    #[test]
    fn config_validation() {
        let bad = [
            CqtConfig { f_min: 2.0, f_max: 1.0, ..Default::default() },
            CqtConfig { f_min: 0.0, ..Default::default() },
            CqtConfig { f_max: 60.0, ..Default::default() },
            CqtConfig { bins_per_octave: 0, ..Default::default() },
            CqtConfig { hop_frames: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        CqtConfig::default().validate().unwrap();
    }
}
