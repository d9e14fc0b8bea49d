//! Activation channels from audio: band-wise spectral flux and pitched onsets.
//!
//! Both paths produce 100 Hz channels. Frame `m` is centered on sample
//! `round(m * sample_rate / 100)`; samples outside the clip count as silence.

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, Error, Result};
use crate::rhythmgen::ActivationChannels;
use crate::scalar::Real;

/// Activation rate of every channel produced here.
pub const FRAME_RATE_HZ: f64 = 100.0;
const FLUX_WINDOW_SECS: f64 = 0.046;
/// Energies below this fraction of the clip's largest band energy are
/// treated as equal, so silence does not produce flux.
const ENERGY_FLOOR: f64 = 1e-4;

/// Mono audio in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Real> AudioClip<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        let clip = Self { samples, sample_rate };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate < 8000 {
            return Err(invalid(format!("sample rate {} Hz is below 8000 Hz", self.sample_rate)));
        }
        if self.samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("audio"));
        }
        Ok(())
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    fn n_frames(&self) -> usize {
        (self.duration_secs() * FRAME_RATE_HZ).floor() as usize + 1
    }

    fn frame_center(&self, m: usize) -> isize {
        (m as f64 * self.sample_rate as f64 / FRAME_RATE_HZ).round() as isize
    }
}

/// Reads 8 to 32-bit integer PCM or 32-bit float WAV; channels are averaged.
pub fn read_wav<T: Real>(path: &Path) -> Result<AudioClip<T>> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => {
            reader.samples::<f32>().map(|s| s.map(|v| v as f64)).collect::<std::result::Result<_, _>>()?
        }
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader.samples::<i32>().map(|s| s.map(|v| v as f64 / scale)).collect::<std::result::Result<_, _>>()?
        }
    };
    let samples = interleaved
        .chunks(channels)
        .map(|frame| T::lit(frame.iter().sum::<f64>() / frame.len() as f64))
        .collect();
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes mono 16-bit PCM; values are clipped to `[-1, 1]`.
pub fn write_wav<T: Real>(path: &Path, clip: &AudioClip<T>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in &clip.samples {
        let v = (s.to_f64_lossy().clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v)?;
    }
    w.finalize()?;
    Ok(())
}

/// Frequency band edges in Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct BandSpec {
    pub edges: Vec<f64>,
}

impl Default for BandSpec {
    /// Six groups of Bark critical bands between 40 Hz and 16 kHz.
    fn default() -> Self {
        Self { edges: vec![40.0, 200.0, 510.0, 1080.0, 2000.0, 4400.0, 16000.0] }
    }
}

impl BandSpec {
    /// The default bands with the top edge lowered to the Nyquist frequency
    /// when necessary.
    pub fn default_for(sample_rate: u32) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let mut edges: Vec<f64> = Self::default().edges.into_iter().filter(|&e| e < nyquist).collect();
        if edges.last().is_some_and(|&e| e < 16000.0) {
            edges.push(nyquist.min(16000.0));
        }
        Self { edges }
    }

    pub fn n_bands(&self) -> usize {
        self.edges.len().saturating_sub(1)
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.edges.len() < 2 {
            return Err(invalid("need at least two band edges"));
        }
        if self.edges.iter().any(|e| !e.is_finite() || *e < 0.0) || self.edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("band edges must be non-negative and strictly increasing"));
        }
        let nyquist = sample_rate as f64 / 2.0;
        if *self.edges.last().expect("non-empty") > nyquist {
            return Err(invalid(format!("band edge {} Hz is above the Nyquist frequency {nyquist} Hz", self.edges.last().unwrap())));
        }
        Ok(())
    }
}

struct Stft<T: Real> {
    window: Vec<T>,
    fft: Arc<dyn Fft<T>>,
    n_fft: usize,
}

impl<T: Real> Stft<T> {
    fn new(window_len: usize) -> Self {
        let n_fft = window_len.next_power_of_two();
        let window = (0..window_len)
            .map(|i| T::lit(0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / window_len as f64).cos()))
            .collect();
        Self { window, fft: FftPlanner::new().plan_fft_forward(n_fft), n_fft }
    }

    /// Power spectrum (`n_fft / 2 + 1` bins) of the frame centered on `center`.
    fn power(&self, clip: &AudioClip<T>, center: isize) -> Vec<f64> {
        let half = (self.window.len() / 2) as isize;
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.n_fft];
        for (i, &w) in self.window.iter().enumerate() {
            let s = center - half + i as isize;
            if s >= 0 && (s as usize) < clip.samples.len() {
                buf[i] = Complex::new(clip.samples[s as usize] * w, T::zero());
            }
        }
        self.fft.process(&mut buf);
        buf[..self.n_fft / 2 + 1].iter().map(|c| c.norm_sqr().to_f64_lossy()).collect()
    }

    fn spectrogram(&self, clip: &AudioClip<T>) -> Vec<Vec<f64>> {
        (0..clip.n_frames()).into_par_iter().map(|m| self.power(clip, clip.frame_center(m))).collect()
    }
}

fn check_length<T: Real>(clip: &AudioClip<T>, window_len: usize) -> Result<()> {
    clip.validate()?;
    if clip.samples.len() <= window_len {
        return Err(Error::TooShort { needed: window_len + 1, got: clip.samples.len() });
    }
    Ok(())
}

fn to_channels<T: Real>(rows: Vec<Vec<f64>>, names: Vec<String>) -> Result<ActivationChannels<T>> {
    let n = rows.first().map_or(0, Vec::len);
    let flat: Vec<T> = rows.into_iter().flatten().map(T::lit).collect();
    let data = Array2::from_shape_vec((names.len(), n), flat).map_err(|e| Error::Shape(e.to_string()))?;
    ActivationChannels::new(data, FRAME_RATE_HZ, names)
}

/// Half-wave rectified frame-to-frame increase of the log energy in every band.
pub fn band_flux<T: Real>(clip: &AudioClip<T>, bands: &BandSpec) -> Result<ActivationChannels<T>> {
    bands.validate(clip.sample_rate)?;
    let window_len = (FLUX_WINDOW_SECS * clip.sample_rate as f64).round() as usize;
    check_length(clip, window_len)?;
    let stft = Stft::<T>::new(window_len);
    let bin_hz = clip.sample_rate as f64 / stft.n_fft as f64;
    let spec = stft.spectrogram(clip);
    let nb = bands.n_bands();
    let ranges: Vec<std::ops::Range<usize>> = bands
        .edges
        .windows(2)
        .map(|w| (w[0] / bin_hz).ceil() as usize..((w[1] / bin_hz).ceil() as usize).min(stft.n_fft / 2 + 1))
        .collect();
    let energy: Vec<Vec<f64>> = ranges.iter().map(|r| spec.iter().map(|p| p[r.clone()].iter().sum()).collect()).collect();
    let peak = energy.iter().flatten().copied().fold(0.0, f64::max);
    let names = (0..nb).map(|b| format!("band{b}")).collect();
    if !(peak > 0.0) {
        return to_channels(vec![vec![0.0; spec.len()]; nb], names);
    }
    let floor = ENERGY_FLOOR * peak;
    let rows = energy
        .iter()
        .map(|e| {
            let log: Vec<f64> = e.iter().map(|&v| (v.max(floor) / floor).ln()).collect();
            std::iter::once(0.0).chain(log.windows(2).map(|w| (w[1] - w[0]).max(0.0))).collect()
        })
        .collect();
    to_channels(rows, names)
}

/// Fixed spectro-temporal onset detector over a 60-bins-per-octave
/// log-frequency spectrogram.
///
/// The kernel is the outer product of a difference of Gaussians across pitch
/// (with weaker copies at the 2nd, 3rd and 4th harmonic) and the derivative of
/// a Gaussian across time, so it responds to energy that rises at a pitch and
/// its overtones.
#[derive(Debug, Clone, PartialEq)]
pub struct OnsetFilter {
    /// `pitch offsets x time offsets`; row `i` is pitch offset `i - pitch_center`.
    pub kernel: Array2<f64>,
    pub pitch_center: usize,
    pub time_center: usize,
    pub bins_per_octave: usize,
    pub f_min: f64,
    pub n_octaves: usize,
}

/// Pitch offsets (bins) and weights of the harmonic copies in the kernel.
const HARMONIC_COPIES: [(usize, f64); 4] = [(0, 1.0), (60, 0.5), (95, 0.33), (120, 0.25)];
const DOG_SIGMAS: (f64, f64) = (1.0, 3.0);
const DOG_RADIUS: usize = 8;
const TIME_SIGMA: f64 = 2.0;
const TIME_RADIUS: usize = 6;
const PITCH_WINDOW_SECS: f64 = 0.093;

impl Default for OnsetFilter {
    fn default() -> Self {
        Self::new()
    }
}

impl OnsetFilter {
    pub fn new() -> Self {
        let gauss = |x: f64, s: f64| (-x * x / (2.0 * s * s)).exp() / s;
        let dog: Vec<f64> = (0..=2 * DOG_RADIUS)
            .map(|i| {
                let x = i as f64 - DOG_RADIUS as f64;
                gauss(x, DOG_SIGMAS.0) - gauss(x, DOG_SIGMAS.1)
            })
            .collect();
        let dt: Vec<f64> = (0..=2 * TIME_RADIUS)
            .map(|i| {
                let t = i as f64 - TIME_RADIUS as f64;
                t * (-t * t / (2.0 * TIME_SIGMA * TIME_SIGMA)).exp()
            })
            .collect();
        let top = HARMONIC_COPIES.last().expect("non-empty").0;
        let rows = top + 2 * DOG_RADIUS + 1;
        let mut kernel = Array2::zeros((rows, dt.len()));
        for &(offset, weight) in &HARMONIC_COPIES {
            for (i, &d) in dog.iter().enumerate() {
                for (t, &g) in dt.iter().enumerate() {
                    kernel[[offset + i, t]] += weight * d * g;
                }
            }
        }
        Self {
            kernel,
            pitch_center: DOG_RADIUS,
            time_center: TIME_RADIUS,
            bins_per_octave: 60,
            f_min: 65.40639132514966,
            n_octaves: 6,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.bins_per_octave * self.n_octaves
    }

    /// Compressed log-frequency magnitude spectrogram, `frames x bins`,
    /// scaled so the loudest bin of the clip maps to `ln(1 + 10)`.
    pub fn log_spectrogram<T: Real>(&self, clip: &AudioClip<T>) -> Result<Array2<f64>> {
        let window_len = (PITCH_WINDOW_SECS * clip.sample_rate as f64).round() as usize;
        check_length(clip, window_len)?;
        let stft = Stft::<T>::new(window_len);
        let bin_hz = clip.sample_rate as f64 / stft.n_fft as f64;
        let n_lin = stft.n_fft / 2 + 1;
        let spec = stft.spectrogram(clip);
        // Linear interpolation of magnitudes at each log-bin center.
        let taps: Vec<Option<(usize, f64)>> = (0..self.n_bins())
            .map(|k| {
                let f = self.f_min * (k as f64 / self.bins_per_octave as f64).exp2();
                let x = f / bin_hz;
                let i = x.floor() as usize;
                (i + 1 < n_lin).then_some((i, x - i as f64))
            })
            .collect();
        let mut out = Array2::zeros((spec.len(), self.n_bins()));
        for (m, p) in spec.iter().enumerate() {
            for (k, tap) in taps.iter().enumerate() {
                if let Some((i, frac)) = *tap {
                    out[[m, k]] = p[i].sqrt() * (1.0 - frac) + p[i + 1].sqrt() * frac;
                }
            }
        }
        let peak = out.iter().copied().fold(0.0, f64::max);
        if peak > 0.0 {
            out.mapv_inplace(|v| (1.0 + 10.0 * v / peak).ln());
        }
        Ok(out)
    }

    /// Unrectified filter output, `frames x bins`; bins whose kernel would
    /// reach outside the spectrogram see zeros there.
    pub fn response(&self, logspec: &Array2<f64>) -> Array2<f64> {
        let (frames, bins) = logspec.dim();
        let (kr, kt) = self.kernel.dim();
        let mut out = Array2::zeros((frames, bins));
        out.axis_iter_mut(ndarray::Axis(0)).into_par_iter().enumerate().for_each(|(m, mut row)| {
            for (k, slot) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for t in 0..kt {
                    let mm = m as isize + t as isize - self.time_center as isize;
                    if mm < 0 || mm as usize >= frames {
                        continue;
                    }
                    for i in 0..kr {
                        let kk = k as isize + i as isize - self.pitch_center as isize;
                        if kk < 0 || kk as usize >= bins {
                            continue;
                        }
                        acc += self.kernel[[i, t]] * logspec[[mm as usize, kk as usize]];
                    }
                }
                *slot = acc;
            }
        });
        out
    }

    /// Triangular weights of octave channel `c` over the log bins: peak 1 at
    /// the octave's center, reaching 0 one octave away.
    pub fn readout_weights(&self, c: usize) -> Vec<f64> {
        let bpo = self.bins_per_octave as f64;
        let center = (c as f64 + 0.5) * bpo;
        (0..self.n_bins()).map(|k| (1.0 - (k as f64 - center).abs() / bpo).max(0.0)).collect()
    }

    /// Readout of `response` per octave channel, `channels x frames`.
    pub fn readout(&self, response: &Array2<f64>) -> Vec<Vec<f64>> {
        (0..self.n_octaves)
            .map(|c| {
                let w = self.readout_weights(c);
                response.outer_iter().map(|row| row.iter().zip(&w).map(|(a, b)| a * b).sum()).collect()
            })
            .collect()
    }
}

/// Six octave channels of pitched-onset strength, half-wave rectified after
/// the octave readout.
pub fn pitched_onsets<T: Real>(clip: &AudioClip<T>) -> Result<ActivationChannels<T>> {
    pitched_onsets_with(clip, &OnsetFilter::new())
}

pub fn pitched_onsets_with<T: Real>(clip: &AudioClip<T>, filter: &OnsetFilter) -> Result<ActivationChannels<T>> {
    let logspec = filter.log_spectrogram(clip)?;
    let mut rows = filter.readout(&filter.response(&logspec));
    rows.iter_mut().flatten().for_each(|v| *v = v.max(0.0));
    let names = (0..filter.n_octaves).map(|c| format!("octave{c}")).collect();
    to_channels(rows, names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cqt::{self, CqtConfig};
    use std::f64::consts::TAU;

    const SR: u32 = 22050;

    fn clip(samples: Vec<f64>) -> AudioClip<f64> {
        AudioClip::new(samples, SR).unwrap()
    }

    fn click_train(secs: f64, rate_hz: f64, gain: f64) -> Vec<f64> {
        let n = (secs * SR as f64) as usize;
        let period = SR as f64 / rate_hz;
        let mut x = vec![0.0; n];
        let mut t = 0.25 * SR as f64;
        while (t as usize) + 64 < n {
            for i in 0..64 {
                // Short decaying noise-like burst.
                x[t as usize + i] = gain * (1.0 - i as f64 / 64.0) * ((i * 7919 % 13) as f64 / 6.0 - 1.0);
            }
            t += period;
        }
        x
    }

    fn tone(secs: f64, f0: f64, onset: f64, fade: f64) -> Vec<f64> {
        let n = (secs * SR as f64) as usize;
        (0..n)
            .map(|i| {
                let t = i as f64 / SR as f64;
                if t < onset {
                    return 0.0;
                }
                let env = ((t - onset) / fade.max(1e-9)).min(1.0) * (-(t - onset) * 0.3).exp();
                (1..=6).map(|h| (TAU * f0 * h as f64 * t).sin() / h as f64).sum::<f64>() * 0.2 * env
            })
            .collect()
    }

    #[test]
    fn default_bands() {
        let b = BandSpec::default();
        assert_eq!(b.n_bands(), 6);
        b.validate(44100).unwrap();
        assert!(b.validate(22050).is_err());
        let low = BandSpec::default_for(22050);
        low.validate(22050).unwrap();
        assert_eq!(*low.edges.last().unwrap(), 11025.0);
        assert!(BandSpec { edges: vec![100.0, 50.0] }.validate(SR).is_err());
    }

    #[test]
    fn silence_gives_zeros() {
        let c = clip(vec![0.0; SR as usize]);
        let flux = band_flux(&c, &BandSpec::default_for(SR)).unwrap();
        assert_eq!(flux.n_channels(), 6);
        assert_eq!(flux.signal_rate_hz, 100.0);
        assert!(flux.data.iter().all(|&v| v == 0.0));
        let p = pitched_onsets(&c).unwrap();
        assert_eq!(p.n_channels(), 6);
        assert!(p.data.iter().all(|&v| v == 0.0));
        assert!(band_flux(&clip(vec![0.0; 100]), &BandSpec::default_for(SR)).is_err());
        assert!(AudioClip::new(vec![0.0f64; 10], 4000).is_err());
    }

    #[test]
    fn click_train_periodicity_shows_in_every_band() {
        let c = clip(click_train(12.0, 2.0, 0.8));
        let flux = band_flux(&c, &BandSpec::default_for(SR)).unwrap();
        let cfg = CqtConfig::default();
        let kernel = cqt::plan(&cfg, flux.n_frames()).unwrap();
        let rg = cqt::forward(&flux, &kernel).unwrap();
        let mags = rg.magnitudes();
        let mid = kernel.frame_at(6.0);
        for b in 0..flux.n_channels() {
            let row = mags.index_axis(ndarray::Axis(0), b);
            let row = row.row(mid);
            let best = (0..row.len()).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap();
            assert_eq!(best, 48, "band {b}");
        }
    }

    #[test]
    fn flux_ignores_polarity_and_gain() {
        let x = click_train(3.0, 2.0, 0.5);
        let bands = BandSpec::default_for(SR);
        let a = band_flux(&clip(x.clone()), &bands).unwrap();
        let b = band_flux(&clip(x.iter().map(|v| -v).collect()), &bands).unwrap();
        assert_eq!(a.data, b.data);
        let c = band_flux(&clip(x.iter().map(|v| v * 0.25).collect()), &bands).unwrap();
        for (u, v) in a.data.iter().zip(c.data.iter()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn steady_sine_has_no_flux_once_inside() {
        let x: Vec<f64> = (0..2 * SR as usize).map(|i| 0.5 * (TAU * 440.0 * i as f64 / SR as f64).sin()).collect();
        let flux = band_flux(&clip(x), &BandSpec::default_for(SR)).unwrap();
        let peak = flux.data.iter().copied().fold(0.0, f64::max);
        // The window is fully inside the clip from frame 3 until 3 frames before the end.
        let n = flux.n_frames();
        let tail = flux.data.slice(ndarray::s![.., 4..n - 4]);
        assert!(tail.iter().all(|&v| v < 1e-3 * peak), "{peak}");
    }

    #[test]
    fn kernel_is_a_time_derivative() {
        let f = OnsetFilter::new();
        let l1: f64 = f.kernel.iter().map(|v| v.abs()).sum();
        for row in f.kernel.outer_iter() {
            assert!(row.sum().abs() <= 1e-6 * l1);
        }
    }

    fn channel_peaks(ch: &ActivationChannels<f64>) -> Vec<f64> {
        ch.data.outer_iter().map(|r| r.iter().copied().fold(0.0, f64::max)).collect()
    }

    #[test]
    fn tone_onset_lands_in_its_octave() {
        // 220 Hz is 1.75 octaves above the lowest bin: octave channel 1.
        let sharp = pitched_onsets(&clip(tone(3.0, 220.0, 1.0, 0.005))).unwrap();
        let peaks = channel_peaks(&sharp);
        let best = (0..6).max_by(|&a, &b| peaks[a].total_cmp(&peaks[b])).unwrap();
        assert_eq!(best, 1, "{peaks:?}");
        let row = sharp.data.row(1);
        let t_peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert!((t_peak as f64 - 100.0).abs() <= 5.0, "{t_peak}");
        // Nothing else in the channel comes close to the onset.
        let others = row.iter().enumerate().filter(|(i, _)| (*i as isize - t_peak as isize).abs() > 15);
        assert!(others.map(|(_, v)| *v).fold(0.0, f64::max) < 0.3 * row[t_peak]);

        // 880 Hz is 3.75 octaves up.
        let high = channel_peaks(&pitched_onsets(&clip(tone(3.0, 880.0, 1.0, 0.005))).unwrap());
        assert_eq!((0..6).max_by(|&a, &b| high[a].total_cmp(&high[b])).unwrap(), 3, "{high:?}");

        let faded = pitched_onsets(&clip(tone(4.0, 220.0, 1.0, 2.0))).unwrap();
        assert!(channel_peaks(&faded)[1] < peaks[1]);
    }

    #[test]
    fn release_gives_negative_response() {
        let mut x = tone(3.0, 220.0, 0.0, 0.005);
        let cut = 2 * SR as usize;
        x[cut..].iter_mut().for_each(|v| *v = 0.0);
        let c = clip(x);
        let f = OnsetFilter::new();
        let resp = f.response(&f.log_spectrogram(&c).unwrap());
        let read = f.readout(&resp);
        assert!(read[1][200] <= 0.0, "{}", read[1][200]);
        let rect = pitched_onsets(&c).unwrap();
        assert_eq!(rect.data[[1, 200]], 0.0);
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let c = clip(click_train(1.0, 4.0, 0.5));
        write_wav(&p, &c).unwrap();
        let back: AudioClip<f64> = read_wav(&p).unwrap();
        assert_eq!(back.sample_rate, SR);
        for (a, b) in c.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1e-4);
        }

        let stereo = dir.path().join("s.wav");
        let spec = hound::WavSpec { channels: 2, sample_rate: 8000, bits_per_sample: 32, sample_format: hound::SampleFormat::Float };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        for _ in 0..10 {
            w.write_sample(0.5f32).unwrap();
            w.write_sample(-0.25f32).unwrap();
        }
        w.finalize().unwrap();
        let m: AudioClip<f64> = read_wav(&stereo).unwrap();
        assert_eq!(m.samples, vec![0.125; 10]);
    }
}
