//! Task layer: tempo and measure estimation, beat and downbeat tracking by
//! band-masked inversion, training targets, and pattern fingerprints.

use ndarray::{s, Array2, Array3, Axis};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convnet::{forward, Activation, Architecture, ConvLayerSpec, KernelExtent, ModelParams, PoolMode, PoolSpec, Readout, Tensor};
use crate::cqt::{self, harmonic_stack, CqtConfig, CqtKernel, Rhythmogram};
use crate::error::{invalid, Error, Result};
use crate::phasefeat::build_featuremap_neighbor;
use crate::rhythmgen::{render, ActivationChannels, BeatAnnotations, Beats, DrumPattern, RenderConfig};
use crate::scalar::Real;

/// Regularization floor used when inverting a band-masked rhythmogram.
pub const MASKED_INVERSE_FLOOR: f64 = 1e-2;

/// Harmonics stacked into the tempo model input.
pub const TEMPO_HARMONICS: [u32; 6] = [1, 2, 3, 4, 6, 8];

fn argmax_low<T: Real>(scores: &[T]) -> Result<usize> {
    if scores.is_empty() {
        return Err(invalid("no scores"));
    }
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("scores"));
    }
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

fn check_scores<T>(scores: &[T], config: &CqtConfig) -> Result<()> {
    if scores.len() != config.n_bins() {
        return Err(Error::Shape(format!("{} scores for {} bins", scores.len(), config.n_bins())));
    }
    Ok(())
}

/// Tempo in BPM at the highest-scoring bin; ties go to the lowest bin.
pub fn estimate_tempo<T: Real>(scores: &[T], config: &CqtConfig) -> Result<f64> {
    check_scores(scores, config)?;
    Ok(60.0 * config.bin_frequency(argmax_low(scores)?))
}

/// Measure length in seconds at the highest-scoring bin; ties go to the
/// lowest bin, i.e. the longer measure.
pub fn estimate_measure_length<T: Real>(scores: &[T], config: &CqtConfig) -> Result<f64> {
    check_scores(scores, config)?;
    Ok(1.0 / config.bin_frequency(argmax_low(scores)?))
}

/// Zeroes every bin farther than `width_octaves / 2` octaves from
/// `center_bin`. Surviving coefficients are copied unchanged.
pub fn mask_octave<T: Real>(rg: &Rhythmogram<T>, center_bin: usize, width_octaves: Beats) -> Result<Rhythmogram<T>> {
    if center_bin >= rg.n_bins() {
        return Err(invalid(format!("bin {center_bin} outside {} bins", rg.n_bins())));
    }
    if width_octaves < Beats::from_integer(0) {
        return Err(invalid("mask width must be non-negative"));
    }
    // |k - c| <= width * bpo / 2, compared exactly.
    let limit = width_octaves * Beats::from_integer(rg.config.bins_per_octave as i64);
    let keep = |k: usize| Beats::from_integer(2 * (k as i64 - center_bin as i64).abs()) <= limit;
    let mut out = rg.clone();
    let zero = Complex::new(T::zero(), T::zero());
    for (k, mut lane) in out.coeffs.axis_iter_mut(Axis(2)).enumerate() {
        if !keep(k) {
            lane.fill(zero);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridLevel {
    Beat,
    Downbeat,
}

/// Event times in seconds. `low_confidence[i]` marks events within half an
/// analysis window of either end of the signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatGrid {
    pub times: Vec<f64>,
    pub level: GridLevel,
    pub low_confidence: Vec<bool>,
}

impl BeatGrid {
    pub fn new(times: Vec<f64>, level: GridLevel) -> Result<Self> {
        let grid = Self { low_confidence: vec![false; times.len()], times, level };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("beat grid"));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("beat times must be strictly increasing"));
        }
        if self.low_confidence.len() != self.times.len() {
            return Err(Error::Shape("confidence flags do not match the times".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Intervals between consecutive events.
    pub fn intervals(&self) -> Vec<f64> {
        self.times.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// How inverted channels are combined before peak picking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// Equal-weight sum of all channels.
    #[default]
    Sum,
    /// Weighted sum; a single non-zero weight tracks one channel.
    Weighted(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackOptions {
    pub width_octaves: Beats,
    /// Peaks below this fraction of the largest sample are dropped.
    pub peak_threshold: f64,
    /// Minimum peak distance as a fraction of the tracked period.
    pub min_separation: f64,
    pub channels: ChannelMode,
    pub regularization: f64,
}

impl Default for TrackOptions {
    fn default() -> Self {
        Self {
            width_octaves: Beats::from_integer(1),
            peak_threshold: 0.3,
            min_separation: 0.5,
            channels: ChannelMode::Sum,
            regularization: MASKED_INVERSE_FLOOR,
        }
    }
}

impl TrackOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.peak_threshold) {
            return Err(invalid("peak_threshold must be in [0, 1]"));
        }
        if !(self.min_separation >= 0.0 && self.min_separation.is_finite()) {
            return Err(invalid("min_separation must be non-negative"));
        }
        if !(self.regularization > 0.0 && self.regularization.is_finite()) {
            return Err(invalid("regularization must be positive"));
        }
        Ok(())
    }
}

/// Band-masked inversion summed over channels, one value per signal sample.
pub fn band_signal<T: Real>(
    rg: &Rhythmogram<T>,
    bin: usize,
    kernel: &CqtKernel<T>,
    opts: &TrackOptions,
) -> Result<Vec<f64>> {
    opts.validate()?;
    let masked = mask_octave(rg, bin, opts.width_octaves)?;
    let inv = cqt::inverse_regularized(&masked, kernel, opts.regularization)?;
    let weights = match &opts.channels {
        ChannelMode::Sum => vec![1.0; inv.n_channels()],
        ChannelMode::Weighted(w) if w.len() == inv.n_channels() && w.iter().all(|v| v.is_finite()) => w.clone(),
        ChannelMode::Weighted(w) => {
            return Err(invalid(format!("{} channel weights for {} channels", w.len(), inv.n_channels())))
        }
    };
    let mut out = vec![0.0; inv.n_frames()];
    for (row, &w) in inv.data.outer_iter().zip(&weights) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += w * v.to_f64_lossy();
        }
    }
    Ok(out)
}

/// Local maxima at least `threshold * max` high and `min_dist` samples apart;
/// stronger peaks win conflicts. Positions are refined by a parabola through
/// the peak and its neighbors.
pub fn pick_peaks(x: &[f64], threshold: f64, min_dist: f64) -> Vec<f64> {
    let peak = x.iter().copied().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Vec::new();
    }
    let floor = threshold * peak;
    let mut cands: Vec<usize> = (1..x.len().saturating_sub(1))
        .filter(|&i| x[i] > x[i - 1] && x[i] >= x[i + 1] && x[i] >= floor && x[i] > 0.0)
        .collect();
    cands.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for c in cands {
        if kept.iter().all(|&k| (k as f64 - c as f64).abs() >= min_dist) {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    kept.into_iter()
        .map(|i| {
            let (a, b, c) = (x[i - 1], x[i], x[i + 1]);
            let den = a - 2.0 * b + c;
            let off = if den < 0.0 { (0.5 * (a - c) / den).clamp(-0.5, 0.5) } else { 0.0 };
            i as f64 + off
        })
        .collect()
}

fn track<T: Real>(
    rg: &Rhythmogram<T>,
    bin: usize,
    kernel: &CqtKernel<T>,
    opts: &TrackOptions,
    level: GridLevel,
) -> Result<BeatGrid> {
    let signal = band_signal(rg, bin, kernel, opts)?;
    let cfg = kernel.config();
    let rate = cfg.signal_rate_hz;
    let freq = cfg.bin_frequency(bin);
    let peaks = pick_peaks(&signal, opts.peak_threshold, opts.min_separation * rate / freq);
    let edge = cfg.window_len(bin) as f64 / 2.0;
    let last = (signal.len() - 1) as f64;
    let low_confidence = peaks.iter().map(|&p| p < edge || p > last - edge).collect();
    let grid = BeatGrid { times: peaks.iter().map(|p| p / rate).collect(), level, low_confidence };
    grid.validate()?;
    Ok(grid)
}

/// Keeps one octave around `tempo_bin`, inverts, and picks the peaks of the
/// resulting near-sinusoid as beats.
pub fn track_beats<T: Real>(rg: &Rhythmogram<T>, tempo_bin: usize, kernel: &CqtKernel<T>) -> Result<BeatGrid> {
    track_beats_with(rg, tempo_bin, kernel, &TrackOptions::default())
}

pub fn track_beats_with<T: Real>(
    rg: &Rhythmogram<T>,
    tempo_bin: usize,
    kernel: &CqtKernel<T>,
    opts: &TrackOptions,
) -> Result<BeatGrid> {
    track(rg, tempo_bin, kernel, opts, GridLevel::Beat)
}

/// [`track_beats`] at the measure-level bin.
pub fn track_downbeats<T: Real>(rg: &Rhythmogram<T>, measure_bin: usize, kernel: &CqtKernel<T>) -> Result<BeatGrid> {
    track_downbeats_with(rg, measure_bin, kernel, &TrackOptions::default())
}

pub fn track_downbeats_with<T: Real>(
    rg: &Rhythmogram<T>,
    measure_bin: usize,
    kernel: &CqtKernel<T>,
    opts: &TrackOptions,
) -> Result<BeatGrid> {
    track(rg, measure_bin, kernel, opts, GridLevel::Downbeat)
}

/// Downbeats taken from a beat grid: every `beats_per_measure`-th beat,
/// starting at the offset whose beats see the largest measure-band signal.
///
/// Times come from the beats, so the measure band only has to resolve which
/// beat starts the measure. Assumes `beats` has no missing beats.
pub fn track_downbeats_on_beats<T: Real>(
    rg: &Rhythmogram<T>,
    measure_bin: usize,
    beats: &BeatGrid,
    beats_per_measure: usize,
    kernel: &CqtKernel<T>,
    opts: &TrackOptions,
) -> Result<BeatGrid> {
    if beats_per_measure == 0 {
        return Err(invalid("beats_per_measure must be at least 1"));
    }
    if beats.level != GridLevel::Beat {
        return Err(invalid("expected a beat-level grid"));
    }
    let signal = band_signal(rg, measure_bin, kernel, opts)?;
    let rate = kernel.config().signal_rate_hz;
    let at = |t: f64| {
        let x = (t * rate).clamp(0.0, (signal.len() - 1) as f64);
        let i = (x.floor() as usize).min(signal.len().saturating_sub(2));
        let f = x - i as f64;
        signal[i] * (1.0 - f) + signal.get(i + 1).copied().unwrap_or(0.0) * f
    };
    let score = |o: usize| beats.times.iter().skip(o).step_by(beats_per_measure).map(|&t| at(t)).sum::<f64>();
    let mut best = 0;
    for o in 1..beats_per_measure.min(beats.len()) {
        if score(o) > score(best) {
            best = o;
        }
    }
    let pick = |v: &[f64]| v.iter().skip(best).step_by(beats_per_measure).copied().collect::<Vec<_>>();
    let low: Vec<bool> = beats.low_confidence.iter().skip(best).step_by(beats_per_measure).copied().collect();
    let grid = BeatGrid { times: pick(&beats.times), level: GridLevel::Downbeat, low_confidence: low };
    grid.validate()?;
    Ok(grid)
}

/// Frequency-domain training targets: per-frame magnitudes normalized to a
/// peak of 1, and the phases they came with.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetFrames<T> {
    pub magnitudes: Array2<T>,
    pub phases: Array2<T>,
    pub frame_times: Vec<f64>,
    pub bin_freqs: Vec<f64>,
}

impl<T: Real> TargetFrames<T> {
    /// Bins whose magnitude reaches `threshold`; only there is the phase meaningful.
    pub fn phase_mask(&self, threshold: f64) -> Array2<bool> {
        let th = T::lit(threshold);
        self.magnitudes.mapv(|m| m >= th)
    }

    /// Highest-magnitude bin of every frame; ties go to the lowest bin.
    pub fn argmax_bins(&self) -> Vec<usize> {
        self.magnitudes
            .outer_iter()
            .map(|row| argmax_low(row.as_slice().expect("contiguous")).unwrap_or(0))
            .collect()
    }
}

/// Phase that rises by 2π from one annotation to the next, extended past the
/// ends with the neighboring interval's rate.
fn annotation_phase(times: &[f64], t: f64) -> f64 {
    let n = times.len();
    let i = match times.partition_point(|&a| a <= t) {
        0 => 0,
        p if p >= n => n - 2,
        p => p - 1,
    };
    let (a, b) = (times[i], times[i + 1]);
    std::f64::consts::TAU * (i as f64 + (t - a) / (b - a))
}

/// Transforms a cosine that peaks at every annotation. The phase is
/// accumulated between annotations, so tempo drift gives a smooth chirp
/// rather than impulses and their harmonics.
pub fn make_targets<T: Real>(annotations: &[f64], kernel: &CqtKernel<T>) -> Result<TargetFrames<T>> {
    if annotations.len() < 2 {
        return Err(invalid("targets need at least two annotations"));
    }
    if annotations.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("annotations"));
    }
    if annotations.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("annotations must be strictly increasing"));
    }
    let rate = kernel.config().signal_rate_hz;
    let curve: Vec<T> = (0..kernel.signal_len())
        .map(|i| T::lit(annotation_phase(annotations, i as f64 / rate).cos()))
        .collect();
    let coeffs = cqt::analyze_real(&curve, kernel);
    let mut magnitudes = coeffs.mapv(|c| c.norm());
    for mut row in magnitudes.outer_iter_mut() {
        let peak = row.iter().copied().fold(T::zero(), T::max);
        if peak > T::zero() {
            row.mapv_inplace(|v| (v / peak).min(T::one()));
        }
    }
    Ok(TargetFrames {
        magnitudes,
        phases: coeffs.mapv(|c| c.arg()),
        frame_times: kernel.frame_times(),
        bin_freqs: kernel.bin_freqs(),
    })
}

/// [`make_targets`] from the beat or downbeat times of an annotation set.
pub fn make_targets_for<T: Real>(
    annotations: &BeatAnnotations,
    level: GridLevel,
    kernel: &CqtKernel<T>,
) -> Result<TargetFrames<T>> {
    match level {
        GridLevel::Beat => make_targets(&annotations.beat_times, kernel),
        GridLevel::Downbeat => make_targets(&annotations.downbeat_times, kernel),
    }
}

/// Frames whose centers are at least half the longest window inside the
/// signal. Falls back to every frame centered within the signal when the
/// signal is too short to have any.
pub fn interior_frames<T: Real>(kernel: &CqtKernel<T>) -> std::ops::Range<usize> {
    let cfg = kernel.config();
    let half = cfg.longest_window() as f64 / 2.0 / cfg.signal_rate_hz;
    let dur = (kernel.signal_len() - 1) as f64 / cfg.signal_rate_hz;
    let range = |lo: f64, hi: f64| {
        let times = kernel.frame_times();
        let a = times.iter().position(|&t| t >= lo - 1e-9).unwrap_or(times.len());
        let b = times.iter().rposition(|&t| t <= hi + 1e-9).map_or(a, |i| i + 1);
        a..b.max(a)
    };
    let inner = range(half, dur - half);
    if inner.is_empty() {
        range(0.0, dur)
    } else {
        inner
    }
}

/// Tempo model input: interior-frame mean magnitudes of every channel,
/// stacked at [`TEMPO_HARMONICS`] and scaled to a peak of 1. Shape is
/// `harmonics x channels x 1 x bins`.
pub fn tempo_input<T: Real>(rg: &Rhythmogram<T>, frames: std::ops::Range<usize>) -> Result<Tensor<T>> {
    if frames.is_empty() || frames.end > rg.n_frames() {
        return Err(invalid("empty or out-of-range frame selection"));
    }
    let mags = rg.magnitudes();
    let mean = mags.slice(s![.., frames, ..]).mean_axis(Axis(1)).expect("frames > 0");
    let mean: Array3<T> = mean.insert_axis(Axis(1));
    let mut stack = harmonic_stack(&mean, &TEMPO_HARMONICS, rg.config.bins_per_octave)?;
    let peak = stack.iter().copied().fold(T::zero(), T::max);
    if peak > T::zero() {
        stack.mapv_inplace(|v| v / peak);
    }
    Ok(stack)
}

/// Per-bin tempo scores over the full bin axis; bins the model cannot
/// reach score negative infinity.
pub fn tempo_scores<T: Real>(model: &ModelParams<T>, x: &Tensor<T>, n_bins: usize) -> Result<Vec<T>> {
    let out = forward(model, x)?;
    if out.nrows() != 1 {
        return Err(invalid("tempo model must produce a single output row"));
    }
    let offset = model.bin_offset();
    if offset + out.ncols() > n_bins {
        return Err(Error::Shape(format!("model covers bins {offset}..{}, axis has {n_bins}", offset + out.ncols())));
    }
    let mut scores = vec![T::neg_infinity(); n_bins];
    scores[offset..offset + out.ncols()].copy_from_slice(out.row(0).as_slice().expect("contiguous"));
    Ok(scores)
}

/// Pooled filter responses identifying a rhythm pattern independent of tempo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub values: Vec<f64>,
    pub pattern_id: Option<String>,
    pub model_hash: String,
    pub pool_mode: PoolMode,
}

/// Neighbor feature map over interior frames, run through `model`, pooled
/// over the full frequency range and averaged over frames.
pub fn fingerprint<T: Real>(
    channels: &ActivationChannels<T>,
    config: &CqtConfig,
    model: &ModelParams<T>,
) -> Result<Fingerprint> {
    if model.pool.mode != PoolMode::FullRange {
        return Err(invalid("fingerprints need a full-range pooling model"));
    }
    let kernel = cqt::plan::<T>(config, channels.n_frames())?;
    let rg = cqt::forward(channels, &kernel)?;
    let frames = interior_frames(&kernel);
    let fm = build_featuremap_neighbor(&rg)?;
    let x = fm.data.slice(s![.., frames, ..]).to_owned().insert_axis(Axis(0));
    let out = forward(model, &x)?;
    let values = out.mean_axis(Axis(0)).expect("rows > 0").iter().map(|v| v.to_f64_lossy()).collect();
    Ok(Fingerprint { values, pattern_id: None, model_hash: crate::io::model_hash(model), pool_mode: model.pool.mode })
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("fingerprints of length {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(if na > 0.0 && nb > 0.0 { dot / (na * nb) } else { 0.0 })
}

/// One retrieval result: corpus index and cosine similarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub index: usize,
    pub similarity: f64,
}

/// Top `k` corpus entries by cosine similarity. Equal similarities keep
/// corpus order.
pub fn match_fingerprints(query: &Fingerprint, corpus: &[Fingerprint], k: usize) -> Result<Vec<Match>> {
    if let Some(bad) = corpus.iter().find(|f| f.model_hash != query.model_hash || f.pool_mode != query.pool_mode) {
        return Err(invalid(format!(
            "fingerprint from model {} ({:?}) cannot be compared with model {} ({:?})",
            bad.model_hash, bad.pool_mode, query.model_hash, query.pool_mode
        )));
    }
    let mut ranked: Vec<Match> = corpus
        .par_iter()
        .enumerate()
        .map(|(index, f)| Ok(Match { index, similarity: cosine_similarity(&query.values, &f.values)? }))
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
    ranked.truncate(k);
    Ok(ranked)
}

/// Precision, recall and F-measure of a beat estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeatScore {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub matched: usize,
}

fn greedy_pairs(est: &[f64], reference: &[f64], tol: f64) -> Vec<Option<usize>> {
    let mut used = vec![false; est.len()];
    reference
        .iter()
        .map(|&r| {
            let mut best: Option<usize> = None;
            for (i, &e) in est.iter().enumerate() {
                if used[i] || (e - r).abs() > tol {
                    continue;
                }
                if best.is_none_or(|b| (e - r).abs() < (est[b] - r).abs()) {
                    best = Some(i);
                }
            }
            if let Some(b) = best {
                used[b] = true;
            }
            best
        })
        .collect()
}

fn score(matched_est: usize, n_est: usize, matched_ref: usize, n_ref: usize) -> BeatScore {
    if n_est == 0 && n_ref == 0 {
        return BeatScore { precision: 1.0, recall: 1.0, f_measure: 1.0, matched: 0 };
    }
    let precision = if n_est == 0 { 0.0 } else { matched_est as f64 / n_est as f64 };
    let recall = if n_ref == 0 { 0.0 } else { matched_ref as f64 / n_ref as f64 };
    let f_measure = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    BeatScore { precision, recall, f_measure, matched: matched_ref }
}

/// Greedy one-to-one matching within `±tol` seconds: each reference beat in
/// turn takes the closest unused estimate.
pub fn evaluate_beats(est: &[f64], reference: &[f64], tol: f64) -> Result<BeatScore> {
    evaluate_beats_between(est, reference, tol, f64::NEG_INFINITY, f64::INFINITY)
}

/// [`evaluate_beats`] counting only events in `[start, end]`. Matching runs
/// on the full grids, so an event near the edge can still pair with one
/// just outside.
pub fn evaluate_beats_between(est: &[f64], reference: &[f64], tol: f64, start: f64, end: f64) -> Result<BeatScore> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(invalid("tolerance must be positive"));
    }
    let pairs = greedy_pairs(est, reference, tol);
    let inside = |t: f64| t >= start && t <= end;
    let mut est_matched = vec![false; est.len()];
    for p in pairs.iter().flatten() {
        est_matched[*p] = true;
    }
    let n_est = est.iter().filter(|&&t| inside(t)).count();
    let m_est = est.iter().zip(&est_matched).filter(|(t, m)| inside(**t) && **m).count();
    let n_ref = reference.iter().filter(|&&t| inside(t)).count();
    let m_ref = reference.iter().zip(&pairs).filter(|(t, p)| inside(**t) && p.is_some()).count();
    Ok(score(m_est, n_est, m_ref, n_ref))
}

/// Rendering settings for a synthetic tempo training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TempoDataConfig {
    pub tempi_bpm: Vec<f64>,
    pub n_examples: usize,
    pub duration_secs: f64,
    pub noise_level: f64,
    pub rng_seed: u64,
}

impl Default for TempoDataConfig {
    /// 24 tempi from 70 to 185 BPM in steps of 5.
    fn default() -> Self {
        Self {
            tempi_bpm: (0..24).map(|i| 70.0 + 5.0 * i as f64).collect(),
            n_examples: 200,
            duration_secs: 20.0,
            noise_level: 0.15,
            rng_seed: 0,
        }
    }
}

/// Per-bin tempo scorer: `filters` relu filters spanning `kernel_bins` bins
/// over every harmonic and channel, mixed by a 1x1 linear layer.
pub fn tempo_architecture(n_channels: usize, config: &CqtConfig, kernel_bins: usize, filters: usize) -> Architecture {
    let h = TEMPO_HARMONICS.len();
    Architecture {
        input_dims: (h, n_channels, 1, config.n_bins()),
        bins_per_octave: config.bins_per_octave,
        layers: vec![
            ConvLayerSpec::new(KernelExtent { rows: n_channels, frames: 1, bins: kernel_bins, depth: h }, filters, Activation::Relu),
            ConvLayerSpec::new(KernelExtent { rows: 1, frames: 1, bins: 1, depth: filters }, 1, Activation::Identity),
        ],
        pool: PoolSpec::none(),
        freq_weights: None,
        readout: Readout::FrameMean,
        head_outputs: None,
    }
}

pub const FINGERPRINT_FILTERS: usize = 32;

/// Fixed random filters over the neighbor feature map, pooled over the full
/// bin range; used for tempo-invariant pattern fingerprints.
pub fn fingerprint_architecture(n_channels: usize, config: &CqtConfig) -> Architecture {
    Architecture {
        input_dims: (1, 2 * n_channels, 1, config.n_bins()),
        bins_per_octave: config.bins_per_octave,
        layers: vec![ConvLayerSpec::new(
            KernelExtent { rows: 2, frames: 1, bins: config.bins_per_octave + 1, depth: 1 },
            FINGERPRINT_FILTERS,
            Activation::Relu,
        )],
        pool: PoolSpec::default(),
        freq_weights: None,
        readout: Readout::FrameMean,
        head_outputs: None,
    }
}

/// Tempo model input for a whole signal (see [`tempo_input`]).
pub fn tempo_features<T: Real>(channels: &ActivationChannels<T>, kernel: &CqtKernel<T>) -> Result<Tensor<T>> {
    let rg = cqt::forward(channels, kernel)?;
    tempo_input(&rg, interior_frames(kernel))
}

/// Center and width (in octaves) of the log-normal tempo prior used by
/// [`heuristic_tempo_scores`].
pub const TEMPO_PRIOR_BPM: f64 = 120.0;
pub const TEMPO_PRIOR_OCTAVES: f64 = 1.0;

/// Channel-summed interior mean magnitudes with every bin credited by its
/// [`TEMPO_HARMONICS`] at weight `1/h`.
pub fn harmonic_sum_scores<T: Real>(x: &Tensor<T>) -> Vec<f64> {
    let (h, c, f, b) = x.dim();
    let mut scores = vec![0.0; b];
    for (hi, &harm) in TEMPO_HARMONICS.iter().enumerate().take(h) {
        for ci in 0..c {
            for fi in 0..f {
                for (bi, s) in scores.iter_mut().enumerate() {
                    *s += x[[hi, ci, fi, bi]].to_f64_lossy() / harm as f64;
                }
            }
        }
    }
    scores
}

/// Model-free tempo scores: the local maxima of [`harmonic_sum_scores`]
/// weighted by a log-normal tempo prior; every other bin scores 0. The
/// prior only ranks peaks, so it never moves one. Metrical levels an octave
/// apart can still be confused; a trained model resolves them.
pub fn heuristic_tempo_scores<T: Real>(x: &Tensor<T>, config: &CqtConfig) -> Vec<f64> {
    let raw = harmonic_sum_scores(x);
    let n = raw.len();
    (0..n)
        .map(|i| {
            let left = i == 0 || raw[i] > raw[i - 1];
            let right = i + 1 == n || raw[i] >= raw[i + 1];
            if !(left && right) {
                return 0.0;
            }
            let octaves = (60.0 * config.bin_frequency(i) / TEMPO_PRIOR_BPM).log2() / TEMPO_PRIOR_OCTAVES;
            raw[i] * (-0.5 * octaves * octaves).exp()
        })
        .collect()
}

/// Renders `data.n_examples` noisy examples, drawing pattern and tempo
/// uniformly. Every example is cut to `duration_secs`. Labels are the bins
/// nearest each tempo.
pub fn synthetic_tempo_dataset<T: Real>(
    patterns: &[DrumPattern],
    data: &TempoDataConfig,
    config: &CqtConfig,
) -> Result<Vec<(Tensor<T>, usize)>> {
    if patterns.is_empty() || data.tempi_bpm.is_empty() {
        return Err(invalid("need at least one pattern and one tempo"));
    }
    let n_frames = (data.duration_secs * config.signal_rate_hz).round() as usize;
    let kernel = cqt::plan::<T>(config, n_frames)?;
    let mut rng = ChaCha8Rng::seed_from_u64(data.rng_seed);
    let draws: Vec<(usize, f64, u64)> = (0..data.n_examples)
        .map(|_| {
            let p = rng.random_range(0..patterns.len());
            let t = data.tempi_bpm[rng.random_range(0..data.tempi_bpm.len())];
            (p, t, rng.random())
        })
        .collect();
    draws
        .into_par_iter()
        .map(|(p, bpm, seed)| {
            let pattern = &patterns[p];
            let measure_secs = 60.0 / bpm * pattern.beats_per_measure as f64;
            let rc = RenderConfig {
                tempo_bpm: bpm,
                signal_rate_hz: config.signal_rate_hz,
                n_measures: (data.duration_secs / measure_secs).ceil().max(1.0) as usize,
                noise_level: data.noise_level,
                rng_seed: seed,
                ..RenderConfig::default()
            };
            let (ch, _) = render::<T>(pattern, &rc)?;
            let data = ch.data.slice(s![.., ..n_frames]).to_owned();
            let ch = ActivationChannels::new(data, ch.signal_rate_hz, ch.channel_names)?;
            Ok((tempo_features(&ch, &kernel)?, cqt::bin_of_frequency(config, bpm / 60.0)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cqt::bin_of_frequency;
    use crate::rhythmgen::{accented_pattern, pattern_corpus, standard_pattern};

    fn setup(bpm: f64, noise: f64, seed: u64) -> (Rhythmogram<f64>, CqtKernel<f64>, BeatAnnotations) {
        let cfg = RenderConfig { tempo_bpm: bpm, noise_level: noise, rng_seed: seed, ..RenderConfig::default() };
        let (ch, ann) = render::<f64>(&standard_pattern(), &cfg).unwrap();
        let kernel = cqt::plan(&CqtConfig::default(), ch.n_frames()).unwrap();
        (cqt::forward(&ch, &kernel).unwrap(), kernel, ann)
    }

    #[test]
    fn tempo_and_measure_from_scores() {
        let cfg = CqtConfig::default();
        let mut s = vec![0.0; 121];
        s[48] = 1.0;
        assert!((estimate_tempo(&s, &cfg).unwrap() - 120.0).abs() < 1e-9);
        let mut s = vec![0.0; 121];
        s[0] = 1.0;
        assert!((estimate_tempo(&s, &cfg).unwrap() - 30.0).abs() < 1e-12);
        assert!((estimate_measure_length(&s, &cfg).unwrap() - 2.0).abs() < 1e-12);
        let mut s = vec![0.0; 121];
        s[10] = 1.0;
        s[40] = 1.0;
        assert!((estimate_measure_length(&s, &cfg).unwrap() - 1.0 / cfg.bin_frequency(10)).abs() < 1e-12);
        assert!(estimate_tempo::<f64>(&[], &cfg).is_err());
        for bpm in [60.0, 90.0, 120.0, 150.0] {
            let b = bin_of_frequency(&cfg, bpm / 60.0).unwrap();
            let mut s = vec![0.0; 121];
            s[b] = 1.0;
            let est = estimate_tempo(&s, &cfg).unwrap();
            assert_eq!(bin_of_frequency(&cfg, est / 60.0).unwrap(), b);
        }
    }

    #[test]
    fn masking_keeps_surviving_bins_exactly() {
        let (rg, _, _) = setup(120.0, 0.15, 1);
        let m = mask_octave(&rg, 48, Beats::from_integer(1)).unwrap();
        for ((c, j, k), v) in m.coeffs.indexed_iter() {
            if (36..=60).contains(&k) {
                assert_eq!(v.re.to_bits(), rg.coeffs[[c, j, k]].re.to_bits());
                assert_eq!(v.im.to_bits(), rg.coeffs[[c, j, k]].im.to_bits());
            } else {
                assert_eq!(*v, Complex::new(0.0, 0.0));
            }
        }
        assert_eq!(mask_octave(&rg, 60, Beats::from_integer(12)).unwrap(), rg);
        let mut one = Rhythmogram::<f64>::zeros(1, 2, &CqtConfig::default());
        one.coeffs[[0, 1, 5]] = Complex::new(1.0, 0.0);
        assert!(mask_octave(&one, 100, Beats::from_integer(1)).unwrap().coeffs.iter().all(|c| c.norm() == 0.0));
        assert!(mask_octave(&one, 121, Beats::from_integer(1)).is_err());
    }

    #[test]
    fn noiseless_beats_match_the_grid() {
        let (rg, kernel, ann) = setup(120.0, 0.0, 0);
        let grid = track_beats(&rg, 48, &kernel).unwrap();
        let end = ann.beat_times.last().unwrap() - 1.0;
        let sc = evaluate_beats_between(&grid.times, &ann.beat_times, 0.07, 1.0, end).unwrap();
        assert_eq!(sc.f_measure, 1.0, "{sc:?} {:?}", grid.times);
        let inner: Vec<f64> = grid.times.iter().copied().filter(|&t| t > 1.0 && t < end).collect();
        assert!(inner.windows(2).all(|w| ((w[1] - w[0]) - 0.5).abs() <= 0.05));
        assert!(grid.low_confidence[0] && !grid.low_confidence[grid.len() / 2]);
        let same = track_downbeats(&rg, 48, &kernel).unwrap();
        assert_eq!(same.times, grid.times);
    }

    #[test]
    fn downbeats_follow_the_measure() {
        let cfg = RenderConfig::default();
        let (ch, ann) = render::<f64>(&accented_pattern(), &cfg).unwrap();
        let kernel = cqt::plan(&CqtConfig::default(), ch.n_frames()).unwrap();
        let rg = cqt::forward(&ch, &kernel).unwrap();
        let grid = track_downbeats(&rg, 0, &kernel).unwrap();
        let end = ann.beat_times.last().unwrap() - 4.0;
        let sc = evaluate_beats_between(&grid.times, &ann.downbeat_times, 0.07, 4.0, end).unwrap();
        assert_eq!(sc.f_measure, 1.0, "{sc:?} {:?}", grid.times);
    }

    #[test]
    fn downbeats_on_beats_survive_noise() {
        let cfg = RenderConfig { tempo_bpm: 140.0, noise_level: 0.15, rng_seed: 3, ..RenderConfig::default() };
        let (ch, ann) = render::<f64>(&accented_pattern(), &cfg).unwrap();
        let cqt_cfg = CqtConfig::default();
        let kernel = cqt::plan(&cqt_cfg, ch.n_frames()).unwrap();
        let rg = cqt::forward(&ch, &kernel).unwrap();
        let beats = track_beats(&rg, bin_of_frequency(&cqt_cfg, 140.0 / 60.0).unwrap(), &kernel).unwrap();
        let measure = bin_of_frequency(&cqt_cfg, 140.0 / 240.0).unwrap();
        let opts = TrackOptions::default();
        let grid = track_downbeats_on_beats(&rg, measure, &beats, 4, &kernel, &opts).unwrap();
        assert_eq!(grid.level, GridLevel::Downbeat);
        let end = ch.duration_secs() - 4.0;
        let sc = evaluate_beats_between(&grid.times, &ann.downbeat_times, 0.07, 4.0, end).unwrap();
        assert_eq!(sc.f_measure, 1.0, "{sc:?}");
        assert!(track_downbeats_on_beats(&rg, measure, &beats, 0, &kernel, &opts).is_err());
        assert!(track_downbeats_on_beats(&rg, measure, &grid, 4, &kernel, &opts).is_err());
        let none = BeatGrid::new(Vec::new(), GridLevel::Beat).unwrap();
        assert!(track_downbeats_on_beats(&rg, measure, &none, 4, &kernel, &opts).unwrap().is_empty());
    }

    #[test]
    fn silent_input_gives_empty_grid() {
        let ch = ActivationChannels::new(Array2::<f64>::zeros((2, 1200)), 100.0, vec!["a".into(), "b".into()]).unwrap();
        let kernel = cqt::plan(&CqtConfig::default(), 1200).unwrap();
        let rg = cqt::forward(&ch, &kernel).unwrap();
        assert!(track_beats(&rg, 48, &kernel).unwrap().is_empty());
        assert!(track_downbeats(&rg, 0, &kernel).unwrap().is_empty());
    }

    #[test]
    fn peak_picking() {
        let x = [0.0, 1.0, 0.0, 0.2, 0.0, 0.9, 0.95, 0.0];
        assert_eq!(pick_peaks(&x, 0.3, 2.0).len(), 2);
        assert!(pick_peaks(&[0.0; 5], 0.3, 1.0).is_empty());
        let p = pick_peaks(&[0.0, 1.0, 1.0, 0.0], 0.0, 1.0);
        assert_eq!(p, vec![1.5]);
    }

    #[test]
    fn evaluation_rules() {
        let r = [1.0, 2.0, 3.0];
        assert_eq!(evaluate_beats(&r, &r, 0.07).unwrap().f_measure, 1.0);
        assert_eq!(evaluate_beats(&[], &r, 0.07).unwrap().f_measure, 0.0);
        let shifted: Vec<f64> = r.iter().map(|t| t + 0.07 + 1e-9).collect();
        assert_eq!(evaluate_beats(&shifted, &r, 0.07).unwrap().f_measure, 0.0);
        let sc = evaluate_beats(&[1.0, 1.01, 3.0], &r, 0.07).unwrap();
        assert_eq!((sc.matched, sc.precision), (2, 2.0 / 3.0));
        assert!(evaluate_beats(&r, &r, 0.0).is_err());
    }

    #[test]
    fn uniform_targets_peak_at_two_hertz() {
        let kernel = cqt::plan::<f64>(&CqtConfig::default(), 3000).unwrap();
        let ann: Vec<f64> = (0..60).map(|i| i as f64 * 0.5).collect();
        let ta = make_targets(&ann, &kernel).unwrap();
        let frames = interior_frames(&kernel);
        assert!(frames.len() > 50);
        for j in frames.clone() {
            assert_eq!(ta.argmax_bins()[j], 48, "frame {j}");
        }
        assert!(ta.magnitudes.iter().all(|&m| (0.0..=1.0).contains(&m)));
        assert!(make_targets(&ann[..1], &kernel).is_err());
        assert!(ta.phase_mask(0.5).iter().any(|&b| b));

        // Shifting the annotations by three hops moves the frames by three;
        // at a fixed frame the 2 Hz phase turns by 2 pi * 2 * 0.3.
        let shifted: Vec<f64> = ann.iter().map(|t| t + 0.3).collect();
        let tb = make_targets(&shifted, &kernel).unwrap();
        // Frames whose whole FFT segment lies inside both signals.
        let half_segment = kernel.frame_len() as f64 / 200.0;
        let first = kernel.frame_at(half_segment + 0.05);
        let last = kernel.frame_at(30.0 - half_segment - 0.35);
        for j in first..last {
            for k in 0..121 {
                let d = (ta.magnitudes[[j, k]] - tb.magnitudes[[j + 3, k]]).abs();
                assert!(d < 1e-6, "frame {j} bin {k}: {d}");
            }
            let same = crate::phasefeat::phase_alignment(ta.phases[[j, 48]], tb.phases[[j + 3, 48]]).unwrap();
            assert!(same < 1e-6);
            let turned = crate::phasefeat::phase_alignment(ta.phases[[j, 48]], tb.phases[[j, 48]]).unwrap();
            // The sparse kernel's dropped spectral entries leave a tiny phase error.
            assert!((turned - 0.8 * std::f64::consts::PI).abs() < 1e-5, "{turned}");
        }
    }

    #[test]
    fn tempo_drift_moves_the_target_peak() {
        let kernel = cqt::plan::<f64>(&CqtConfig::default(), 4000).unwrap();
        let mut ann = vec![0.0];
        while *ann.last().unwrap() < 40.0 {
            let t: f64 = *ann.last().unwrap();
            let bpm = 110.0 + 20.0 * t / 40.0;
            ann.push(t + 60.0 / bpm);
        }
        let ta = make_targets(&ann, &kernel).unwrap();
        let bins: Vec<usize> = ta.argmax_bins()[interior_frames(&kernel)].to_vec();
        assert!(bins.windows(2).all(|w| w[1] >= w[0]), "{bins:?}");
        let lo = bin_of_frequency(&CqtConfig::default(), 110.0 / 60.0).unwrap();
        let hi = bin_of_frequency(&CqtConfig::default(), 130.0 / 60.0).unwrap();
        assert!(bins[0] >= lo && *bins.last().unwrap() <= hi && bins.last() > bins.first());
    }

    fn fingerprint_model() -> ModelParams<f64> {
        ModelParams::init(&fingerprint_architecture(3, &CqtConfig::default()), 7).unwrap()
    }

    #[test]
    fn tempo_dataset_is_labelled_and_reproducible() {
        let cfg = CqtConfig::default();
        let data = TempoDataConfig { n_examples: 3, duration_secs: 12.0, ..TempoDataConfig::default() };
        let a = synthetic_tempo_dataset::<f64>(&pattern_corpus(), &data, &cfg).unwrap();
        let b = synthetic_tempo_dataset::<f64>(&pattern_corpus(), &data, &cfg).unwrap();
        assert_eq!(a, b);
        for (x, label) in &a {
            assert_eq!(x.dim(), (6, 3, 1, 121));
            let bpm = 60.0 * cfg.bin_frequency(*label);
            assert!((70.0..=186.0).contains(&bpm), "{bpm}");
            assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let model = ModelParams::<f64>::init(&tempo_architecture(3, &cfg, 25, 8), 0).unwrap();
        assert_eq!(model.bin_offset(), 12);
        let scores = tempo_scores(&model, &a[0].0, 121).unwrap();
        assert_eq!(scores.len(), 121);
        assert!(scores[..12].iter().all(|v| *v == f64::NEG_INFINITY));
    }

    #[test]
    fn fingerprints_survive_time_scaling() {
        let model = fingerprint_model();
        let cfg = CqtConfig::default();
        let (ch, _) = render::<f64>(&standard_pattern(), &RenderConfig::default()).unwrap();
        let base = fingerprint(&ch, &cfg, &model).unwrap();
        for r in [Beats::new(2, 3), Beats::new(3, 4), Beats::new(4, 3)] {
            let scaled = fingerprint(&crate::rhythmgen::time_scale(&ch, r).unwrap(), &cfg, &model).unwrap();
            let c = cosine_similarity(&base.values, &scaled.values).unwrap();
            assert!(c >= 0.98, "ratio {r}: {c}");
        }
    }

    #[test]
    fn fingerprints_do_not_see_time_reversal() {
        // Reversal negates every phase difference and alignment keeps only
        // its size, so a pattern and its mirror image pool to the same values.
        let model = fingerprint_model();
        let cfg = CqtConfig::default();
        let fp = |p: &DrumPattern| fingerprint(&render::<f64>(p, &RenderConfig::default()).unwrap().0, &cfg, &model).unwrap();
        for p in pattern_corpus().iter().take(4) {
            let c = cosine_similarity(&fp(p).values, &fp(&p.reversed()).values).unwrap();
            assert!(c > 0.9999, "{c}");
        }
    }

    #[test]
    fn fingerprints_and_matching() {
        let model = fingerprint_model();
        let cfg = CqtConfig::default();
        let fp = |bpm: f64| {
            let (ch, _) = render::<f64>(&standard_pattern(), &RenderConfig { tempo_bpm: bpm, ..RenderConfig::default() }).unwrap();
            fingerprint(&ch, &cfg, &model).unwrap()
        };
        let a = fp(120.0);
        let b = fp(80.0);
        assert_eq!(a, fp(120.0));
        assert_eq!(a.values.len(), FINGERPRINT_FILTERS * 3);
        assert!(cosine_similarity(&a.values, &b.values).unwrap() >= 0.98);

        let hits = match_fingerprints(&a, &[b.clone(), a.clone()], 2).unwrap();
        assert_eq!(hits[0].index, 1);
        assert!(match_fingerprints(&a, std::slice::from_ref(&b), 0).unwrap().is_empty());
        let foreign = Fingerprint { model_hash: "other".into(), ..b };
        assert!(match_fingerprints(&a, &[foreign], 1).is_err());
    }
}
