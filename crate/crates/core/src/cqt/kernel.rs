use std::sync::Arc;

use ndarray::{Array2, Axis};
use num_complex::Complex;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use super::{CqtConfig, Rhythmogram};
use crate::error::{Error, Result};
use crate::rhythmgen::ActivationChannels;
use crate::scalar::Real;

/// Spectral entries below this fraction of an atom's peak are dropped.
const SPARSITY_THRESHOLD: f64 = 1e-4;

/// Default regularization of the synthesis normalization, relative to the
/// peak gain. Frequencies whose gain falls below it (DC, far out of band) are
/// attenuated instead of amplified. It has to be small because at the default
/// hop the top bins are sampled below their bandwidth and only the combination
/// of neighboring bins carries that content; single precision cannot go as low.
pub fn default_regularization<T: Real>() -> f64 {
    T::epsilon().to_f64_lossy().sqrt().max(1e-6)
}

#[derive(Debug, Clone)]
struct SparseAtom<T> {
    freq: f64,
    window_len: usize,
    /// `(dft index, weight)`; a bin's coefficient is `sum(weight * SEG[index])`.
    entries: Vec<(usize, Complex<T>)>,
}

/// Precomputed transform for one configuration and one signal length.
#[derive(Clone)]
pub struct CqtKernel<T: Real> {
    config: CqtConfig,
    signal_len: usize,
    n_frames: usize,
    /// Frames whose center lies before the first sample.
    lead_frames: usize,
    frame_len: usize,
    atoms: Vec<SparseAtom<T>>,
    fft: Arc<dyn Fft<T>>,
    ifft: Arc<dyn Fft<T>>,
    norm_len: usize,
    norm_fft: Arc<dyn Fft<T>>,
    norm_ifft: Arc<dyn Fft<T>>,
    /// Analysis-synthesis operator in the Fourier domain: one `hop x hop`
    /// block per residue class of the `norm_len` grid, row-major, coupling
    /// each frequency with its aliases at multiples of the frame rate.
    gram: Vec<Complex<f64>>,
    gram_peak: f64,
    /// Regularized inverse of `gram` at [`default_regularization`].
    dual: Vec<Complex<T>>,
}

impl<T: Real> std::fmt::Debug for CqtKernel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CqtKernel")
            .field("config", &self.config)
            .field("signal_len", &self.signal_len)
            .field("n_frames", &self.n_frames)
            .field("frame_len", &self.frame_len)
            .field("n_bins", &self.atoms.len())
            .finish()
    }
}

impl<T: Real> CqtKernel<T> {
    pub fn config(&self) -> &CqtConfig {
        &self.config
    }

    /// Signal length (in activation frames) this kernel was planned for.
    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    /// Number of analysis frames produced per channel.
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    /// See [`CqtConfig::lead_frames`].
    pub fn lead_frames(&self) -> usize {
        self.lead_frames
    }

    /// Center of frame `j` in seconds (negative for lead-in frames).
    pub fn frame_time(&self, j: usize) -> f64 {
        self.config.frame_time(j)
    }

    pub fn frame_times(&self) -> Vec<f64> {
        (0..self.n_frames).map(|j| self.frame_time(j)).collect()
    }

    /// Index of the frame whose center is nearest to `t` seconds.
    pub fn frame_at(&self, t: f64) -> usize {
        let j = (t * self.config.signal_rate_hz / self.config.hop_frames as f64).round() + self.lead_frames as f64;
        j.clamp(0.0, (self.n_frames - 1) as f64) as usize
    }

    /// FFT length of one analysis segment.
    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn n_bins(&self) -> usize {
        self.atoms.len()
    }

    pub fn bin_freqs(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.freq).collect()
    }

    pub fn window_lengths(&self) -> Vec<usize> {
        self.atoms.iter().map(|a| a.window_len).collect()
    }

    /// Number of stored spectral weights per bin.
    pub fn atom_support(&self) -> Vec<usize> {
        self.atoms.iter().map(|a| a.entries.len()).collect()
    }

    /// Time-domain synthesis atom of `bin`, indexed by offset from the frame center.
    pub fn atom(&self, bin: usize) -> Vec<(isize, Complex<T>)> {
        let l = self.frame_len;
        let mut buf = vec![Complex::new(T::zero(), T::zero()); l];
        for &(j, w) in &self.atoms[bin].entries {
            buf[j] = w.conj();
        }
        self.ifft.process(&mut buf);
        (0..l)
            .map(|i| {
                let off = if i < l / 2 { i as isize } else { i as isize - l as isize };
                (off, buf[i])
            })
            .collect()
    }

    fn center(&self, frame: usize) -> isize {
        (frame as isize - self.lead_frames as isize) * self.config.hop_frames as isize
    }
}

fn hann(offset: isize, len: usize) -> f64 {
    0.5 + 0.5 * (std::f64::consts::TAU * offset as f64 / len as f64).cos()
}

/// Builds the sparse kernel for signals of exactly `n_signal` frames.
pub fn plan<T: Real>(config: &CqtConfig, n_signal: usize) -> Result<CqtKernel<T>> {
    config.validate()?;
    let longest = config.longest_window();
    if n_signal < longest {
        return Err(Error::TooShort { needed: longest, got: n_signal });
    }
    let frame_len = longest.next_power_of_two();
    let mut planner = FftPlanner::<T>::new();
    let fft = planner.plan_fft_forward(frame_len);
    let ifft = planner.plan_fft_inverse(frame_len);

    let rate = config.signal_rate_hz;
    let atoms: Vec<SparseAtom<T>> = (0..config.n_bins())
        .map(|k| {
            let freq = config.bin_frequency(k);
            let len = config.window_len(k);
            let half = (len / 2) as isize;
            let offsets = -half..(len as isize - half);
            // Unit-gain atoms: a sinusoid has the same magnitude in whichever
            // bin it falls, and time scaling only shifts magnitudes across bins.
            let norm: f64 = offsets.clone().map(|n| hann(n, len)).sum::<f64>();

            // Analysis atom conj(a[n]), a[n] = w[n]/sum(w) * exp(i 2 pi f n / rate),
            // written at index n mod L so that offset 0 is the frame center.
            let mut buf = vec![Complex::new(T::zero(), T::zero()); frame_len];
            for n in offsets {
                let w = hann(n, len) / norm;
                let ph = -std::f64::consts::TAU * freq * n as f64 / rate;
                let idx = n.rem_euclid(frame_len as isize) as usize;
                buf[idx] = Complex::new(T::lit(w * ph.cos()), T::lit(w * ph.sin()));
            }
            // X = sum_m seg[m] b[m] with b = conj(a) equals (1/L) sum_j SEG[j] B[j],
            // where B is the unnormalized inverse DFT of b.
            ifft.process(&mut buf);
            let scale = T::one() / T::from_usize_lossy(frame_len);
            let peak = buf.iter().map(|c| c.norm()).fold(T::zero(), T::max);
            let cut = peak * T::lit(SPARSITY_THRESHOLD);
            let entries = buf
                .iter()
                .enumerate()
                .filter(|(_, c)| c.norm() > cut)
                .map(|(j, c)| (j, *c * scale))
                .collect();
            SparseAtom { freq, window_len: len, entries }
        })
        .collect();

    let hop = config.hop_frames;
    let lead_frames = config.lead_frames();
    let n_frames = config.n_frames_for(n_signal);
    let synth_span = (n_frames - 1) * hop + frame_len;
    let norm_len = hop * (2 * synth_span).div_ceil(hop).next_power_of_two();
    let norm_fft = planner.plan_fft_forward(norm_len);
    let norm_ifft = planner.plan_fft_inverse(norm_len);

    let mut kernel = CqtKernel {
        config: config.clone(),
        signal_len: n_signal,
        n_frames,
        lead_frames,
        frame_len,
        atoms,
        fft,
        ifft,
        norm_len,
        norm_fft,
        norm_ifft,
        gram: Vec::new(),
        gram_peak: 0.0,
        dual: Vec::new(),
    };
    let (gram, peak) = gram_blocks(&kernel);
    kernel.gram = gram;
    kernel.gram_peak = peak;
    kernel.dual = dual_blocks(&kernel, default_regularization::<T>());
    Ok(kernel)
}

/// Builds the block-diagonal Fourier representation of the analysis-synthesis
/// operator `A` (frames assumed to tile the whole line) and its largest
/// diagonal entry.
///
/// With frame centers every `hop` samples, `A` maps frequency `w` onto
/// `w + 2 pi m / hop` for every integer `m`, so on a DFT grid of length `P`
/// (a multiple of `hop`) index `q` only couples with `q + m P / hop`.
fn gram_blocks<T: Real>(kernel: &CqtKernel<T>) -> (Vec<Complex<f64>>, f64) {
    let p = kernel.norm_len;
    let hop = kernel.config.hop_frames;
    let stride = p / hop;
    let zero = Complex::new(0.0f64, 0.0);
    // blocks[r][out][in]
    let mut blocks = vec![zero; p * hop];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); p];
    let mut spec = vec![zero; p];
    for bin in 0..kernel.n_bins() {
        buf.iter_mut().for_each(|c| *c = Complex::new(T::zero(), T::zero()));
        for (off, a) in kernel.atom(bin) {
            buf[off.rem_euclid(p as isize) as usize] = a;
        }
        kernel.norm_fft.process(&mut buf);
        for (d, c) in spec.iter_mut().zip(&buf) {
            *d = Complex::new(c.re.to_f64_lossy(), c.im.to_f64_lossy());
        }
        for r in 0..stride {
            let block = &mut blocks[r * hop * hop..(r + 1) * hop * hop];
            for li in 0..hop {
                let qi = r + li * stride;
                let ai = spec[qi];
                let ai_neg = spec[(p - qi) % p];
                if ai.norm_sqr() == 0.0 && ai_neg.norm_sqr() == 0.0 {
                    continue;
                }
                for lo in 0..hop {
                    let qo = r + lo * stride;
                    block[lo * hop + li] += ai.conj() * spec[qo] + ai_neg * spec[(p - qo) % p].conj();
                }
            }
        }
    }
    let scale = 1.0 / (2.0 * hop as f64);
    blocks.iter_mut().for_each(|b| *b *= scale);

    let peak = (0..stride)
        .flat_map(|r| (0..hop).map(move |i| (r, i)))
        .map(|(r, i)| blocks[r * hop * hop + i * hop + i].re)
        .fold(0.0, f64::max);
    (blocks, peak)
}

/// `A (A^2 + eps^2)^-1` per block, with `eps = floor * peak gain`.
fn dual_blocks<T: Real>(kernel: &CqtKernel<T>, floor: f64) -> Vec<Complex<T>> {
    let p = kernel.norm_len;
    let hop = kernel.config.hop_frames;
    let stride = p / hop;
    let eps2 = (kernel.gram_peak * floor).powi(2);
    let mut dual = Vec::with_capacity(p * hop);
    for r in 0..stride {
        let m = &kernel.gram[r * hop * hop..(r + 1) * hop * hop];
        let mut normal = matmul(m, m, hop);
        for i in 0..hop {
            normal[i * hop + i] += eps2;
        }
        let sol = solve(normal, m.to_vec(), hop);
        dual.extend(sol.iter().map(|c| Complex::new(T::lit(c.re), T::lit(c.im))));
    }
    dual
}

fn matmul(a: &[Complex<f64>], b: &[Complex<f64>], n: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::new(0.0, 0.0); n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Solves `a x = b` for square `n x n` matrices by Gaussian elimination with
/// partial pivoting.
fn solve(mut a: Vec<Complex<f64>>, mut b: Vec<Complex<f64>>, n: usize) -> Vec<Complex<f64>> {
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].norm().total_cmp(&a[j * n + col].norm()))
            .unwrap_or(col);
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
                b.swap(col * n + j, piv * n + j);
            }
        }
        let d = a[col * n + col];
        if d.norm() == 0.0 {
            continue;
        }
        for row in col + 1..n {
            let f = a[row * n + col] / d;
            if f.norm() == 0.0 {
                continue;
            }
            for j in col..n {
                let v = a[col * n + j];
                a[row * n + j] -= f * v;
            }
            for j in 0..n {
                let v = b[col * n + j];
                b[row * n + j] -= f * v;
            }
        }
    }
    for col in (0..n).rev() {
        let d = a[col * n + col];
        for j in 0..n {
            let mut acc = b[col * n + j];
            for k in col + 1..n {
                acc -= a[col * n + k] * b[k * n + j];
            }
            b[col * n + j] = if d.norm() == 0.0 { Complex::new(0.0, 0.0) } else { acc / d };
        }
    }
    b
}

fn check_input<T: Real>(channels: &ActivationChannels<T>, kernel: &CqtKernel<T>) -> Result<()> {
    let expected = kernel.config.signal_rate_hz;
    if (channels.signal_rate_hz - expected).abs() > 1e-9 * expected {
        return Err(Error::RateMismatch { expected, got: channels.signal_rate_hz });
    }
    if channels.n_frames() != kernel.signal_len {
        return Err(Error::Shape(format!(
            "kernel planned for {} frames, signal has {}",
            kernel.signal_len,
            channels.n_frames()
        )));
    }
    if channels.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("activation channels"));
    }
    Ok(())
}

/// Analysis of one real signal into `frames x bins` coefficients.
fn analyze_signal<T: Real>(x: &[T], kernel: &CqtKernel<T>, out: &mut ndarray::ArrayViewMut2<Complex<T>>) {
    let l = kernel.frame_len as isize;
    let n = x.len() as isize;
    let zero = Complex::new(T::zero(), T::zero());
    let mut seg = vec![zero; kernel.frame_len];
    let mut scratch = vec![zero; kernel.fft.get_inplace_scratch_len()];
    for j in 0..kernel.n_frames {
        let c = kernel.center(j);
        for m in -l / 2..l / 2 {
            let t = c + m;
            let v = if (0..n).contains(&t) { x[t as usize] } else { T::zero() };
            seg[m.rem_euclid(l) as usize] = Complex::new(v, T::zero());
        }
        kernel.fft.process_with_scratch(&mut seg, &mut scratch);
        for (k, atom) in kernel.atoms.iter().enumerate() {
            let mut acc = zero;
            for &(idx, w) in &atom.entries {
                acc += seg[idx] * w;
            }
            out[[j, k]] = acc;
        }
    }
}

/// Adjoint of [`analyze_signal`] under the real inner product, evaluated on
/// the whole frame span (not truncated to the signal) and laid out on the
/// circular normalization grid: sample `t` lives at index `t mod P`.
fn synthesize_signal<T: Real>(coeffs: &ndarray::ArrayView2<Complex<T>>, kernel: &CqtKernel<T>) -> Vec<T> {
    let l = kernel.frame_len as isize;
    let p = kernel.norm_len as isize;
    let zero = Complex::new(T::zero(), T::zero());
    let mut y = vec![T::zero(); kernel.norm_len];
    let mut spec = vec![zero; kernel.frame_len];
    let mut scratch = vec![zero; kernel.ifft.get_inplace_scratch_len()];
    for j in 0..kernel.n_frames {
        spec.iter_mut().for_each(|s| *s = zero);
        let mut any = false;
        for (k, atom) in kernel.atoms.iter().enumerate() {
            let x = coeffs[[j, k]];
            if x == zero {
                continue;
            }
            any = true;
            for &(idx, w) in &atom.entries {
                spec[idx] += w.conj() * x;
            }
        }
        if !any {
            continue;
        }
        kernel.ifft.process_with_scratch(&mut spec, &mut scratch);
        let c = kernel.center(j);
        for m in -l / 2..l / 2 {
            y[(c + m).rem_euclid(p) as usize] += spec[m.rem_euclid(l) as usize].re;
        }
    }
    y
}

/// Applies the regularized inverse of the analysis-synthesis operator.
fn normalize<T: Real>(y: &[T], kernel: &CqtKernel<T>, dual: &[Complex<T>]) -> Vec<T> {
    debug_assert_eq!(y.len(), kernel.norm_len);
    let p = kernel.norm_len;
    let hop = kernel.config.hop_frames;
    let stride = p / hop;
    let zero = Complex::new(T::zero(), T::zero());
    let mut buf = vec![zero; p];
    for (b, &v) in buf.iter_mut().zip(y) {
        *b = Complex::new(v, T::zero());
    }
    kernel.norm_fft.process(&mut buf);
    let scale = T::one() / T::from_usize_lossy(p);
    let mut out = vec![zero; p];
    for r in 0..stride {
        let block = &dual[r * hop * hop..(r + 1) * hop * hop];
        for lo in 0..hop {
            let mut acc = zero;
            for li in 0..hop {
                acc += block[lo * hop + li] * buf[r + li * stride];
            }
            out[r + lo * stride] = acc * scale;
        }
    }
    kernel.norm_ifft.process(&mut out);
    out[..kernel.signal_len].iter().map(|c| c.re).collect()
}

/// Forward transform of every channel. Each channel's mean is removed first.
pub fn forward<T: Real>(channels: &ActivationChannels<T>, kernel: &CqtKernel<T>) -> Result<Rhythmogram<T>> {
    check_input(channels, kernel)?;
    let mut rg = Rhythmogram::zeros(channels.n_channels(), kernel.n_frames, &kernel.config);
    rg.frame_times = kernel.frame_times();
    rg.coeffs
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(channels.data.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut out, row)| {
            let n = T::from_usize_lossy(row.len());
            let mean = row.iter().copied().sum::<T>() / n;
            let x: Vec<T> = row.iter().map(|&v| v - mean).collect();
            analyze_signal(&x, kernel, &mut out);
        });
    Ok(rg)
}

/// Reconstructs activation signals by conjugate-atom synthesis followed by
/// the regularized inverse of the analysis-synthesis operator.
///
/// For coefficients produced by [`forward`] this recovers the mean-removed
/// input up to the regularization bias, which is negligible in band.
pub fn inverse<T: Real>(rg: &Rhythmogram<T>, kernel: &CqtKernel<T>) -> Result<ActivationChannels<T>> {
    reconstruct(rg, kernel, &kernel.dual)
}

/// [`inverse`] with a caller-chosen regularization floor (relative to the
/// peak gain). Larger floors trade exactness for robustness when the
/// coefficients have been edited, e.g. masked to a band: content that the
/// transform barely sees is then damped instead of amplified.
pub fn inverse_regularized<T: Real>(
    rg: &Rhythmogram<T>,
    kernel: &CqtKernel<T>,
    floor: f64,
) -> Result<ActivationChannels<T>> {
    if !(floor.is_finite() && floor > 0.0) {
        return Err(crate::error::invalid(format!("regularization floor must be positive, got {floor}")));
    }
    if floor == default_regularization::<T>() {
        return inverse(rg, kernel);
    }
    reconstruct(rg, kernel, &dual_blocks(kernel, floor))
}

fn reconstruct<T: Real>(
    rg: &Rhythmogram<T>,
    kernel: &CqtKernel<T>,
    dual: &[Complex<T>],
) -> Result<ActivationChannels<T>> {
    if rg.n_frames() != kernel.n_frames || rg.n_bins() != kernel.n_bins() {
        return Err(Error::Shape(format!(
            "rhythmogram is {}x{} (frames x bins), kernel expects {}x{}",
            rg.n_frames(),
            rg.n_bins(),
            kernel.n_frames,
            kernel.n_bins()
        )));
    }
    let rows: Vec<Vec<T>> = rg
        .coeffs
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|c| normalize(&synthesize_signal(&c, kernel), kernel, dual))
        .collect();
    let mut data = Array2::<T>::zeros((rows.len(), kernel.signal_len));
    for (mut dst, src) in data.outer_iter_mut().zip(rows) {
        dst.assign(&ndarray::Array1::from(src));
    }
    let names = (0..rg.n_channels()).map(|c| format!("ch{c}")).collect();
    Ok(ActivationChannels {
        data,
        signal_rate_hz: kernel.config.signal_rate_hz,
        channel_names: names,
    })
}

/// Transform of a single signal without mean removal, `frames x bins`.
pub fn analyze_real<T: Real>(x: &[T], kernel: &CqtKernel<T>) -> Array2<Complex<T>> {
    let mut out = Array2::from_elem((kernel.n_frames, kernel.n_bins()), Complex::new(T::zero(), T::zero()));
    analyze_signal(x, kernel, &mut out.view_mut());
    out
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::cqt::bin_of_frequency;
    use crate::rhythmgen::{render, standard_pattern, RenderConfig};
    use std::f64::consts::TAU;

    fn channels(rows: Vec<Vec<f64>>) -> ActivationChannels<f64> {
        let n = rows[0].len();
        let names = (0..rows.len()).map(|i| format!("c{i}")).collect();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        ActivationChannels::new(Array2::from_shape_vec((flat.len() / n, n), flat).unwrap(), 100.0, names).unwrap()
    }

    fn cosine(f: f64, n: usize, t0: f64) -> Vec<f64> {
        (0..n).map(|i| (TAU * f * (i as f64 / 100.0 - t0)).cos()).collect()
    }

    #[test]
    fn frame_grid_extends_past_signal() {
        let cfg = CqtConfig::default();
        let k: CqtKernel<f64> = plan(&cfg, 1000).unwrap();
        assert_eq!(k.lead_frames(), 40);
        assert_eq!(k.n_frames(), 99 + 2 + 80);
        assert!((k.frame_time(0) + 4.0).abs() < 1e-12);
        assert_eq!(k.frame_time(40), 0.0);
        assert_eq!(k.frame_at(0.0), 40);
        assert_eq!(k.frame_at(2.04), 60);
        assert!(k.frame_time(k.n_frames() - 1) >= 9.99 + 4.0);
        assert!(matches!(plan::<f64>(&cfg, 799), Err(Error::TooShort { needed: 800, .. })));
    }

    #[test]
    fn sinusoid_peaks_at_its_bin_with_centered_phase() {
        let cfg = CqtConfig::default();
        let n = 3000;
        let k = plan(&cfg, n).unwrap();
        let rg = forward(&channels(vec![cosine(2.0, n, 0.0)]), &k).unwrap();
        let bin = bin_of_frequency(&cfg, 2.0).unwrap();
        // Frame at 15 s sits on a crest.
        let j = k.frame_at(15.0);
        let row = rg.coeffs.slice(ndarray::s![0, j, ..]);
        let argmax = (0..row.len()).max_by(|&a, &b| row[a].norm().total_cmp(&row[b].norm())).unwrap();
        assert_eq!(argmax, bin);
        assert!(row[bin].arg().abs() < 1e-3, "phase {}", row[bin].arg());
        // A quarter period later the phase has advanced by pi/2.
        let rg = forward(&channels(vec![cosine(2.0, n, -0.125)]), &k).unwrap();
        let phi = rg.coeffs[[0, j, bin]].arg();
        assert!((phi - std::f64::consts::FRAC_PI_2).abs() < 1e-3, "phase {phi}");
    }

    #[test]
    fn zero_and_linearity_are_exact() {
        let cfg = CqtConfig::default();
        let n = 1200;
        let k = plan(&cfg, n).unwrap();
        let rg = forward(&channels(vec![vec![0.0; n]]), &k).unwrap();
        assert!(rg.coeffs.iter().all(|c| c.norm() == 0.0));
        assert!(inverse(&rg, &k).unwrap().data.iter().all(|&v| v == 0.0));

        let x: Vec<f64> = (0..n).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let a = forward(&channels(vec![x.clone()]), &k).unwrap();
        let b = forward(&channels(vec![x.iter().map(|v| v * 4.0).collect()]), &k).unwrap();
        for (p, q) in a.coeffs.iter().zip(b.coeffs.iter()) {
            assert_eq!(*p * 4.0, *q);
        }
    }

    #[test]
    fn band_limited_round_trip() {
        let cfg = CqtConfig::default();
        let n = 4000;
        let k = plan(&cfg, n).unwrap();
        for f in [0.6, 1.3, 2.0, 5.0, 9.5, 14.0] {
            // A slow Hann taper keeps the test signal inside the band.
            let x: Vec<f64> = cosine(f, n, 0.37)
                .iter()
                .enumerate()
                .map(|(i, v)| v * (0.5 - 0.5 * (TAU * i as f64 / n as f64).cos()))
                .collect();
            let mean = x.iter().sum::<f64>() / n as f64;
            let y = inverse(&forward(&channels(vec![x.clone()]), &k).unwrap(), &k).unwrap();
            let err: f64 = x.iter().zip(y.data.row(0)).map(|(a, b)| (a - mean - b).powi(2)).sum();
            let norm: f64 = x.iter().map(|a| (a - mean).powi(2)).sum();
            assert!((err / norm).sqrt() <= 1e-3, "f={f}: {}", (err / norm).sqrt());
        }
    }

    #[test]
    fn single_coefficient_inverts_to_windowed_cosine() {
        let cfg = CqtConfig::default();
        let n = 3000;
        let k = plan(&cfg, n).unwrap();
        let mut rg = Rhythmogram::<f64>::zeros(1, k.n_frames(), &cfg);
        let bin = 48;
        let j = k.frame_at(15.0);
        rg.coeffs[[0, j, bin]] = Complex::new(1.0, 0.0);
        // The exact dual of a lone atom is dominated by barely-observed
        // out-of-band content; a damped inverse shows the atom itself.
        let y = inverse_regularized(&rg, &k, 1e-2).unwrap();
        let y = y.data.row(0);
        let len = cfg.window_len(bin) as isize;
        let oracle: Vec<f64> = (0..n as isize)
            .map(|t| {
                let off = t - 1500;
                if off.abs() > len / 2 {
                    0.0
                } else {
                    hann(off, len as usize) * (TAU * 2.0 * off as f64 / 100.0).cos()
                }
            })
            .collect();
        let dot: f64 = oracle.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let na: f64 = oracle.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = y.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(dot / (na * nb) > 0.95, "correlation {}", dot / (na * nb));
        let peak = (0..n).max_by(|&a, &b| y[a].total_cmp(&y[b])).unwrap();
        assert_eq!(peak, 1500);
    }

    #[test]
    fn standard_pattern_responds_at_beat_level() {
        let cfg = CqtConfig::default();
        let (ch, _) = render::<f64>(&standard_pattern(), &RenderConfig::default()).unwrap();
        let k = plan(&cfg, ch.n_frames()).unwrap();
        let mag = forward(&ch, &k).unwrap().magnitudes();
        let (lo, hi) = (k.frame_at(4.0), k.frame_at(ch.duration_secs() - 4.0));
        let mean = |c: usize, b: usize| (lo..=hi).map(|j| mag[[c, j, b]]).sum::<f64>() / (hi - lo + 1) as f64;
        let beat = bin_of_frequency(&cfg, 2.0).unwrap();
        let hihat = mean(2, beat);
        for c in 0..2 {
            let peak = (0..cfg.n_bins()).map(|b| mean(c, b)).fold(0.0, f64::max);
            let v = mean(c, beat);
            assert!(v > mean(c, beat - 1) && v > mean(c, beat + 1), "channel {c} not peaked at the beat");
            assert!(v > 0.5 * peak);
            assert!(v > 10.0 * hihat);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = CqtConfig::default();
        let k: CqtKernel<f64> = plan(&cfg, 1000).unwrap();
        let mut ch = channels(vec![vec![0.0; 1000]]);
        ch.signal_rate_hz = 50.0;
        assert!(matches!(forward(&ch, &k), Err(Error::RateMismatch { .. })));
        let ch = channels(vec![vec![0.0; 900]]);
        assert!(matches!(forward(&ch, &k), Err(Error::Shape(_))));
        let rg = Rhythmogram::<f64>::zeros(1, 3, &cfg);
        assert!(matches!(inverse(&rg, &k), Err(Error::Shape(_))));
    }

    #[test]
    fn single_precision_round_trip() {
        let cfg = CqtConfig::default();
        let n = 2000;
        let k: CqtKernel<f32> = plan(&cfg, n).unwrap();
        let x: Vec<f32> = (0..n)
            .map(|i| {
                let t = i as f32 / 100.0;
                (std::f32::consts::TAU * 3.0 * t).cos() * (0.5 - 0.5 * (std::f32::consts::TAU * i as f32 / n as f32).cos())
            })
            .collect();
        let ch = ActivationChannels::new(Array2::from_shape_vec((1, n), x.clone()).unwrap(), 100.0, vec!["a".into()]).unwrap();
        let y = inverse(&forward(&ch, &k).unwrap(), &k).unwrap();
        let mean = x.iter().sum::<f32>() / n as f32;
        let err: f32 = x.iter().zip(y.data.row(0)).map(|(a, b)| (a - mean - b).powi(2)).sum();
        let norm: f32 = x.iter().map(|a| (a - mean).powi(2)).sum();
        assert!((err / norm).sqrt() < 1e-3, "{}", (err / norm).sqrt());
    }
}
