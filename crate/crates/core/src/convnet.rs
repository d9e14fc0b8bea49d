//! A small convolutional stack over log-frequency feature maps.
//!
//! Tensors are `depth x rows x frames x bins`. Convolution is valid-only and
//! slides along rows, frames and bins; with stride 1 along bins it commutes
//! with frequency shifts, which is what makes the stack tempo invariant.
//! Gradients are computed analytically; training is plain SGD.

use ndarray::{Array1, Array2, Array4, Array5, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::phasefeat::FeatureMap;
use crate::rhythmgen::Beats;
use crate::scalar::Real;

/// `depth x rows x frames x bins`.
pub type Tensor<T> = Array4<T>;

/// Wraps a feature map as a depth-1 tensor.
pub fn tensor_from_featuremap<T: Real>(map: &FeatureMap<T>) -> Tensor<T> {
    map.data.clone().insert_axis(Axis(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelExtent {
    pub rows: usize,
    pub frames: usize,
    pub bins: usize,
    pub depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kernel_extent: KernelExtent,
    pub stride_rows: usize,
    pub stride_bins: usize,
    pub activation: Activation,
    pub n_filters: usize,
    pub boundary: Boundary,
}

impl ConvLayerSpec {
    pub fn new(kernel_extent: KernelExtent, n_filters: usize, activation: Activation) -> Self {
        Self {
            kernel_extent,
            stride_rows: kernel_extent.rows.max(1),
            stride_bins: 1,
            activation,
            n_filters,
            boundary: Boundary::Valid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.kernel_extent;
        if k.rows == 0 || k.frames == 0 || k.bins == 0 || k.depth == 0 {
            return Err(invalid("kernel extents must be at least 1"));
        }
        if self.stride_rows == 0 || self.stride_bins == 0 || self.n_filters == 0 {
            return Err(invalid("strides and filter count must be at least 1"));
        }
        Ok(())
    }

    /// Output shape for an input of shape `dims`.
    pub fn output_dims(&self, dims: (usize, usize, usize, usize)) -> Result<(usize, usize, usize, usize)> {
        self.validate()?;
        let (d, r, f, b) = dims;
        let k = &self.kernel_extent;
        if d != k.depth {
            return Err(Error::Shape(format!("layer expects depth {}, input has {d}", k.depth)));
        }
        if r < k.rows || f < k.frames || b < k.bins {
            return Err(Error::Shape(format!(
                "input {r}x{f}x{b} (rows x frames x bins) is smaller than kernel {}x{}x{}",
                k.rows, k.frames, k.bins
            )));
        }
        Ok((
            self.n_filters,
            (r - k.rows) / self.stride_rows + 1,
            f - k.frames + 1,
            (b - k.bins) / self.stride_bins + 1,
        ))
    }

    fn weight_dims(&self) -> (usize, usize, usize, usize, usize) {
        let k = &self.kernel_extent;
        (self.n_filters, k.depth, k.rows, k.frames, k.bins)
    }
}

/// One convolutional layer: weights `filters x depth x rows x frames x bins`
/// and one bias per filter.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub spec: ConvLayerSpec,
    pub weights: Array5<T>,
    pub bias: Array1<T>,
}

impl<T: Real> ConvLayer<T> {
    pub fn zeros(spec: ConvLayerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, weights: Array5::zeros(spec.weight_dims()), bias: Array1::zeros(spec.n_filters) })
    }

    /// He-normal weights, zero bias.
    pub fn random(spec: ConvLayerSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut layer = Self::zeros(spec)?;
        let k = &spec.kernel_extent;
        let fan_in = (k.depth * k.rows * k.frames * k.bins) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).map_err(|e| invalid(e.to_string()))?;
        layer.weights.iter_mut().for_each(|w| *w = T::lit(normal.sample(rng)));
        Ok(layer)
    }

    fn check(&self) -> Result<()> {
        if self.weights.dim() != self.spec.weight_dims() || self.bias.len() != self.spec.n_filters {
            return Err(Error::Shape("layer weights do not match its spec".into()));
        }
        Ok(())
    }
}

fn activate<T: Real>(act: Activation, v: T) -> T {
    match act {
        Activation::Relu => v.max(T::zero()),
        Activation::Identity => v,
    }
}

fn activation_slope<T: Real>(act: Activation, pre: T) -> T {
    match act {
        Activation::Relu if pre <= T::zero() => T::zero(),
        _ => T::one(),
    }
}

/// Pre-activation output of a layer.
fn conv_pre<T: Real>(x: &Tensor<T>, layer: &ConvLayer<T>) -> Result<Tensor<T>> {
    layer.check()?;
    let out_dims = layer.spec.output_dims(x.dim())?;
    let (nf, ro_n, fo_n, bo_n) = out_dims;
    let (_, xr, xf, xb) = x.dim();
    let (_, kd, kr, kf, kb) = layer.spec.weight_dims();
    let (sr, sb) = (layer.spec.stride_rows, layer.spec.stride_bins);
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let ws = layer.weights.as_standard_layout();
    let ws = ws.as_slice().expect("standard layout");
    let per_filter = ro_n * fo_n * bo_n;
    let mut out = vec![T::zero(); nf * per_filter];
    out.par_chunks_mut(per_filter).enumerate().for_each(|(f, o)| {
        o.iter_mut().for_each(|v| *v = layer.bias[f]);
        let mut wi = f * kd * kr * kf * kb;
        for d in 0..kd {
            for r in 0..kr {
                for t in 0..kf {
                    for k in 0..kb {
                        let w = ws[wi];
                        wi += 1;
                        if w == T::zero() {
                            continue;
                        }
                        for ro in 0..ro_n {
                            let xrow = ((d * xr + ro * sr + r) * xf) * xb;
                            for to in 0..fo_n {
                                let xbase = xrow + (to + t) * xb + k;
                                let obase = (ro * fo_n + to) * bo_n;
                                for bo in 0..bo_n {
                                    o[obase + bo] += w * xs[xbase + bo * sb];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(Array4::from_shape_vec(out_dims, out).expect("shape"))
}

/// Valid convolution across rows, frames and bins with per-filter bias and
/// the layer's activation.
pub fn conv_forward<T: Real>(x: &Tensor<T>, layer: &ConvLayer<T>) -> Result<Tensor<T>> {
    let act = layer.spec.activation;
    Ok(conv_pre(x, layer)?.mapv_into(|v| activate(act, v)))
}

/// Gradients of a layer given the gradient at its pre-activation output.
fn conv_backward<T: Real>(x: &Tensor<T>, layer: &ConvLayer<T>, d_pre: &Tensor<T>) -> (Array5<T>, Array1<T>, Tensor<T>) {
    let (nf, ro_n, fo_n, bo_n) = d_pre.dim();
    let (xd, xr, xf, xb) = x.dim();
    let (_, kd, kr, kf, kb) = layer.spec.weight_dims();
    let (sr, sb) = (layer.spec.stride_rows, layer.spec.stride_bins);
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let gs = d_pre.as_standard_layout();
    let gs = gs.as_slice().expect("standard layout");
    let ws = layer.weights.as_standard_layout();
    let ws = ws.as_slice().expect("standard layout");
    let per_filter = ro_n * fo_n * bo_n;
    let per_w = kd * kr * kf * kb;

    let mut dw = vec![T::zero(); nf * per_w];
    dw.par_chunks_mut(per_w).enumerate().for_each(|(f, dwf)| {
        let g = &gs[f * per_filter..(f + 1) * per_filter];
        let mut wi = 0;
        for d in 0..kd {
            for r in 0..kr {
                for t in 0..kf {
                    for k in 0..kb {
                        let mut acc = T::zero();
                        for ro in 0..ro_n {
                            let xrow = ((d * xr + ro * sr + r) * xf) * xb;
                            for to in 0..fo_n {
                                let xbase = xrow + (to + t) * xb + k;
                                let gbase = (ro * fo_n + to) * bo_n;
                                for bo in 0..bo_n {
                                    acc += g[gbase + bo] * xs[xbase + bo * sb];
                                }
                            }
                        }
                        dwf[wi] = acc;
                        wi += 1;
                    }
                }
            }
        }
    });
    let db: Vec<T> = (0..nf).map(|f| gs[f * per_filter..(f + 1) * per_filter].iter().copied().sum()).collect();

    let per_depth = xr * xf * xb;
    let mut dx = vec![T::zero(); xd * per_depth];
    dx.par_chunks_mut(per_depth).enumerate().for_each(|(d, dxd)| {
        for f in 0..nf {
            let g = &gs[f * per_filter..(f + 1) * per_filter];
            for r in 0..kr {
                for t in 0..kf {
                    for k in 0..kb {
                        let w = ws[(((f * kd + d) * kr + r) * kf + t) * kb + k];
                        if w == T::zero() {
                            continue;
                        }
                        for ro in 0..ro_n {
                            let xrow = ((ro * sr + r) * xf) * xb;
                            for to in 0..fo_n {
                                let xbase = xrow + (to + t) * xb + k;
                                let gbase = (ro * fo_n + to) * bo_n;
                                for bo in 0..bo_n {
                                    dxd[xbase + bo * sb] += w * g[gbase + bo];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    (
        Array5::from_shape_vec(layer.spec.weight_dims(), dw).expect("shape"),
        Array1::from(db),
        Array4::from_shape_vec(x.dim(), dx).expect("shape"),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    #[default]
    FullRange,
    OctaveBands,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub mode: PoolMode,
    pub with_position: bool,
    pub band_octaves: Beats,
}

impl Default for PoolSpec {
    fn default() -> Self {
        Self { mode: PoolMode::FullRange, with_position: false, band_octaves: Beats::from_integer(1) }
    }
}

impl PoolSpec {
    pub fn none() -> Self {
        Self { mode: PoolMode::None, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.band_octaves <= Beats::from_integer(0) {
            return Err(invalid("band_octaves must be positive"));
        }
        Ok(())
    }

    /// Bin ranges pooled together for an axis of `n_bins` bins.
    pub fn bands(&self, n_bins: usize, bins_per_octave: usize) -> Vec<std::ops::Range<usize>> {
        match self.mode {
            PoolMode::None => (0..n_bins).map(|b| b..b + 1).collect(),
            #[allow(clippy::single_range_in_vec_init)]
            PoolMode::FullRange => vec![0..n_bins],
            PoolMode::OctaveBands => {
                let w = (self.band_octaves * Beats::from_integer(bins_per_octave as i64)).ceil();
                let w = w.to_integer().max(1) as usize;
                (0..n_bins).step_by(w).map(|s| s..(s + w).min(n_bins)).collect()
            }
        }
    }
}

/// Pooled values and, on request, the bin of each maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled<T> {
    pub values: Tensor<T>,
    pub positions: Option<Array4<usize>>,
}

fn pool_with_positions<T: Real>(x: &Tensor<T>, bands: &[std::ops::Range<usize>]) -> (Tensor<T>, Array4<usize>) {
    let (d, r, f, _) = x.dim();
    let mut values = Array4::zeros((d, r, f, bands.len()));
    let mut pos = Array4::zeros((d, r, f, bands.len()));
    for ((i, j, t), _) in ndarray::Array3::<u8>::zeros((d, r, f)).indexed_iter() {
        for (band, range) in bands.iter().enumerate() {
            let mut best = range.start;
            for b in range.clone() {
                // Strict comparison keeps the lowest bin on ties.
                if x[[i, j, t, b]] > x[[i, j, t, best]] {
                    best = b;
                }
            }
            values[[i, j, t, band]] = x[[i, j, t, best]];
            pos[[i, j, t, band]] = best;
        }
    }
    (values, pos)
}

/// Max-pooling across frequency. Ties resolve to the lowest bin.
pub fn max_pool_freq<T: Real>(x: &Tensor<T>, pool: &PoolSpec, bins_per_octave: usize) -> Result<Pooled<T>> {
    pool.validate()?;
    if x.is_empty() {
        return Err(invalid("cannot pool an empty tensor"));
    }
    let bands = pool.bands(x.dim().3, bins_per_octave);
    let (values, pos) = pool_with_positions(x, &bands);
    Ok(Pooled { values, positions: pool.with_position.then_some(pos) })
}

/// Per-bin multipliers with a smoothness penalty `λ Σ (w[k+1] − w[k])²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothFreqWeights<T> {
    pub w: Vec<T>,
    pub smoothness_penalty: T,
}

impl<T: Real> SmoothFreqWeights<T> {
    pub fn ones(n_bins: usize, smoothness_penalty: T) -> Self {
        Self { w: vec![T::one(); n_bins], smoothness_penalty }
    }

    pub fn penalty(&self) -> T {
        self.w.windows(2).map(|p| (p[1] - p[0]) * (p[1] - p[0])).sum::<T>() * self.smoothness_penalty
    }

    pub fn penalty_gradient(&self) -> Vec<T> {
        let two_l = self.smoothness_penalty * T::lit(2.0);
        let n = self.w.len();
        (0..n)
            .map(|k| {
                let mut g = T::zero();
                if k > 0 {
                    g += self.w[k] - self.w[k - 1];
                }
                if k + 1 < n {
                    g += self.w[k] - self.w[k + 1];
                }
                g * two_l
            })
            .collect()
    }

    /// Root of the summed squared adjacent differences.
    pub fn roughness(&self) -> T {
        self.w.windows(2).map(|p| (p[1] - p[0]) * (p[1] - p[0])).sum::<T>().sqrt()
    }
}

/// Multiplies every bin by its weight.
pub fn apply_freq_weights<T: Real>(x: &Tensor<T>, weights: &SmoothFreqWeights<T>) -> Result<Tensor<T>> {
    let nb = x.dim().3;
    if weights.w.len() != nb {
        return Err(Error::Shape(format!("{} frequency weights for {nb} bins", weights.w.len())));
    }
    let mut out = x.clone();
    for mut lane in out.lanes_mut(Axis(3)) {
        for (v, &w) in lane.iter_mut().zip(&weights.w) {
            *v *= w;
        }
    }
    Ok(out)
}

/// Fully connected layer, `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseHead<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> DenseHead<T> {
    pub fn random(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let normal = Normal::new(0.0, (1.0 / n_in.max(1) as f64).sqrt()).map_err(|e| invalid(e.to_string()))?;
        Ok(Self {
            weights: Array2::from_shape_fn((n_out, n_in), |_| T::lit(normal.sample(rng))),
            bias: Array1::zeros(n_out),
        })
    }
}

/// Affine map of a flat feature vector.
pub fn dense_forward<T: Real>(features: &[T], head: &DenseHead<T>) -> Result<Vec<T>> {
    let (n_out, n_in) = head.weights.dim();
    if features.len() != n_in || head.bias.len() != n_out {
        return Err(Error::Shape(format!(
            "head maps {n_in} inputs to {n_out} outputs, got {} features",
            features.len()
        )));
    }
    Ok((0..n_out)
        .map(|o| head.weights.row(o).iter().zip(features).map(|(&w, &x)| w * x).sum::<T>() + head.bias[o])
        .collect())
}

/// How frames are read out after pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Average over frames: one output row per example.
    #[default]
    FrameMean,
    /// One output row per frame.
    PerFrame,
}

/// Every learned weight of the stack plus the pooling and head configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// Input shape `depth x rows x frames x bins`; frames may vary at run time.
    pub input_dims: (usize, usize, usize, usize),
    pub bins_per_octave: usize,
    pub layers: Vec<ConvLayer<T>>,
    pub pool: PoolSpec,
    pub freq_weights: Option<SmoothFreqWeights<T>>,
    pub readout: Readout,
    pub head: Option<DenseHead<T>>,
}

/// Architecture description used to initialise a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_dims: (usize, usize, usize, usize),
    pub bins_per_octave: usize,
    pub layers: Vec<ConvLayerSpec>,
    pub pool: PoolSpec,
    /// Smoothness penalty of per-bin output weights; `None` disables them.
    pub freq_weights: Option<f64>,
    pub readout: Readout,
    /// Output size of the dense head; `None` disables it.
    pub head_outputs: Option<usize>,
}

impl<T: Real> ModelParams<T> {
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = arch.input_dims;
        let mut layers = Vec::with_capacity(arch.layers.len());
        for spec in &arch.layers {
            dims = spec.output_dims(dims)?;
            layers.push(ConvLayer::random(*spec, &mut rng)?);
        }
        let freq_weights = arch.freq_weights.map(|l| SmoothFreqWeights::ones(dims.3, T::lit(l)));
        let n_bands = arch.pool.bands(dims.3, arch.bins_per_octave).len();
        let n_features = dims.0 * dims.1 * n_bands;
        let head = match arch.head_outputs {
            Some(n) => Some(DenseHead::random(n_features, n, &mut rng)?),
            None => None,
        };
        let model = Self {
            input_dims: arch.input_dims,
            bins_per_octave: arch.bins_per_octave,
            layers,
            pool: arch.pool,
            freq_weights,
            readout: arch.readout,
            head,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.pool.validate()?;
        let mut dims = self.input_dims;
        for layer in &self.layers {
            layer.check()?;
            dims = layer.spec.output_dims(dims)?;
        }
        if let Some(w) = &self.freq_weights {
            if w.w.len() != dims.3 {
                return Err(Error::Shape(format!("{} frequency weights for {} bins", w.w.len(), dims.3)));
            }
        }
        if let Some(h) = &self.head {
            let n = dims.0 * dims.1 * self.pool.bands(dims.3, self.bins_per_octave).len();
            if h.weights.ncols() != n || h.bias.len() != h.weights.nrows() {
                return Err(Error::Shape(format!("head expects {} inputs, stack yields {n}", h.weights.ncols())));
            }
        }
        if self.flat_params().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(())
    }

    /// Shape of the conv stack output for an input with `frames` frames.
    pub fn stack_dims(&self, frames: usize) -> Result<(usize, usize, usize, usize)> {
        let (d, r, _, b) = self.input_dims;
        let mut dims = (d, r, frames, b);
        for layer in &self.layers {
            dims = layer.spec.output_dims(dims)?;
        }
        Ok(dims)
    }

    /// Input bin that output bin 0 lines up with (all bin strides must be 1).
    pub fn bin_offset(&self) -> usize {
        self.layers.iter().map(|l| (l.spec.kernel_extent.bins - 1) / 2).sum()
    }

    /// Flattens every parameter: per layer weights then bias, frequency
    /// weights, head weights then bias.
    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        if let Some(w) = &self.freq_weights {
            out.extend(w.w.iter().copied());
        }
        if let Some(h) = &self.head {
            out.extend(h.weights.iter().copied());
            out.extend(h.bias.iter().copied());
        }
        out
    }

    pub fn set_flat_params(&mut self, values: &[T]) -> Result<()> {
        let mut it = values.iter().copied();
        let mut take = |dst: &mut dyn Iterator<Item = &mut T>| -> Result<()> {
            for v in dst {
                *v = it.next().ok_or_else(|| Error::Shape("too few parameters".into()))?;
            }
            Ok(())
        };
        for l in &mut self.layers {
            take(&mut l.weights.iter_mut())?;
            take(&mut l.bias.iter_mut())?;
        }
        if let Some(w) = &mut self.freq_weights {
            take(&mut w.w.iter_mut())?;
        }
        if let Some(h) = &mut self.head {
            take(&mut h.weights.iter_mut())?;
            take(&mut h.bias.iter_mut())?;
        }
        if it.next().is_some() {
            return Err(Error::Shape("too many parameters".into()));
        }
        Ok(())
    }

    /// Mask over [`flat_params`](Self::flat_params) marking weights subject to
    /// L2 decay (conv and head weights, not biases or frequency weights).
    fn decay_mask(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(std::iter::repeat_n(true, l.weights.len()));
            out.extend(std::iter::repeat_n(false, l.bias.len()));
        }
        if let Some(w) = &self.freq_weights {
            out.extend(std::iter::repeat_n(false, w.w.len()));
        }
        if let Some(h) = &self.head {
            out.extend(std::iter::repeat_n(true, h.weights.len()));
            out.extend(std::iter::repeat_n(false, h.bias.len()));
        }
        out
    }

    /// Regularization terms that do not depend on the data.
    pub fn penalty(&self) -> T {
        self.freq_weights.as_ref().map_or(T::zero(), |w| w.penalty())
    }

    /// Gradient of [`penalty`](Self::penalty) in [`flat_params`](Self::flat_params) order.
    pub fn penalty_gradient_flat(&self) -> Vec<T> {
        let mut g = vec![T::zero(); self.flat_params().len()];
        if let Some(w) = &self.freq_weights {
            let start: usize = self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum();
            for (slot, v) in g[start..start + w.w.len()].iter_mut().zip(w.penalty_gradient()) {
                *slot = v;
            }
        }
        g
    }
}

/// Intermediate values of a forward pass, needed by [`backward`].
#[derive(Debug, Clone)]
pub struct Trace<T> {
    inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
    stack_out: Tensor<T>,
    weighted: Tensor<T>,
    positions: Array4<usize>,
    pooled_dims: (usize, usize, usize, usize),
    readout_rows: Array2<T>,
}

/// Runs the model; the output has one row per readout frame.
pub fn forward<T: Real>(model: &ModelParams<T>, x: &Tensor<T>) -> Result<Array2<T>> {
    Ok(forward_trace(model, x)?.0)
}

pub fn forward_trace<T: Real>(model: &ModelParams<T>, x: &Tensor<T>) -> Result<(Array2<T>, Trace<T>)> {
    let (d, r, _, b) = x.dim();
    let (md, mr, _, mb) = model.input_dims;
    if (d, r, b) != (md, mr, mb) {
        return Err(Error::Shape(format!(
            "model expects depth/rows/bins {md}/{mr}/{mb}, input has {d}/{r}/{b}"
        )));
    }
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut pre = Vec::with_capacity(model.layers.len());
    let mut h = x.clone();
    for layer in &model.layers {
        let p = conv_pre(&h, layer)?;
        let act = layer.spec.activation;
        inputs.push(h);
        h = p.mapv(|v| activate(act, v));
        pre.push(p);
    }
    let weighted = match &model.freq_weights {
        Some(w) => apply_freq_weights(&h, w)?,
        None => h.clone(),
    };
    let bands = model.pool.bands(weighted.dim().3, model.bins_per_octave);
    let (pooled, positions) = pool_with_positions(&weighted, &bands);
    let (pd, pr, pf, pb) = pooled.dim();
    let width = pd * pr * pb;
    let readout_rows = match model.readout {
        Readout::FrameMean => {
            let mean = pooled.mean_axis(Axis(2)).expect("frames > 0");
            Array2::from_shape_vec((1, width), mean.iter().copied().collect()).expect("shape")
        }
        Readout::PerFrame => {
            let perm = pooled.view().permuted_axes([2, 0, 1, 3]);
            Array2::from_shape_vec((pf, width), perm.iter().copied().collect()).expect("shape")
        }
    };
    let out = match &model.head {
        Some(head) => {
            let mut out = Array2::zeros((readout_rows.nrows(), head.weights.nrows()));
            for (i, row) in readout_rows.outer_iter().enumerate() {
                let y = dense_forward(row.as_slice().expect("contiguous"), head)?;
                out.row_mut(i).assign(&Array1::from(y));
            }
            out
        }
        None => readout_rows.clone(),
    };
    let trace = Trace { inputs, pre, stack_out: h, weighted, positions, pooled_dims: (pd, pr, pf, pb), readout_rows };
    Ok((out, trace))
}

/// Parameter gradients in [`ModelParams::flat_params`] order.
pub type Gradients<T> = Vec<T>;

/// Gradients of the data term for `d_out`, the loss gradient with respect to
/// the model output. The smoothness penalty is not included; see
/// [`ModelParams::penalty`]. Pooling positions are treated as constants.
pub fn backward_trace<T: Real>(model: &ModelParams<T>, trace: &Trace<T>, d_out: &Array2<T>) -> Result<Gradients<T>> {
    let mut head_grads = None;
    let d_readout = match &model.head {
        Some(head) => {
            if d_out.dim() != (trace.readout_rows.nrows(), head.weights.nrows()) {
                return Err(Error::Shape("loss gradient does not match the output".into()));
            }
            let dw = d_out.t().dot(&trace.readout_rows);
            let db = d_out.sum_axis(Axis(0));
            head_grads = Some((dw, db));
            d_out.dot(&head.weights)
        }
        None => {
            if d_out.dim() != trace.readout_rows.dim() {
                return Err(Error::Shape("loss gradient does not match the output".into()));
            }
            d_out.clone()
        }
    };

    let (pd, pr, pf, pb) = trace.pooled_dims;
    let mut d_pooled = Array4::<T>::zeros((pd, pr, pf, pb));
    match model.readout {
        Readout::FrameMean => {
            let scale = T::one() / T::from_usize_lossy(pf);
            for ((i, j, _, k), v) in d_pooled.indexed_iter_mut() {
                *v = d_readout[[0, (i * pr + j) * pb + k]] * scale;
            }
        }
        Readout::PerFrame => {
            for ((i, j, t, k), v) in d_pooled.indexed_iter_mut() {
                *v = d_readout[[t, (i * pr + j) * pb + k]];
            }
        }
    }

    let mut d_weighted = Array4::<T>::zeros(trace.weighted.dim());
    for ((i, j, t, k), &g) in d_pooled.indexed_iter() {
        d_weighted[[i, j, t, trace.positions[[i, j, t, k]]]] += g;
    }

    let mut fw_grad = None;
    let mut d_h = d_weighted.clone();
    if let Some(w) = &model.freq_weights {
        let mut g = vec![T::zero(); w.w.len()];
        for (lane_d, lane_h) in d_weighted.lanes(Axis(3)).into_iter().zip(trace.stack_out.lanes(Axis(3))) {
            for k in 0..g.len() {
                g[k] += lane_d[k] * lane_h[k];
            }
        }
        fw_grad = Some(g);
        d_h = apply_freq_weights(&d_weighted, w)?;
    }

    let mut layer_grads = Vec::with_capacity(model.layers.len());
    for (idx, layer) in model.layers.iter().enumerate().rev() {
        let act = layer.spec.activation;
        let mut d_pre = d_h;
        d_pre.zip_mut_with(&trace.pre[idx], |g, &p| *g *= activation_slope(act, p));
        let (dw, db, dx) = conv_backward(&trace.inputs[idx], layer, &d_pre);
        layer_grads.push((dw, db));
        d_h = dx;
    }
    layer_grads.reverse();

    let mut out = Vec::with_capacity(model.flat_params().len());
    for (dw, db) in layer_grads {
        out.extend(dw.iter().copied());
        out.extend(db.iter().copied());
    }
    if let Some(g) = fw_grad {
        out.extend(g);
    }
    if let Some((dw, db)) = head_grads {
        out.extend(dw.iter().copied());
        out.extend(db.iter().copied());
    }
    Ok(out)
}

/// Forward pass followed by [`backward_trace`].
pub fn backward<T: Real>(model: &ModelParams<T>, x: &Tensor<T>, d_out: &Array2<T>) -> Result<Gradients<T>> {
    let (_, trace) = forward_trace(model, x)?;
    backward_trace(model, &trace, d_out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax cross-entropy over the columns of each output row.
    #[default]
    CrossEntropyOverBins,
    /// Mean squared error against a target of the output's shape.
    FrameMse,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target<T> {
    Bin(usize),
    Frames(Array2<T>),
}

/// Loss value and its gradient with respect to `output`.
pub fn loss_and_grad<T: Real>(output: &Array2<T>, target: &Target<T>, kind: LossKind) -> Result<(T, Array2<T>)> {
    match (kind, target) {
        (LossKind::CrossEntropyOverBins, Target::Bin(label)) => {
            let (rows, cols) = output.dim();
            if *label >= cols {
                return Err(invalid(format!("label {label} outside {cols} output bins")));
            }
            let scale = T::one() / T::from_usize_lossy(rows);
            let mut grad = Array2::zeros((rows, cols));
            let mut loss = T::zero();
            for (row, mut g) in output.outer_iter().zip(grad.outer_iter_mut()) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let z: T = row.iter().map(|&v| (v - m).exp()).sum();
                let log_z = z.ln() + m;
                loss += (log_z - row[*label]) * scale;
                for (k, gk) in g.iter_mut().enumerate() {
                    let p = (row[k] - log_z).exp();
                    *gk = (p - if k == *label { T::one() } else { T::zero() }) * scale;
                }
            }
            Ok((loss, grad))
        }
        (LossKind::FrameMse, Target::Frames(t)) => {
            if t.dim() != output.dim() {
                return Err(Error::Shape(format!("target {:?} vs output {:?}", t.dim(), output.dim())));
            }
            let scale = T::one() / T::from_usize_lossy(output.len());
            let diff = output - t;
            let loss = diff.iter().map(|d| *d * *d).sum::<T>() * scale;
            Ok((loss, diff.mapv(|d| d * T::lit(2.0) * scale)))
        }
        _ => Err(invalid("loss kind does not match the target type")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
    pub loss: LossKind,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.05, epochs: 60, batch_size: 8, rng_seed: 0, loss: LossKind::CrossEntropyOverBins, l2: 1e-4 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be non-negative and finite"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch_size must be at least 1"));
        }
        if !(self.l2 >= 0.0) {
            return Err(invalid("l2 must be non-negative"));
        }
        Ok(())
    }
}

/// Mean loss (plus penalty) of `model` over `data`.
pub fn evaluate_loss<T: Real>(model: &ModelParams<T>, data: &[(Tensor<T>, Target<T>)], kind: LossKind) -> Result<T> {
    let losses: Vec<T> = data
        .par_iter()
        .map(|(x, t)| loss_and_grad(&forward(model, x)?, t, kind).map(|(l, _)| l))
        .collect::<Result<_>>()?;
    Ok(losses.iter().copied().sum::<T>() / T::from_usize_lossy(data.len().max(1)) + model.penalty())
}

/// Mini-batch SGD. Returns the trained model and the mean training loss
/// before each epoch's updates.
///
/// Batch gradients are computed in parallel but summed in dataset order, so
/// results depend only on the data, the initial model and the config.
pub fn train<T: Real>(
    model: &ModelParams<T>,
    data: &[(Tensor<T>, Target<T>)],
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, Vec<T>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    model.validate()?;
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let decay = model.decay_mask();
    let lr = T::lit(cfg.learning_rate);
    let l2 = T::lit(cfg.l2);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = T::zero();
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(T, Gradients<T>)> = batch
                .par_iter()
                .map(|&i| {
                    let (x, t) = &data[i];
                    let (out, trace) = forward_trace(&model, x)?;
                    let (loss, d_out) = loss_and_grad(&out, t, cfg.loss)?;
                    Ok((loss, backward_trace(&model, &trace, &d_out)?))
                })
                .collect::<Result<_>>()?;
            let mut grad = model.penalty_gradient_flat();
            let scale = T::one() / T::from_usize_lossy(batch.len());
            for (loss, g) in &results {
                epoch_loss += *loss;
                for (a, &b) in grad.iter_mut().zip(g) {
                    *a += b * scale;
                }
            }
            let mut params = model.flat_params();
            for ((p, g), &dec) in params.iter_mut().zip(&grad).zip(&decay) {
                let g = if dec { *g + l2 * *p } else { *g };
                *p -= lr * g;
            }
            if params.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("training diverged"));
            }
            model.set_flat_params(&params)?;
        }
        history.push(epoch_loss / T::from_usize_lossy(data.len()) + model.penalty());
    }
    Ok((model, history))
}

/// Trains per-bin tempo scores with cross-entropy. Labels are input bins;
/// the model must produce one score per (offset) bin: a single filter and row
/// after the stack, no frequency pooling, frame-mean readout, no head.
pub fn train_tempo<T: Real>(
    model: &ModelParams<T>,
    dataset: &[(Tensor<T>, usize)],
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, Vec<T>)> {
    if dataset.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let (d, r, _, b) = model.stack_dims(dataset[0].0.dim().2)?;
    if d != 1 || r != 1 || model.pool.mode != PoolMode::None || model.head.is_some() || model.readout != Readout::FrameMean {
        return Err(invalid("tempo model must end in one filter and row with no pooling, frame-mean readout and no head"));
    }
    let offset = model.bin_offset();
    let data: Vec<(Tensor<T>, Target<T>)> = dataset
        .iter()
        .map(|(x, label)| {
            let out = label.checked_sub(offset).filter(|&o| o < b).ok_or_else(|| {
                invalid(format!("label bin {label} is outside the model's output range {offset}..{}", offset + b))
            })?;
            Ok((x.clone(), Target::Bin(out)))
        })
        .collect::<Result<_>>()?;
    let cfg = TrainConfig { loss: LossKind::CrossEntropyOverBins, ..*cfg };
    train(model, &data, &cfg)
}

/// Index of the largest score; ties go to the lowest index.
pub fn predict_argmax_bin<T: Real>(scores: &[T]) -> Result<usize> {
    if scores.is_empty() {
        return Err(invalid("no scores"));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Predicted input bin of a tempo model (see [`train_tempo`]).
pub fn predict_tempo_bin<T: Real>(model: &ModelParams<T>, x: &Tensor<T>) -> Result<usize> {
    let out = forward(model, x)?;
    Ok(predict_argmax_bin(out.row(0).as_slice().expect("contiguous"))? + model.bin_offset())
}

/// Converts to `f64` for reporting.
pub fn to_f64_vec<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}
