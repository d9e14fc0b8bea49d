//! File formats.
//!
//! All binary containers are little-endian. Activation channels (`RACT`):
//! magic, `u32` channels, `u32` frames, `f64` rate, then `f32` samples row by
//! row. Rhythmograms (`RGRM`): magic, `u32` channels, frames and bins, `f64`
//! signal rate and f_min, `u32` bins per octave and hop, then `(re, im)` `f32`
//! pairs channel by channel, frame by frame. Feature maps (`RGFM`) use the same
//! header with rows in place of channels and one `f32` per value. Rhythmograms
//! and feature maps carry a JSON sidecar named `<file>.json`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use num_complex::Complex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::convnet::{Architecture, ConvLayer, ConvLayerSpec, DenseHead, ModelParams, PoolSpec, Readout, SmoothFreqWeights};
use crate::cqt::{CqtConfig, Rhythmogram, Window};
use crate::error::{Error, Result};
use crate::phasefeat::{FeatureMap, RowKind, ScaleInfo};
use crate::rhythmgen::ActivationChannels;
use crate::scalar::Real;
use crate::tracker::Fingerprint;

const ACT_MAGIC: &[u8; 4] = b"RACT";
const RG_MAGIC: &[u8; 4] = b"RGRM";
const FM_MAGIC: &[u8; 4] = b"RGFM";
const MODEL_MAGIC: &[u8; 4] = b"RMDL";
/// Version of the model header and weight blob layout.
pub const MODEL_FORMAT_VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// `path` with `.json` appended to its full file name.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => format_err("file is truncated"),
            _ => Error::Io(e),
        })?;
        Ok(b)
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.bytes::<4>()?;
        if &got != want {
            return Err(format_err(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(want),
                String::from_utf8_lossy(&got)
            )));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut raw = vec![0u8; n.checked_mul(4).ok_or_else(|| format_err("size overflow"))?];
        self.inner.read_exact(&mut raw).map_err(|_| format_err("payload is truncated"))?;
        let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("file payload"));
        }
        Ok(values)
    }

    fn end(&mut self) -> Result<()> {
        let mut rest = [0u8; 1];
        match self.inner.read(&mut rest)? {
            0 => Ok(()),
            _ => Err(format_err("trailing bytes after payload")),
        }
    }
}

fn open(path: &Path) -> Result<Reader<BufReader<File>>> {
    Ok(Reader { inner: BufReader::new(File::open(path)?) })
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| format_err(format!("{what} {n} does not fit in u32")))
}

fn put_f32s<W: Write, T: Real>(w: &mut W, values: impl Iterator<Item = T>) -> Result<()> {
    for v in values {
        w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_activations<T: Real>(path: &Path, ch: &ActivationChannels<T>) -> Result<()> {
    ch.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(ACT_MAGIC)?;
    w.write_all(&to_u32(ch.n_channels(), "channel count")?.to_le_bytes())?;
    w.write_all(&to_u32(ch.n_frames(), "frame count")?.to_le_bytes())?;
    w.write_all(&ch.signal_rate_hz.to_le_bytes())?;
    put_f32s(&mut w, ch.data.iter().copied())?;
    w.flush()?;
    Ok(())
}

/// Channel names are not stored; they come back as `ch0`, `ch1`, ...
pub fn read_activations<T: Real>(path: &Path) -> Result<ActivationChannels<T>> {
    let mut r = open(path)?;
    r.magic(ACT_MAGIC)?;
    let c = r.u32()? as usize;
    let n = r.u32()? as usize;
    let rate = r.f64()?;
    if c == 0 || n == 0 {
        return Err(format_err("activation file has no samples"));
    }
    let values = r.f32s(c * n)?;
    r.end()?;
    let data = Array2::from_shape_vec((c, n), values.into_iter().map(|v| T::lit(v as f64)).collect())
        .map_err(|e| format_err(e.to_string()))?;
    ActivationChannels::new(data, rate, (0..c).map(|i| format!("ch{i}")).collect())
}

/// Header fields of a rhythmogram or feature-map container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub format: String,
    /// Channels for `RGRM`, rows for `RGFM`.
    pub channels: u32,
    pub frames: u32,
    pub bins: u32,
    pub signal_rate: f64,
    pub f_min: f64,
    pub bpo: u32,
    pub hop: u32,
    pub f_max: f64,
    pub tf_tradeoff: f64,
    pub q_cycles: f64,
    /// Frames centered before the first signal sample.
    pub lead_frames: usize,
}

impl GridHeader {
    fn from_config(format: &str, channels: usize, frames: usize, bins: usize, cfg: &CqtConfig, times: &[f64]) -> Result<Self> {
        let lead = times.first().map_or(0.0, |t| (-t / cfg.hop_secs()).round().max(0.0)) as usize;
        Ok(Self {
            format: format.into(),
            channels: to_u32(channels, "channel count")?,
            frames: to_u32(frames, "frame count")?,
            bins: to_u32(bins, "bin count")?,
            signal_rate: cfg.signal_rate_hz,
            f_min: cfg.f_min,
            bpo: to_u32(cfg.bins_per_octave, "bins per octave")?,
            hop: to_u32(cfg.hop_frames, "hop")?,
            f_max: cfg.f_max,
            tf_tradeoff: cfg.tf_tradeoff,
            q_cycles: cfg.q_cycles,
            lead_frames: lead,
        })
    }

    fn write<W: Write>(&self, w: &mut W, magic: &[u8; 4]) -> Result<()> {
        w.write_all(magic)?;
        for v in [self.channels, self.frames, self.bins] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.signal_rate.to_le_bytes())?;
        w.write_all(&self.f_min.to_le_bytes())?;
        w.write_all(&self.bpo.to_le_bytes())?;
        w.write_all(&self.hop.to_le_bytes())?;
        Ok(())
    }

    fn read<R: Read>(r: &mut Reader<R>, magic: &[u8; 4]) -> Result<Self> {
        r.magic(magic)?;
        let (channels, frames, bins) = (r.u32()?, r.u32()?, r.u32()?);
        let signal_rate = r.f64()?;
        let f_min = r.f64()?;
        let bpo = r.u32()?;
        let hop = r.u32()?;
        if bpo == 0 || hop == 0 || bins == 0 {
            return Err(format_err("header has zero bins, bins per octave or hop"));
        }
        let f_max = f_min * ((bins - 1) as f64 / bpo as f64).exp2();
        Ok(Self {
            format: String::from_utf8_lossy(magic).into_owned(),
            channels,
            frames,
            bins,
            signal_rate,
            f_min,
            bpo,
            hop,
            f_max,
            tf_tradeoff: 0.0,
            q_cycles: CqtConfig::default().q_cycles,
            lead_frames: usize::MAX,
        })
    }

    fn config(&self) -> CqtConfig {
        CqtConfig {
            f_min: self.f_min,
            f_max: self.f_max,
            bins_per_octave: self.bpo as usize,
            signal_rate_hz: self.signal_rate,
            hop_frames: self.hop as usize,
            tf_tradeoff: self.tf_tradeoff,
            q_cycles: self.q_cycles,
            window: Window::Hann,
        }
    }

    /// Fills the fields only the sidecar knows, after checking that it agrees
    /// with the binary header.
    fn merge(&mut self, side: &GridHeader) -> Result<()> {
        let same = side.channels == self.channels
            && side.frames == self.frames
            && side.bins == self.bins
            && side.signal_rate == self.signal_rate
            && side.f_min == self.f_min
            && side.bpo == self.bpo
            && side.hop == self.hop;
        if !same {
            return Err(format_err("JSON sidecar disagrees with the binary header"));
        }
        self.f_max = side.f_max;
        self.tf_tradeoff = side.tf_tradeoff;
        self.q_cycles = side.q_cycles;
        self.lead_frames = side.lead_frames;
        Ok(())
    }

    fn frame_times(&self) -> Vec<f64> {
        let cfg = self.config();
        let lead = if self.lead_frames == usize::MAX { cfg.lead_frames() } else { self.lead_frames };
        (0..self.frames as usize).map(|j| (j as f64 - lead as f64) * cfg.hop_secs()).collect()
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Writes the binary container and its sidecar.
pub fn write_rhythmogram<T: Real>(path: &Path, rg: &Rhythmogram<T>) -> Result<()> {
    rg.validate()?;
    let header = GridHeader::from_config(
        "RGRM",
        rg.n_channels(),
        rg.n_frames(),
        rg.n_bins(),
        &rg.config,
        &rg.frame_times,
    )?;
    let mut w = BufWriter::new(File::create(path)?);
    header.write(&mut w, RG_MAGIC)?;
    put_f32s(&mut w, rg.coeffs.iter().flat_map(|c| [c.re, c.im]))?;
    w.flush()?;
    write_json(&sidecar_path(path), &header)
}

/// Reads a rhythmogram; the sidecar is used when present.
pub fn read_rhythmogram<T: Real>(path: &Path) -> Result<Rhythmogram<T>> {
    let mut r = open(path)?;
    let mut header = GridHeader::read(&mut r, RG_MAGIC)?;
    let side = sidecar_path(path);
    if side.exists() {
        header.merge(&read_json(&side)?)?;
    }
    let (c, f, b) = (header.channels as usize, header.frames as usize, header.bins as usize);
    let values = r.f32s(2 * c * f * b)?;
    r.end()?;
    let config = header.config();
    config.validate()?;
    if config.n_bins() != b {
        return Err(format_err(format!("header implies {} bins, file has {b}", config.n_bins())));
    }
    let coeffs: Vec<Complex<T>> =
        values.chunks_exact(2).map(|p| Complex::new(T::lit(p[0] as f64), T::lit(p[1] as f64))).collect();
    let rg = Rhythmogram {
        coeffs: Array3::from_shape_vec((c, f, b), coeffs).map_err(|e| format_err(e.to_string()))?,
        frame_times: header.frame_times(),
        bin_freqs: config.bin_freqs(),
        config,
    };
    rg.validate()?;
    Ok(rg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapSidecar {
    #[serde(flatten)]
    pub header: GridHeader,
    pub row_kind: Vec<RowKind>,
    pub channel_stride: usize,
    pub scale_info: ScaleInfo,
}

/// Writes a feature map. `config` supplies the frequency grid and hop the
/// map was computed with.
pub fn write_featuremap<T: Real>(path: &Path, fm: &FeatureMap<T>, config: &CqtConfig) -> Result<()> {
    fm.validate()?;
    if config.bins_per_octave != fm.bins_per_octave || config.n_bins() != fm.n_bins() {
        return Err(Error::Shape("feature map does not match the CQT configuration".into()));
    }
    let header =
        GridHeader::from_config("RGFM", fm.n_rows(), fm.n_frames(), fm.n_bins(), config, &fm.frame_times)?;
    let mut w = BufWriter::new(File::create(path)?);
    header.write(&mut w, FM_MAGIC)?;
    put_f32s(&mut w, fm.data.iter().copied())?;
    w.flush()?;
    let side = FeatureMapSidecar {
        header,
        row_kind: fm.row_kind.clone(),
        channel_stride: fm.channel_stride,
        scale_info: fm.scale_info,
    };
    write_json(&sidecar_path(path), &side)
}

/// Reads a feature map; the sidecar is required for the row layout.
pub fn read_featuremap<T: Real>(path: &Path) -> Result<FeatureMap<T>> {
    let mut r = open(path)?;
    let mut header = GridHeader::read(&mut r, FM_MAGIC)?;
    let side: FeatureMapSidecar = read_json(&sidecar_path(path))?;
    header.merge(&side.header)?;
    let (rows, f, b) = (header.channels as usize, header.frames as usize, header.bins as usize);
    let values = r.f32s(rows * f * b)?;
    r.end()?;
    let config = header.config();
    let mut data = Array3::from_shape_vec((rows, f, b), values.into_iter().map(|v| T::lit(v as f64)).collect())
        .map_err(|e| format_err(e.to_string()))?;
    // pi rounded to f32 lands just above pi.
    let pi32 = T::lit(std::f32::consts::PI as f64);
    for (mut row, kind) in data.outer_iter_mut().zip(&side.row_kind) {
        if *kind != RowKind::Magnitude {
            row.mapv_inplace(|v| if v > T::PI() && v <= pi32 { T::PI() } else { v });
        }
    }
    let fm = FeatureMap {
        data,
        row_kind: side.row_kind,
        channel_stride: side.channel_stride,
        scale_info: side.scale_info,
        bins_per_octave: config.bins_per_octave,
        frame_times: header.frame_times(),
        bin_freqs: config.bin_freqs(),
    };
    fm.validate()?;
    Ok(fm)
}

/// Writes one time per line with microsecond precision.
pub fn write_times(path: &Path, times: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in times {
        writeln!(w, "{t:.6}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one time per line; blank lines and lines starting with `#` are skipped.
pub fn read_times(path: &Path) -> Result<Vec<f64>> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let t: f64 = line.parse().map_err(|_| format_err(format!("line {}: not a number: {line:?}", n + 1)))?;
        if !t.is_finite() {
            return Err(Error::NonFinite("time file"));
        }
        out.push(t);
    }
    if out.windows(2).any(|w| w[1] <= w[0]) {
        return Err(format_err("times must be strictly increasing"));
    }
    Ok(out)
}

/// What a model file was trained for and how its input was prepared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelMeta {
    pub task: String,
    pub cqt: Option<CqtConfig>,
    pub harmonics: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FreqWeightsHeader {
    bins: usize,
    smoothness_penalty: f64,
}

/// JSON half of a saved model. The weights live in `<file>.bin` in
/// [`ModelParams::flat_params`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    input_dims: (usize, usize, usize, usize),
    bins_per_octave: usize,
    layers: Vec<ConvLayerSpec>,
    pool: PoolSpec,
    freq_weights: Option<FreqWeightsHeader>,
    readout: Readout,
    head: Option<(usize, usize)>,
    n_params: usize,
    #[serde(default)]
    meta: ModelMeta,
}

fn model_header<T: Real>(model: &ModelParams<T>, meta: &ModelMeta) -> ModelHeader {
    ModelHeader {
        format_version: MODEL_FORMAT_VERSION,
        input_dims: model.input_dims,
        bins_per_octave: model.bins_per_octave,
        layers: model.layers.iter().map(|l| l.spec).collect(),
        pool: model.pool,
        freq_weights: model.freq_weights.as_ref().map(|w| FreqWeightsHeader {
            bins: w.w.len(),
            smoothness_penalty: w.smoothness_penalty.to_f64_lossy(),
        }),
        readout: model.readout,
        head: model.head.as_ref().map(|h| h.weights.dim()),
        n_params: model.flat_params().len(),
        meta: meta.clone(),
    }
}

fn weight_blob<T: Real>(model: &ModelParams<T>) -> Vec<u8> {
    let params = model.flat_params();
    let mut out = Vec::with_capacity(12 + 4 * params.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.to_f64_lossy() as f32).to_le_bytes());
    }
    out
}

/// Hex SHA-256 of the architecture and the weights as stored (`f32`).
pub fn model_hash<T: Real>(model: &ModelParams<T>) -> String {
    let header = ModelHeader { meta: ModelMeta::default(), ..model_header(model, &ModelMeta::default()) };
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&header).expect("header serializes"));
    h.update(weight_blob(model));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Path of the weight blob that accompanies the model JSON at `path`.
pub fn model_blob_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

pub fn save_model<T: Real>(path: &Path, model: &ModelParams<T>, meta: &ModelMeta) -> Result<()> {
    model.validate()?;
    write_json(path, &model_header(model, meta))?;
    let mut w = BufWriter::new(File::create(model_blob_path(path))?);
    w.write_all(&weight_blob(model))?;
    w.flush()?;
    Ok(())
}

pub fn load_model<T: Real>(path: &Path) -> Result<(ModelParams<T>, ModelMeta)> {
    let header: ModelHeader = read_json(path)?;
    if header.format_version != MODEL_FORMAT_VERSION {
        return Err(format_err(format!(
            "model format version {} is not supported (expected {MODEL_FORMAT_VERSION})",
            header.format_version
        )));
    }
    let arch = Architecture {
        input_dims: header.input_dims,
        bins_per_octave: header.bins_per_octave,
        layers: header.layers.clone(),
        pool: header.pool,
        freq_weights: header.freq_weights.as_ref().map(|w| w.smoothness_penalty),
        readout: header.readout,
        head_outputs: None,
    };
    let mut layers = Vec::new();
    for spec in &arch.layers {
        layers.push(ConvLayer::zeros(*spec)?);
    }
    let mut model = ModelParams {
        input_dims: arch.input_dims,
        bins_per_octave: arch.bins_per_octave,
        layers,
        pool: arch.pool,
        freq_weights: header
            .freq_weights
            .as_ref()
            .map(|w| SmoothFreqWeights::ones(w.bins, T::lit(w.smoothness_penalty))),
        readout: arch.readout,
        head: header.head.map(|(o, i)| DenseHead { weights: Array2::zeros((o, i)), bias: ndarray::Array1::zeros(o) }),
    };
    let mut r = open(&model_blob_path(path))?;
    r.magic(MODEL_MAGIC)?;
    let version = r.u32()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(format_err(format!("weight blob version {version} is not supported")));
    }
    let n = r.u32()? as usize;
    if n != header.n_params || n != model.flat_params().len() {
        return Err(format_err(format!(
            "weight blob holds {n} values, architecture needs {}",
            model.flat_params().len()
        )));
    }
    let values: Vec<T> = r.f32s(n)?.into_iter().map(|v| T::lit(v as f64)).collect();
    r.end()?;
    model.set_flat_params(&values)?;
    model.validate()?;
    Ok((model, header.meta))
}

pub fn write_fingerprints(path: &Path, fps: &[Fingerprint]) -> Result<()> {
    write_json(path, &fps)
}

pub fn read_fingerprints(path: &Path) -> Result<Vec<Fingerprint>> {
    let fps: Vec<Fingerprint> = read_json(path)?;
    if fps.iter().any(|f| f.values.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("fingerprint"));
    }
    Ok(fps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convnet::{Activation, KernelExtent, PoolMode};
    use crate::cqt;
    use crate::phasefeat::build_featuremap_multiples;
    use crate::rhythmgen::{render, standard_pattern, RenderConfig};

    fn sample() -> (ActivationChannels<f64>, Rhythmogram<f64>, CqtConfig) {
        let cfg = RenderConfig { n_measures: 5, noise_level: 0.1, rng_seed: 2, ..RenderConfig::default() };
        let (ch, _) = render::<f64>(&standard_pattern(), &cfg).unwrap();
        let cq = CqtConfig::default();
        let kernel = cqt::plan(&cq, ch.n_frames()).unwrap();
        let rg = cqt::forward(&ch, &kernel).unwrap();
        (ch, rg, cq)
    }

    #[test]
    fn activations_round_trip_through_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ract");
        let (ch, _, _) = sample();
        write_activations(&p, &ch).unwrap();
        let back: ActivationChannels<f64> = read_activations(&p).unwrap();
        assert_eq!(back.signal_rate_hz, 100.0);
        for (a, b) in ch.data.iter().zip(back.data.iter()) {
            assert_eq!(*a as f32 as f64, *b);
        }
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"RACT");
        assert_eq!(bytes.len(), 4 + 4 + 4 + 8 + 4 * ch.data.len());
        std::fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read_activations::<f64>(&p).is_err());
    }

    #[test]
    fn rhythmogram_container_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.rgrm");
        let (_, rg, _) = sample();
        write_rhythmogram(&p, &rg).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"RGRM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize, 3);
        let header_len = 4 + 12 + 16 + 8;
        assert_eq!(bytes.len(), header_len + 8 * rg.coeffs.len());
        let re = f32::from_le_bytes(bytes[header_len + 8..header_len + 12].try_into().unwrap());
        assert_eq!(re, rg.coeffs[[0, 0, 1]].re as f32);

        let back: Rhythmogram<f64> = read_rhythmogram(&p).unwrap();
        assert_eq!(back.config, rg.config);
        assert_eq!(back.frame_times, rg.frame_times);
        std::fs::remove_file(sidecar_path(&p)).unwrap();
        let bare: Rhythmogram<f64> = read_rhythmogram(&p).unwrap();
        assert_eq!(bare.coeffs, back.coeffs);
        assert_eq!(bare.frame_times, rg.frame_times);
    }

    #[test]
    fn featuremap_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.rgfm");
        let (_, rg, cq) = sample();
        let fm = build_featuremap_multiples(&rg, &[2, 3]).unwrap();
        write_featuremap(&p, &fm, &cq).unwrap();
        let back: FeatureMap<f64> = read_featuremap(&p).unwrap();
        assert_eq!(back.row_kind, fm.row_kind);
        assert_eq!(back.channel_stride, 4);
        assert_eq!(back.frame_times, fm.frame_times);
        for (a, b) in fm.data.iter().zip(back.data.iter()) {
            assert_eq!(*a as f32 as f64, *b);
        }
    }

    #[test]
    fn times_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("beats.txt");
        write_times(&p, &[0.5, 1.0, 1.512345]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "0.500000\n1.000000\n1.512345\n");
        assert_eq!(read_times(&p).unwrap(), vec![0.5, 1.0, 1.512345]);
        std::fs::write(&p, "# beats\n1.0\n\nnope\n").unwrap();
        assert!(read_times(&p).is_err());
        std::fs::write(&p, "2.0\n1.0\n").unwrap();
        assert!(read_times(&p).is_err());
    }

    #[test]
    fn model_round_trip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let arch = Architecture {
            input_dims: (2, 3, 1, 20),
            bins_per_octave: 4,
            layers: vec![ConvLayerSpec::new(KernelExtent { rows: 3, frames: 1, bins: 5, depth: 2 }, 2, Activation::Relu)],
            pool: PoolSpec { mode: PoolMode::OctaveBands, ..PoolSpec::default() },
            freq_weights: Some(0.5),
            readout: Readout::FrameMean,
            head_outputs: Some(3),
        };
        let model = ModelParams::<f64>::init(&arch, 9).unwrap();
        let meta = ModelMeta { task: "test".into(), cqt: Some(CqtConfig::default()), harmonics: vec![1, 2] };
        save_model(&p, &model, &meta).unwrap();
        let (back, back_meta) = load_model::<f64>(&p).unwrap();
        assert_eq!(back_meta, meta);
        assert_eq!(back.layers[0].spec, model.layers[0].spec);
        for (a, b) in model.flat_params().iter().zip(back.flat_params()) {
            assert_eq!(*a as f32 as f64, b);
        }
        assert_eq!(model_hash(&back), model_hash(&model));
        let mut other = model.clone();
        other.layers[0].bias[0] += 1.0;
        assert_ne!(model_hash(&other), model_hash(&model));

        let blob = model_blob_path(&p);
        let mut bytes = std::fs::read(&blob).unwrap();
        bytes[4] = 9;
        std::fs::write(&blob, &bytes).unwrap();
        assert!(load_model::<f64>(&p).is_err());
    }

    #[test]
    fn fingerprints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fp.json");
        let fp = Fingerprint { values: vec![0.25, 1.0], pattern_id: Some("a".into()), model_hash: "abc".into(), pool_mode: PoolMode::FullRange };
        write_fingerprints(&p, std::slice::from_ref(&fp)).unwrap();
        assert_eq!(read_fingerprints(&p).unwrap(), vec![fp]);
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert!(v.is_array() && v[0]["model_hash"] == "abc");
    }
}
