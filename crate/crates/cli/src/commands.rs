use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::{json, Value};

use logrhythm::convnet::{self, TrainConfig};
use logrhythm::cqt::{self, bin_of_frequency, CqtConfig};
use logrhythm::io::{self, ModelMeta};
use logrhythm::onsets::{self, BandSpec};
use logrhythm::phasefeat;
use logrhythm::rhythmgen::{self, DrumPattern, RenderConfig};
use logrhythm::tracker::{self, TempoDataConfig, TrackOptions, TEMPO_HARMONICS};
use logrhythm::{ActivationChannels64, Beats, ModelParams64, Rhythmogram64};

use crate::config::FileConfig;
use crate::{
    AnalyzeArgs, CqtArgs, DownbeatArgs, EvalArgs, FeatureKind, GenArgs, InputArgs, MatchArgs, ModelTask, OnsetKind,
    PickArgs, TargetsArgs, TempoArgs, TrackArgs, TrainArgs,
};

const DEFAULT_TOLERANCE: f64 = 0.07;
const DEFAULT_FINGERPRINT_SEED: u64 = 7;

pub struct Output {
    pub json: bool,
}

impl Output {
    fn emit(&self, value: Value, text: impl FnOnce() -> String) {
        if self.json {
            println!("{}", serde_json::to_string_pretty(&value).expect("serializable"));
        } else {
            print!("{}", text());
        }
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn cqt_config(args: &CqtArgs, file: &FileConfig, signal_rate_hz: f64) -> Result<CqtConfig> {
    let d = CqtConfig::default();
    let cfg = CqtConfig {
        f_min: pick(args.f_min, file.f_min, d.f_min),
        f_max: pick(args.f_max, file.f_max, d.f_max),
        bins_per_octave: pick(args.bpo, file.bpo, d.bins_per_octave),
        signal_rate_hz,
        hop_frames: pick(args.hop, file.hop, d.hop_frames),
        tf_tradeoff: pick(args.tf_tradeoff, file.tf_tradeoff, d.tf_tradeoff),
        q_cycles: pick(args.q_cycles, file.q_cycles, d.q_cycles),
        window: d.window,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn track_options(args: &PickArgs, file: &FileConfig) -> Result<TrackOptions> {
    let d = TrackOptions::default();
    let width = match args.width.as_ref().or(file.width.as_ref()) {
        Some(s) => parse_ratio(s)?,
        None => d.width_octaves,
    };
    let opts = TrackOptions {
        width_octaves: width,
        peak_threshold: pick(args.threshold, file.peak_threshold, d.peak_threshold),
        min_separation: pick(args.min_separation, file.min_separation, d.min_separation),
        ..d
    };
    opts.validate()?;
    Ok(opts)
}

fn parse_ratio(s: &str) -> Result<Beats> {
    let r: Beats = s.trim().parse().map_err(|_| anyhow!("expected a ratio such as 2/3, got {s:?}"))?;
    if r <= Beats::from_integer(0) {
        bail!("ratio must be positive, got {s}");
    }
    Ok(r)
}

fn is_wav(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

fn load_input(input: &InputArgs) -> Result<ActivationChannels64> {
    let path = &input.input;
    let ch = if is_wav(path) {
        let clip: onsets::AudioClip<f64> = onsets::read_wav(path).with_context(|| format!("reading {}", path.display()))?;
        match input.onsets {
            OnsetKind::Flux => onsets::band_flux(&clip, &BandSpec::default_for(clip.sample_rate))?,
            OnsetKind::Pitched => onsets::pitched_onsets(&clip)?,
        }
    } else {
        io::read_activations(path).with_context(|| format!("reading {}", path.display()))?
    };
    if ch.n_frames() == 0 || ch.n_channels() == 0 {
        bail!("{} holds no activation data", path.display());
    }
    Ok(ch)
}

fn pattern_by_name(name: &str) -> Result<DrumPattern> {
    match name {
        "standard" => Ok(rhythmgen::standard_pattern()),
        "accented" => Ok(rhythmgen::accented_pattern()),
        other => {
            let corpus = rhythmgen::pattern_corpus();
            let i: usize = other
                .parse()
                .map_err(|_| anyhow!("unknown pattern {other:?}; use standard, accented or 0-{}", corpus.len() - 1))?;
            corpus.get(i).cloned().ok_or_else(|| anyhow!("pattern index {i} is out of range 0-{}", corpus.len() - 1))
        }
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

pub fn gen(a: &GenArgs, file: &FileConfig, out: &Output) -> Result<()> {
    let d = RenderConfig::default();
    let rc = RenderConfig {
        tempo_bpm: pick(a.tempo, file.tempo, d.tempo_bpm),
        signal_rate_hz: pick(a.rate, file.rate, d.signal_rate_hz),
        n_measures: pick(a.measures, file.measures, d.n_measures),
        noise_level: 0.0,
        onset_width_frames: pick(a.onset_width, file.onset_width, d.onset_width_frames),
        rng_seed: pick(a.seed, file.seed, d.rng_seed),
    };
    let noise = pick(a.noise, file.noise, d.noise_level);
    if !(0.0..1.0).contains(&noise) {
        bail!("noise must be in [0, 1), got {noise}");
    }
    let pattern = pattern_by_name(&a.pattern)?;
    let (mut ch, mut ann) = rhythmgen::render::<f64>(&pattern, &rc)?;
    if let Some(s) = &a.scale {
        let r = parse_ratio(s)?;
        ch = rhythmgen::time_scale(&ch, r)?;
        ann = ann.time_scaled(r);
    }
    if noise > 0.0 {
        rhythmgen::add_noise(&mut ch, noise, rc.rng_seed)?;
    }
    let beats_out = a.beats_out.clone().unwrap_or_else(|| sibling(&a.out, ".beats.txt"));
    let downbeats_out = a.downbeats_out.clone().unwrap_or_else(|| sibling(&a.out, ".downbeats.txt"));
    io::write_activations(&a.out, &ch)?;
    io::write_times(&beats_out, &ann.beat_times)?;
    io::write_times(&downbeats_out, &ann.downbeat_times)?;
    out.emit(
        json!({
            "activations": a.out,
            "beats": beats_out,
            "downbeats": downbeats_out,
            "channels": ch.n_channels(),
            "frames": ch.n_frames(),
            "signal_rate_hz": ch.signal_rate_hz,
            "tempo_bpm": rc.tempo_bpm,
            "n_beats": ann.beat_times.len(),
        }),
        || format!("wrote {} ({} channels x {} frames)\n", a.out.display(), ch.n_channels(), ch.n_frames()),
    );
    Ok(())
}

struct Analysis {
    kernel: cqt::CqtKernel<f64>,
    rg: Rhythmogram64,
}

fn run_cqt(ch: &ActivationChannels64, cfg: &CqtConfig) -> Result<Analysis> {
    let kernel = cqt::plan::<f64>(cfg, ch.n_frames())?;
    let rg = cqt::forward(ch, &kernel)?;
    Ok(Analysis { kernel, rg })
}

/// Bin with the largest channel-summed magnitude averaged over interior frames.
fn interior_peak(an: &Analysis) -> (usize, std::ops::Range<usize>) {
    let frames = tracker::interior_frames(&an.kernel);
    let mags = an.rg.channel_sum_magnitudes();
    let mean = mags.slice(ndarray::s![frames.clone(), ..]).sum_axis(ndarray::Axis(0));
    let best = (0..mean.len()).fold(0, |b, i| if mean[i] > mean[b] { i } else { b });
    (best, frames)
}

pub fn analyze(a: &AnalyzeArgs, file: &FileConfig, out: &Output) -> Result<()> {
    let ch = load_input(&a.input)?;
    let cfg = cqt_config(&a.cqt, file, ch.signal_rate_hz)?;
    let an = run_cqt(&ch, &cfg)?;
    io::write_rhythmogram(&a.out, &an.rg)?;
    if let Some(path) = &a.features {
        let fm = match a.feature_kind {
            FeatureKind::Neighbor => phasefeat::build_featuremap_neighbor(&an.rg)?,
            FeatureKind::Multiples => phasefeat::build_featuremap_multiples(&an.rg, &a.multiples)?,
        };
        io::write_featuremap(path, &fm, &cfg)?;
    }
    if let Some(path) = &a.csv {
        let mags = match a.channel {
            Some(c) if c >= an.rg.n_channels() => bail!("channel {c} out of range ({} channels)", an.rg.n_channels()),
            Some(c) => an.rg.magnitudes().index_axis(ndarray::Axis(0), c).to_owned(),
            None => an.rg.channel_sum_magnitudes(),
        };
        let mut text = String::from("time_s");
        for f in &an.rg.bin_freqs {
            write!(text, ",{f}").expect("string write");
        }
        text.push('\n');
        for (t, row) in an.rg.frame_times.iter().zip(mags.outer_iter()) {
            write!(text, "{t}").expect("string write");
            for v in row {
                write!(text, ",{v}").expect("string write");
            }
            text.push('\n');
        }
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    let (peak, frames) = interior_peak(&an);
    let peak_hz = cfg.bin_frequency(peak);
    out.emit(
        json!({
            "rhythmogram": a.out,
            "channels": an.rg.n_channels(),
            "frames": an.rg.n_frames(),
            "bins": an.rg.n_bins(),
            "interior_frames": [frames.start, frames.end],
            "peak_bin": peak,
            "peak_hz": peak_hz,
            "peak_bpm": 60.0 * peak_hz,
        }),
        || {
            format!(
                "wrote {} ({} channels x {} frames x {} bins); interior peak at bin {peak} ({peak_hz:.4} Hz)\n",
                a.out.display(),
                an.rg.n_channels(),
                an.rg.n_frames(),
                an.rg.n_bins()
            )
        },
    );
    Ok(())
}

fn load_tempo_model(path: &Path) -> Result<(ModelParams64, ModelMeta, CqtConfig)> {
    let (model, meta): (ModelParams64, ModelMeta) =
        io::load_model(path).with_context(|| format!("loading model {}", path.display()))?;
    if meta.task != "tempo" {
        bail!("{} is a {:?} model, not a tempo model", path.display(), meta.task);
    }
    if meta.harmonics != TEMPO_HARMONICS {
        bail!("model was trained on harmonics {:?}, expected {:?}", meta.harmonics, TEMPO_HARMONICS);
    }
    let cfg = meta.cqt.clone().ok_or_else(|| anyhow!("model file does not record its CQT settings"))?;
    Ok((model, meta, cfg))
}

struct TempoEstimate {
    bpm: f64,
    bin: usize,
    source: &'static str,
}

fn estimate_tempo(ch: &ActivationChannels64, cfg: &CqtConfig, model: Option<&Path>) -> Result<TempoEstimate> {
    match model {
        Some(path) => {
            let (model, _, mcfg) = load_tempo_model(path)?;
            if mcfg.signal_rate_hz != ch.signal_rate_hz {
                bail!("model expects {} Hz activations, input is {} Hz", mcfg.signal_rate_hz, ch.signal_rate_hz);
            }
            if model.input_dims.1 != ch.n_channels() {
                bail!("model expects {} channels, input has {}", model.input_dims.1, ch.n_channels());
            }
            let kernel = cqt::plan::<f64>(&mcfg, ch.n_frames())?;
            let x = tracker::tempo_features(ch, &kernel)?;
            let scores = tracker::tempo_scores(&model, &x, mcfg.n_bins())?;
            let bpm = tracker::estimate_tempo(&scores, &mcfg)?;
            Ok(TempoEstimate { bpm, bin: bin_of_frequency(cfg, bpm / 60.0)?, source: "model" })
        }
        None => {
            let kernel = cqt::plan::<f64>(cfg, ch.n_frames())?;
            let x = tracker::tempo_features(ch, &kernel)?;
            let scores = tracker::heuristic_tempo_scores(&x, cfg);
            let bpm = tracker::estimate_tempo(&scores, cfg)?;
            Ok(TempoEstimate { bpm, bin: bin_of_frequency(cfg, bpm / 60.0)?, source: "harmonic_sum" })
        }
    }
}

pub fn tempo(a: &TempoArgs, file: &FileConfig, out: &Output) -> Result<()> {
    let ch = load_input(&a.input)?;
    let cfg = cqt_config(&a.cqt, file, ch.signal_rate_hz)?;
    let est = estimate_tempo(&ch, &cfg, a.model.as_deref())?;
    out.emit(json!({ "tempo_bpm": est.bpm, "bin": est.bin, "source": est.source }), || {
        format!("{:.2} BPM (bin {}, {})\n", est.bpm, est.bin, est.source)
    });
    Ok(())
}

enum Tracking {
    Beats,
    Downbeats,
    /// Downbeats chosen among the beats, with this many beats per measure.
    DownbeatsOnBeats(usize),
}

fn run_tracker(
    t: &TrackArgs,
    file: &FileConfig,
    mode: Tracking,
    freq: impl FnOnce(&ActivationChannels64, &CqtConfig) -> Result<(f64, Option<TempoEstimate>)>,
    out: &Output,
) -> Result<()> {
    let ch = load_input(&t.input)?;
    let cfg = cqt_config(&t.cqt, file, ch.signal_rate_hz)?;
    let opts = track_options(&t.pick, file)?;
    let (hz, tempo) = freq(&ch, &cfg)?;
    let bin = bin_of_frequency(&cfg, hz).with_context(|| format!("tracking periodicity {hz:.4} Hz"))?;
    let an = run_cqt(&ch, &cfg)?;
    let grid = match mode {
        Tracking::Beats => tracker::track_beats_with(&an.rg, bin, &an.kernel, &opts)?,
        Tracking::Downbeats => tracker::track_downbeats_with(&an.rg, bin, &an.kernel, &opts)?,
        Tracking::DownbeatsOnBeats(per_measure) => {
            let est = tempo.as_ref().context("downbeats on beats need a tempo")?;
            let beats = tracker::track_beats_with(&an.rg, est.bin, &an.kernel, &opts)?;
            tracker::track_downbeats_on_beats(&an.rg, bin, &beats, per_measure, &an.kernel, &opts)?
        }
    };
    io::write_times(&t.out, &grid.times)?;
    out.emit(
        json!({
            "output": t.out,
            "level": grid.level,
            "bin": bin,
            "frequency_hz": cfg.bin_frequency(bin),
            "tempo_bpm": tempo.as_ref().map(|e| e.bpm),
            "tempo_source": tempo.as_ref().map(|e| e.source),
            "times": grid.times,
            "low_confidence": grid.low_confidence,
        }),
        || format!("wrote {} events to {} (bin {bin})\n", grid.len(), t.out.display()),
    );
    Ok(())
}

fn tempo_for(t: &TrackArgs, file: &FileConfig, ch: &ActivationChannels64, cfg: &CqtConfig) -> Result<TempoEstimate> {
    match t.tempo.or(file.tempo) {
        Some(bpm) if bpm.is_finite() && bpm > 0.0 => Ok(TempoEstimate { bpm, bin: bin_of_frequency(cfg, bpm / 60.0)?, source: "given" }),
        Some(bpm) => bail!("tempo must be positive, got {bpm}"),
        None => estimate_tempo(ch, cfg, t.model.as_deref()),
    }
}

pub fn beats(a: &TrackArgs, file: &FileConfig, out: &Output) -> Result<()> {
    run_tracker(
        a,
        file,
        Tracking::Beats,
        |ch, cfg| {
            let est = tempo_for(a, file, ch, cfg)?;
            Ok((est.bpm / 60.0, Some(est)))
        },
        out,
    )
}

pub fn downbeats(a: &DownbeatArgs, file: &FileConfig, out: &Output) -> Result<()> {
    if a.beats_per_measure == 0 {
        bail!("beats per measure must be at least 1");
    }
    let mode = if a.on_beats { Tracking::DownbeatsOnBeats(a.beats_per_measure as usize) } else { Tracking::Downbeats };
    run_tracker(
        &a.track,
        file,
        mode,
        |ch, cfg| {
            // Beat-level tracking needs the tempo even when the measure length is given.
            let tempo = if a.on_beats || a.measure_secs.is_none() { Some(tempo_for(&a.track, file, ch, cfg)?) } else { None };
            let hz = match (a.measure_secs, &tempo) {
                (Some(s), _) if s.is_finite() && s > 0.0 => 1.0 / s,
                (Some(s), _) => bail!("measure length must be positive, got {s}"),
                (None, Some(est)) => est.bpm / 60.0 / a.beats_per_measure as f64,
                (None, None) => unreachable!("tempo is estimated when no measure length is given"),
            };
            Ok((hz, tempo))
        },
        out,
    )
}

pub fn targets(a: &TargetsArgs, file: &FileConfig, out: &Output) -> Result<()> {
    let times = io::read_times(&a.annotations)?;
    if times.is_empty() {
        bail!("{} holds no annotation times", a.annotations.display());
    }
    let rate = pick(a.rate, file.rate, 100.0);
    let cfg = cqt_config(&a.cqt, file, rate)?;
    let duration = a.duration.unwrap_or(times[times.len() - 1] + 1.0);
    if !(duration > 0.0) {
        bail!("duration must be positive");
    }
    let kernel = cqt::plan::<f64>(&cfg, (duration * rate).round() as usize)?;
    let ta = tracker::make_targets(&times, &kernel)?;
    let coeffs = ndarray::Zip::from(&ta.magnitudes)
        .and(&ta.phases)
        .map_collect(|&m, &p| num_complex::Complex::from_polar(m, p))
        .insert_axis(ndarray::Axis(0));
    let rg = Rhythmogram64 { coeffs, frame_times: ta.frame_times.clone(), bin_freqs: ta.bin_freqs.clone(), config: cfg };
    io::write_rhythmogram(&a.out, &rg)?;
    let argmax = ta.argmax_bins();
    out.emit(
        json!({ "output": a.out, "frames": rg.n_frames(), "bins": rg.n_bins(), "argmax_bins": argmax }),
        || format!("wrote {} target frames x {} bins to {}\n", rg.n_frames(), rg.n_bins(), a.out.display()),
    );
    Ok(())
}

pub fn train(a: &TrainArgs, file: &FileConfig, out: &Output) -> Result<()> {
    let rate = pick(None, file.rate, 100.0);
    let cfg = cqt_config(&a.cqt, file, rate)?;
    let seed = pick(a.seed, file.seed, 0);
    match a.task {
        ModelTask::Fingerprint => {
            let model = ModelParams64::init(&tracker::fingerprint_architecture(a.channels, &cfg), seed)?;
            let meta = ModelMeta { task: "fingerprint".into(), cqt: Some(cfg), harmonics: Vec::new() };
            io::save_model(&a.out, &model, &meta)?;
            let hash = io::model_hash(&model);
            out.emit(json!({ "output": a.out, "task": "fingerprint", "model_hash": hash }), || {
                format!("wrote fingerprint model {} ({hash})\n", a.out.display())
            });
            Ok(())
        }
        ModelTask::Tempo => train_tempo(a, file, cfg, seed, out),
    }
}

fn train_tempo(a: &TrainArgs, file: &FileConfig, cfg: CqtConfig, seed: u64, out: &Output) -> Result<()> {
    let d = TempoDataConfig::default();
    let lo = a.tempo_min.unwrap_or(70.0);
    let hi = a.tempo_max.unwrap_or(185.0);
    let step = a.tempo_step.unwrap_or(5.0);
    if !(lo > 0.0 && hi >= lo && step > 0.0) {
        bail!("need 0 < tempo-min <= tempo-max and a positive tempo-step");
    }
    let tempi: Vec<f64> = (0..).map(|i| lo + step * i as f64).take_while(|&t| t <= hi + 1e-9).collect();
    let data_cfg = TempoDataConfig {
        tempi_bpm: tempi,
        n_examples: pick(a.examples, file.examples, d.n_examples),
        duration_secs: a.duration.unwrap_or(d.duration_secs),
        noise_level: pick(a.noise, file.noise, d.noise_level),
        rng_seed: seed,
    };
    if !(0.0..1.0).contains(&a.holdout) {
        bail!("holdout must be in [0, 1)");
    }
    let corpus: Vec<DrumPattern> = rhythmgen::pattern_corpus().into_iter().filter(|p| p.n_channels() == a.channels).collect();
    if corpus.is_empty() {
        bail!("no built-in patterns have {} channels", a.channels);
    }
    let data = tracker::synthetic_tempo_dataset::<f64>(&corpus, &data_cfg, &cfg)?;
    let n_test = (a.holdout * data.len() as f64).round() as usize;
    let (train_set, test_set) = data.split_at(data.len() - n_test);
    if train_set.is_empty() {
        bail!("no training examples left after the holdout split");
    }
    let tc = TrainConfig::default();
    let tc = TrainConfig {
        learning_rate: pick(a.lr, file.lr, tc.learning_rate),
        epochs: pick(a.epochs, file.epochs, tc.epochs),
        batch_size: pick(a.batch, file.batch, tc.batch_size),
        l2: pick(a.l2, file.l2, tc.l2),
        rng_seed: seed,
        ..tc
    };
    let arch = tracker::tempo_architecture(a.channels, &cfg, a.kernel_bins, a.filters);
    let init = ModelParams64::init(&arch, seed)?;
    let (model, history) = convnet::train_tempo(&init, train_set, &tc)?;
    let accuracy = |set: &[(convnet::Tensor<f64>, usize)]| -> Result<Option<f64>> {
        if set.is_empty() {
            return Ok(None);
        }
        let mut hits = 0;
        for (x, label) in set {
            let bin = convnet::predict_tempo_bin(&model, x)?;
            if bin.abs_diff(*label) <= 1 {
                hits += 1;
            }
        }
        Ok(Some(hits as f64 / set.len() as f64))
    };
    let train_acc = accuracy(train_set)?;
    let test_acc = accuracy(test_set)?;
    let meta = ModelMeta { task: "tempo".into(), cqt: Some(cfg), harmonics: TEMPO_HARMONICS.to_vec() };
    io::save_model(&a.out, &model, &meta)?;
    let hash = io::model_hash(&model);
    out.emit(
        json!({
            "output": a.out,
            "task": "tempo",
            "examples": data.len(),
            "held_out": n_test,
            "loss": history,
            "train_accuracy": train_acc,
            "held_out_accuracy": test_acc,
            "model_hash": hash,
        }),
        || {
            let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.1}%", 100.0 * v));
            format!(
                "trained on {} examples, final loss {:.4}; accuracy within one bin: train {}, held out {}\nwrote {}\n",
                train_set.len(),
                history.last().copied().unwrap_or(f64::NAN),
                pct(train_acc),
                pct(test_acc),
                a.out.display()
            )
        },
    );
    Ok(())
}

pub fn matches(a: &MatchArgs, file: &FileConfig, out: &Output) -> Result<()> {
    if a.query.is_none() && a.save.is_none() {
        bail!("nothing to do: give --query and/or --save");
    }
    let load = |p: &Path| -> Result<ActivationChannels64> {
        load_input(&InputArgs { input: p.to_path_buf(), onsets: OnsetKind::Flux })
    };
    let query = a.query.as_deref().map(load).transpose()?;
    let corpus_ch: Vec<(String, ActivationChannels64)> = a
        .corpus
        .iter()
        .map(|p| Ok((p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(), load(p)?)))
        .collect::<Result<_>>()?;
    let first = query.as_ref().or(corpus_ch.first().map(|(_, c)| c));
    let Some(first) = first else {
        bail!("no activations given");
    };
    let (model, cfg) = match &a.model {
        Some(path) => {
            let (model, meta): (ModelParams64, ModelMeta) = io::load_model(path)?;
            if meta.task != "fingerprint" {
                bail!("{} is a {:?} model, not a fingerprint model", path.display(), meta.task);
            }
            let cfg = meta.cqt.ok_or_else(|| anyhow!("model file does not record its CQT settings"))?;
            (model, cfg)
        }
        None => {
            let cfg = cqt_config(&a.cqt, file, first.signal_rate_hz)?;
            let seed = pick(a.seed, file.seed, DEFAULT_FINGERPRINT_SEED);
            (ModelParams64::init(&tracker::fingerprint_architecture(first.n_channels(), &cfg), seed)?, cfg)
        }
    };
    let mut corpus: Vec<tracker::Fingerprint> = match &a.fingerprints {
        Some(p) => io::read_fingerprints(p)?,
        None => Vec::new(),
    };
    for (id, ch) in &corpus_ch {
        let mut fp = tracker::fingerprint(ch, &cfg, &model)?;
        fp.pattern_id = Some(id.clone());
        corpus.push(fp);
    }
    if let Some(p) = &a.save {
        io::write_fingerprints(p, &corpus)?;
    }
    let Some(q) = query else {
        out.emit(json!({ "saved": a.save, "fingerprints": corpus.len() }), || {
            format!("saved {} fingerprints\n", corpus.len())
        });
        return Ok(());
    };
    let qfp = tracker::fingerprint(&q, &cfg, &model)?;
    let hits = tracker::match_fingerprints(&qfp, &corpus, a.k)?;
    let rows: Vec<Value> = hits
        .iter()
        .map(|m| json!({ "index": m.index, "pattern_id": corpus[m.index].pattern_id, "similarity": m.similarity }))
        .collect();
    out.emit(json!({ "model_hash": qfp.model_hash, "matches": rows }), || {
        let mut s = String::new();
        for m in &hits {
            let id = corpus[m.index].pattern_id.as_deref().unwrap_or("-");
            writeln!(s, "{:>4}  {:<24} {:.6}", m.index, id, m.similarity).expect("string write");
        }
        s
    });
    Ok(())
}

pub fn eval(a: &EvalArgs, file: &FileConfig, out: &Output) -> Result<()> {
    let reference = io::read_times(&a.reference)?;
    let estimate = io::read_times(&a.estimate)?;
    let tol = pick(a.tol, file.tolerance, DEFAULT_TOLERANCE);
    let score = match (a.start, a.end) {
        (None, None) => tracker::evaluate_beats(&estimate, &reference, tol)?,
        (s, e) => tracker::evaluate_beats_between(&estimate, &reference, tol, s.unwrap_or(f64::NEG_INFINITY), e.unwrap_or(f64::INFINITY))?,
    };
    out.emit(serde_json::to_value(score)?, || {
        format!("precision {:.4}  recall {:.4}  F {:.4}  ({} matched)\n", score.precision, score.recall, score.f_measure, score.matched)
    });
    Ok(())
}
