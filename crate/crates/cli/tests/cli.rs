use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use logrhythm::tracker::BeatScore;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_logrhythm"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn logrhythm")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let mut all = args.to_vec();
    all.push("--json");
    serde_json::from_str(&ok(&all)).expect("valid JSON on stdout")
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn gen(dir: &Path, name: &str, extra: &[&str]) -> String {
    let out = p(dir, name);
    let mut args = vec!["gen", "-o", &out];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

/// Argmax of the mean CSV magnitudes over rows whose time is in `[lo, hi]`.
fn csv_peak(path: &str, lo: f64, hi: f64) -> usize {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let n_bins = lines.next().unwrap().split(',').count() - 1;
    let mut sum = vec![0.0f64; n_bins];
    for line in lines {
        let mut cells = line.split(',').map(|c| c.parse::<f64>().unwrap());
        let t = cells.next().unwrap();
        if t >= lo && t <= hi {
            for (s, v) in sum.iter_mut().zip(cells) {
                *s += v;
            }
        }
    }
    (0..n_bins).fold(0, |b, i| if sum[i] > sum[b] { i } else { b })
}

#[test]
fn gen_is_byte_stable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["--tempo", "120", "--measures", "17", "--noise", "0.15", "--seed", "1"];
    gen(a.path(), "x.ract", &args);
    gen(b.path(), "x.ract", &args);
    for f in ["x.ract", "x.beats.txt", "x.downbeats.txt"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{f}");
    }
    let beats = std::fs::read_to_string(a.path().join("x.beats.txt")).unwrap();
    assert_eq!(beats.lines().count(), 68);
    assert_eq!(std::fs::read_to_string(a.path().join("x.downbeats.txt")).unwrap().lines().count(), 17);
}

#[test]
fn invalid_arguments_exit_nonzero() {
    let d = tempfile::tempdir().unwrap();
    let out = p(d.path(), "x.ract");
    for args in [
        vec!["gen", "--tempo", "0", "-o", &out],
        vec!["gen", "--noise", "1.5", "-o", &out],
        vec!["gen", "--pattern", "nope", "-o", &out],
        vec!["gen", "--scale", "-2/3", "-o", &out],
    ] {
        let r = run(&args);
        assert!(!r.status.success(), "{args:?}");
        assert!(String::from_utf8_lossy(&r.stderr).starts_with("error:"));
    }

    let empty = p(d.path(), "empty.ract");
    std::fs::write(&empty, b"").unwrap();
    assert!(!run(&["analyze", &empty, "-o", &p(d.path(), "e.rgrm")]).status.success());
    let mut header = b"RACT".to_vec();
    header.extend(3u32.to_le_bytes());
    header.extend(0u32.to_le_bytes());
    header.extend(100f64.to_le_bytes());
    std::fs::write(&empty, header).unwrap();
    let r = run(&["analyze", &empty, "-o", &p(d.path(), "e.rgrm")]);
    assert!(!r.status.success());

    let act = gen(d.path(), "ok.ract", &[]);
    assert!(!run(&["analyze", &act, "--f-max", "60", "-o", &p(d.path(), "n.rgrm")]).status.success());
    assert!(!run(&["analyze", &p(d.path(), "missing.ract"), "-o", &p(d.path(), "n.rgrm")]).status.success());
}

#[test]
fn analyze_pair_shifts_by_fourteen_bins() {
    let d = tempfile::tempdir().unwrap();
    let common = ["--tempo", "120", "--measures", "17", "--noise", "0.15"];
    let a = gen(d.path(), "a.ract", &[&common[..], &["--seed", "1"]].concat());
    let b = gen(d.path(), "b.ract", &[&common[..], &["--seed", "2", "--scale", "2/3"]].concat());

    let peaks = |bpo: &str| {
        let mut out = vec![];
        for (src, dur) in [(&a, 34.0), (&b, 51.0)] {
            let csv = format!("{src}.{bpo}.csv");
            let j = ok_json(&["analyze", src, "--bpo", bpo, "-o", &format!("{src}.rgrm"), "--csv", &csv]);
            let from_csv = csv_peak(&csv, 4.0, dur - 4.0);
            assert_eq!(j["peak_bin"].as_u64().unwrap() as usize, from_csv);
            out.push(from_csv as i64);
        }
        out[0] - out[1]
    };
    let s24 = peaks("24");
    assert!((s24 - 14).abs() <= 1, "{s24}");
    let s48 = peaks("48");
    assert!((s48 - 28).abs() <= 1, "{s48}");
}

#[test]
fn analyze_writes_documented_containers() {
    let d = tempfile::tempdir().unwrap();
    let a = gen(d.path(), "a.ract", &["--measures", "8"]);
    let rg = p(d.path(), "a.rgrm");
    let fm = p(d.path(), "a.rgfm");
    let j = ok_json(&["analyze", &a, "-o", &rg, "--features", &fm, "--feature-kind", "multiples"]);
    let frames = j["frames"].as_u64().unwrap() as usize;
    assert_eq!(j["bins"], 121);

    let bytes = std::fs::read(&rg).unwrap();
    assert_eq!(&bytes[..4], b"RGRM");
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    assert_eq!((u32_at(4), u32_at(8), u32_at(12)), (3, frames, 121));
    let rate = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    assert_eq!(rate, 100.0);
    assert_eq!(bytes.len(), 4 + 12 + 16 + 8 + 3 * frames * 121 * 8);

    let side: Value = serde_json::from_str(&std::fs::read_to_string(format!("{fm}.json")).unwrap()).unwrap();
    let kinds = side["row_kind"].as_array().unwrap();
    assert_eq!(kinds.len(), 3 * 7);
    let back: logrhythm::FeatureMap64 = logrhythm::io::read_featuremap(Path::new(&fm)).unwrap();
    assert_eq!(back.n_rows(), 21);
    assert_eq!(back.n_frames(), frames);
}

#[test]
fn beats_then_eval_scores_perfectly() {
    let d = tempfile::tempdir().unwrap();
    let a = gen(d.path(), "a.ract", &["--tempo", "120"]);
    let est = p(d.path(), "a.est.txt");
    let j = ok_json(&["beats", &a, "--tempo", "120", "-o", &est]);
    assert_eq!(j["bin"], 48);
    assert_eq!(j["level"], "beat");
    let reference = p(d.path(), "a.beats.txt");
    let score: BeatScore =
        serde_json::from_value(ok_json(&["eval", &reference, &est, "--tol", "0.07", "--start", "1", "--end", "33"])).unwrap();
    assert_eq!(score.f_measure, 1.0);

    // Without a given tempo the heuristic estimate must land on the same grid.
    let est2 = p(d.path(), "b.est.txt");
    ok(&["beats", &a, "-o", &est2]);
    let s: BeatScore = serde_json::from_value(ok_json(&["eval", &reference, &est2, "--start", "1", "--end", "33"])).unwrap();
    assert_eq!(s.f_measure, 1.0);
}

#[test]
fn downbeats_on_accented_pattern() {
    let d = tempfile::tempdir().unwrap();
    let a = gen(d.path(), "a.ract", &["--pattern", "accented", "--tempo", "120"]);
    let est = p(d.path(), "a.db.txt");
    let j = ok_json(&["downbeats", &a, "--tempo", "120", "-o", &est]);
    assert_eq!(j["bin"], 0);
    let s: BeatScore = serde_json::from_value(ok_json(&[
        "eval",
        &p(d.path(), "a.downbeats.txt"),
        &est,
        "--start",
        "4",
        "--end",
        "30",
    ]))
    .unwrap();
    assert_eq!(s.f_measure, 1.0);
    // An 80 BPM measure (1/3 Hz) lies below the lowest bin.
    assert!(!run(&["downbeats", &a, "--tempo", "80", "-o", &est]).status.success());
}

#[test]
fn downbeats_on_beats_with_noise() {
    let d = tempfile::tempdir().unwrap();
    let a = gen(d.path(), "a.ract", &["--pattern", "accented", "--tempo", "140", "--noise", "0.15", "--seed", "5"]);
    let est = p(d.path(), "a.db.txt");
    let j = ok_json(&["downbeats", &a, "--tempo", "140", "--on-beats", "-o", &est]);
    assert_eq!(j["level"], "downbeat");
    let s: BeatScore =
        serde_json::from_value(ok_json(&["eval", &p(d.path(), "a.downbeats.txt"), &est, "--start", "4", "--end", "25"])).unwrap();
    assert_eq!(s.f_measure, 1.0);
}

#[test]
fn eval_identical_files() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), "a.ract", &["--measures", "4"]);
    let r = p(d.path(), "a.beats.txt");
    let j = ok_json(&["eval", &r, &r]);
    assert_eq!(j["f_measure"], 1.0);
    assert_eq!(j["precision"], 1.0);
    assert_eq!(j["recall"], 1.0);
    let text = ok(&["eval", &r, &r]);
    assert!(text.contains("F 1.0000"));
}

#[test]
fn train_then_tempo_with_model() {
    let d = tempfile::tempdir().unwrap();
    let model = p(d.path(), "tempo.json");
    let j = ok_json(&["train", "--examples", "60", "--epochs", "40", "--seed", "3", "-o", &model]);
    assert_eq!(j["task"], "tempo");
    assert_eq!(j["examples"], 60);
    assert!(Path::new(&format!("{}", PathBuf::from(&model).with_extension("bin").display())).exists());

    for (bpm, bin) in [("120", 48i64), ("90", 38)] {
        let a = gen(d.path(), &format!("t{bpm}.ract"), &["--tempo", bpm]);
        let t = ok_json(&["tempo", &a, "--model", &model]);
        assert_eq!(t["source"], "model");
        let got = t["bin"].as_i64().unwrap();
        assert!((got - bin).abs() <= 1, "{bpm} BPM: bin {got}");
    }

    let fp = p(d.path(), "fp.json");
    ok(&["train", "--task", "fingerprint", "-o", &fp]);
    let a = p(d.path(), "t120.ract");
    assert!(!run(&["tempo", &a, "--model", &fp]).status.success());
}

#[test]
fn targets_from_uniform_annotations() {
    let d = tempfile::tempdir().unwrap();
    let ann = p(d.path(), "ann.txt");
    let times: String = (0..60).map(|i| format!("{}\n", 0.5 * i as f64)).collect();
    std::fs::write(&ann, times).unwrap();
    let j = ok_json(&["targets", &ann, "--duration", "30", "-o", &p(d.path(), "ta.rgrm")]);
    let bins: Vec<u64> = j["argmax_bins"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    // Frames between 4 s and 26 s are clear of both ends by half the longest window.
    let frames = j["frames"].as_u64().unwrap() as usize;
    assert_eq!(frames, bins.len());
    let rg: logrhythm::Rhythmogram64 = logrhythm::io::read_rhythmogram(Path::new(&p(d.path(), "ta.rgrm"))).unwrap();
    for (t, b) in rg.frame_times.iter().zip(&bins) {
        if (4.0..=26.0).contains(t) {
            assert_eq!(*b, 48, "t = {t}");
        }
    }
}

#[test]
fn match_ranks_own_pattern_first() {
    let d = tempfile::tempdir().unwrap();
    let mut corpus = vec![];
    for i in 0..4 {
        corpus.push(gen(d.path(), &format!("p{i}.ract"), &["--pattern", &i.to_string(), "--tempo", "120"]));
    }
    let q = gen(d.path(), "q.ract", &["--pattern", "2", "--tempo", "90"]);
    let fps = p(d.path(), "fps.json");
    let mut args = vec!["match", "--query", q.as_str(), "--save", fps.as_str(), "-k", "2", "--corpus"];
    args.extend(corpus.iter().map(String::as_str));
    let j = ok_json(&args);
    assert_eq!(j["matches"][0]["pattern_id"], "p2");

    let again = ok_json(&["match", "--query", &q, "--fingerprints", &fps, "-k", "1"]);
    assert_eq!(again["matches"][0]["pattern_id"], "p2");
    assert_eq!(again["matches"][0]["similarity"], j["matches"][0]["similarity"]);

    // Fingerprints from another model are refused.
    assert!(!run(&["match", "--query", &q, "--fingerprints", &fps, "--seed", "99"]).status.success());
}

#[test]
fn config_file_and_thread_cap() {
    let d = tempfile::tempdir().unwrap();
    let a = gen(d.path(), "a.ract", &["--measures", "8"]);
    let cfg = p(d.path(), "cfg.json");
    std::fs::write(&cfg, r#"{"bpo": 48}"#).unwrap();
    let j = ok_json(&["--config", &cfg, "analyze", &a, "-o", &p(d.path(), "x.rgrm")]);
    assert_eq!(j["bins"], 241);
    // Flags override the file.
    let j = ok_json(&["--config", &cfg, "analyze", &a, "--bpo", "12", "-o", &p(d.path(), "x.rgrm")]);
    assert_eq!(j["bins"], 61);
    std::fs::write(&cfg, r#"{"bogus": 1}"#).unwrap();
    assert!(!run(&["--config", &cfg, "analyze", &a, "-o", &p(d.path(), "x.rgrm")]).status.success());

    let one = bin().env("LOGRHYTHM_THREADS", "1").args(["analyze", &a, "-o", &p(d.path(), "t1.rgrm")]).output().unwrap();
    assert!(one.status.success());
    let many = bin().env("LOGRHYTHM_THREADS", "4").args(["analyze", &a, "-o", &p(d.path(), "t4.rgrm")]).output().unwrap();
    assert!(many.status.success());
    assert_eq!(std::fs::read(p(d.path(), "t1.rgrm")).unwrap(), std::fs::read(p(d.path(), "t4.rgrm")).unwrap());
    let bad = bin().env("LOGRHYTHM_THREADS", "zero").args(["analyze", &a, "-o", &p(d.path(), "t.rgrm")]).output().unwrap();
    assert!(!bad.status.success());
}

#[test]
fn wav_click_train_analyzes_at_two_hertz() {
    let d = tempfile::tempdir().unwrap();
    let sr = 16000u32;
    let mut samples = vec![0.0f64; 12 * sr as usize];
    for k in 0..24 {
        let start = (0.25 + 0.5 * k as f64) * sr as f64;
        for i in 0..80 {
            samples[start as usize + i] = 0.8 * (1.0 - i as f64 / 80.0) * if i % 2 == 0 { 1.0 } else { -1.0 };
        }
    }
    let wav = p(d.path(), "clicks.wav");
    logrhythm::onsets::write_wav(Path::new(&wav), &logrhythm::AudioClip64::new(samples, sr).unwrap()).unwrap();
    let j = ok_json(&["analyze", &wav, "-o", &p(d.path(), "c.rgrm")]);
    assert_eq!(j["peak_bin"], 48);
    assert_eq!(j["channels"], 6);
    let j = ok_json(&["analyze", &wav, "--onsets", "pitched", "-o", &p(d.path(), "c.rgrm")]);
    assert_eq!(j["channels"], 6);
}
