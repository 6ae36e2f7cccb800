use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cogsteer::gaze::{write_gaze_tsv, GazeCorpus, GazeRecord, Sentence};
use serde_json::Value;
use tempfile::TempDir;

const MODEL: &str = "[model]\nn_layers = 3\nd_model = 8\nn_heads = 2\nmax_seq_len = 40\n";
const TRAIN: &str = "[train]\nsteps = 15\nbatch = 4\nlr = 0.01\n";

fn cogsteer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cogsteer"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn cogsteer")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "cogsteer failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

/// Corpus and a trained 3-layer base at `<dir>/base/model.ckpt`.
fn base(dir: &Path) {
    let lines: Vec<String> = (0..30)
        .map(|i| ["the cat sat", "a dog ran to the park", "we saw the sun", "zorp grik the mat"][i % 4].to_string())
        .collect();
    write(dir, "corpus.txt", &lines.join("\n"));
    write(dir, "base.toml", &format!("seed = 3\nout = \"base\"\n{MODEL}{TRAIN}[train_base]\ncorpus = \"corpus.txt\"\n"));
    ok(cogsteer(dir, &["train-base", "--config", "base.toml"]));
}

fn task_files(dir: &Path) {
    let make = |n: usize| {
        (0..n)
            .map(|i| if i % 2 == 0 { format!("0\taeio{}.", "uoa".repeat(i % 3)) } else { format!("1\tbcdf{}.", "gcb".repeat(i % 3)) })
            .collect::<Vec<_>>()
            .join("\n")
    };
    write(dir, "train.tsv", &make(24));
    write(dir, "valid.tsv", &make(8));
}

const TASK: &str = "[task]\nkind = \"classification\"\ntrain = \"train.tsv\"\nvalidation = \"valid.tsv\"\n";

#[test]
fn missing_corpus_is_named() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "c.toml", "[train_base]\ncorpus = \"nope.txt\"\n");
    let out = cogsteer(dir.path(), &["train-base", "--config", "c.toml"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train_base.corpus"), "{err}");

    let out = cogsteer(dir.path(), &["train-base"]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train_base.corpus: missing required value"), "{err}");
}

#[test]
fn unknown_config_key_fails() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "c.toml", "[model]\nlayers = 3\n");
    let out = cogsteer(dir.path(), &["train-base", "--config", "c.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("layers"));
}

#[test]
fn train_base_is_seed_deterministic_and_replays_from_snapshot() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    base(d);
    let first = json(&d.join("base/train_log.json"));
    ok(cogsteer(d, &["train-base", "--config", "base.toml", "--out", "again"]));
    let again = json(&d.join("again/train_log.json"));
    assert_eq!(first["digest"], again["digest"]);
    assert_eq!(fs::read(d.join("base/model.ckpt")).unwrap(), fs::read(d.join("again/model.ckpt")).unwrap());

    ok(cogsteer(d, &["train-base", "--config", "base.toml", "--out", "other", "--seed", "4"]));
    assert_ne!(first["digest"], json(&d.join("other/train_log.json"))["digest"]);

    // The snapshot names its own output directory; copy it so the replay
    // writes elsewhere.
    let snap = fs::read_to_string(d.join("base/resolved_config.toml")).unwrap();
    write(d, "replay.toml", &snap.replace("out = \"base\"", "out = \"replay\""));
    ok(cogsteer(d, &["train-base", "--config", "replay.toml"]));
    assert_eq!(first["digest"], json(&d.join("replay/train_log.json"))["digest"]);
    assert_eq!(first["losses"], json(&d.join("replay/train_log.json"))["losses"]);
}

#[test]
fn probe_emits_one_row_per_layer_and_measure() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    base(d);
    let words = ["the", "cat", "sat", "on", "a", "warm", "mat", "today"];
    let sentences = (0..4)
        .map(|s| Sentence {
            id: format!("s{s}"),
            words: (0..6)
                .map(|i| {
                    let word = words[(s * 3 + i) % words.len()].to_string();
                    let ffd = 150.0 + 17.0 * ((s * 7 + i * 5) % 11) as f64;
                    let gd = ffd + 9.0 * i as f64;
                    GazeRecord {
                        sentence_id: format!("s{s}"),
                        word_index: i,
                        word,
                        measures: [
                            (i % 3 != 0).then_some(ffd),
                            Some(ffd),
                            Some(gd),
                            Some(gd + 13.0 * (s + 1) as f64),
                            (i != 4).then_some(gd + 30.0 + 11.0 * ((i * s) % 4) as f64),
                        ],
                    }
                })
                .collect(),
        })
        .collect();
    let corpus = GazeCorpus {
        id: "toy".into(),
        sentences,
    };
    write_gaze_tsv(&corpus, &d.join("gaze.tsv")).unwrap();
    write(d, "p.toml", "out = \"probe\"\n[probe]\ncheckpoint = \"base/model.ckpt\"\ngaze = \"gaze.tsv\"\n");
    ok(cogsteer(d, &["probe", "--config", "p.toml"]));
    let csv = fs::read_to_string(d.join("probe/correlation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "layer,measure,rho,abs_rho,bucket");
    assert_eq!(lines.len() - 1, 3 * 5);
    let report = json(&d.join("probe/correlation.json"));
    assert_eq!(report["n_layers"], 3);
    assert_eq!(report["corpus_id"], "gaze");
    assert_eq!(report["model_digest"], json(&d.join("base/train_log.json"))["digest"]);
}

#[test]
fn finetune_modes_keep_the_base_and_select_picks_a_candidate() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    base(d);
    task_files(d);
    write(d, "f.toml", &format!("seed = 5\n{TRAIN}{TASK}[finetune]\ncheckpoint = \"base/model.ckpt\"\nlayer = 2\n"));
    let base_digest = json(&d.join("base/train_log.json"))["digest"].clone();
    let mut params = Vec::new();
    for mode in ["single", "last", "all"] {
        let out = format!("ft-{mode}");
        ok(cogsteer(d, &["finetune", "--config", "f.toml", "--where", mode, "--out", &out]));
        let m = json(&d.join(&out).join("finetune_metrics.json"));
        assert_eq!(m["base_digest"], base_digest, "{mode}");
        assert!(d.join(&out).join("adapters.ckpt").exists());
        params.push(m["adapter_params"].as_u64().unwrap());
    }
    assert_eq!(params[0], params[1]);
    assert_eq!(params[2], 3 * params[0]);
    let last = json(&d.join("ft-last/finetune_metrics.json"));
    assert_eq!(last["layers"], serde_json::json!([3]));

    write(d, "s.toml", &format!("seed = 5\nout = \"sel\"\n{TRAIN}{TASK}[select_layer]\ncheckpoint = \"base/model.ckpt\"\n"));
    ok(cogsteer(d, &["select-layer", "--config", "s.toml"]));
    let sel = json(&d.join("sel/selection.json"));
    assert_eq!(sel["candidates"], serde_json::json!([1, 2]));
    let best = sel["best_layer"].as_u64().unwrap();
    assert!([1, 2].contains(&best));
    let scores = sel["scores"].as_object().unwrap();
    let top = scores.values().map(|v| v.as_f64().unwrap()).fold(f64::MIN, f64::max);
    assert_eq!(scores[&best.to_string()].as_f64().unwrap(), top);
}

#[test]
fn generate_echoes_and_self_contrast_is_a_no_op() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    base(d);
    let g = "[generate]\ncheckpoint = \"base/model.ckpt\"\nprompt = \"the cat\"\n";
    write(d, "g.toml", g);
    let stdout = ok(cogsteer(d, &["generate", "--config", "g.toml", "--out", "g0"]));
    let plain = json(&d.join("g0/generation.json"));
    assert!(stdout.starts_with("the cat"));

    write(d, "zero.toml", &format!("{g}max_new = 0\n"));
    let stdout = ok(cogsteer(d, &["generate", "--config", "zero.toml", "--out", "g1"]));
    assert_eq!(stdout.trim_end(), "the cat");
    assert_eq!(json(&d.join("g1/generation.json"))["continuation"], "");

    write(d, "self.toml", &format!("{g}contrast = \"base/model.ckpt\"\n"));
    ok(cogsteer(d, &["generate", "--config", "self.toml", "--layer", "2", "--alpha", "1.5", "--out", "g2"]));
    let steered = json(&d.join("g2/generation.json"));
    assert_eq!(steered["tokens"], plain["tokens"]);
    assert_eq!(steered["plan"]["layer"], 2);

    write(d, "half.toml", &format!("{g}contrast = \"base/model.ckpt\"\n"));
    let out = cogsteer(d, &["generate", "--config", "half.toml", "--out", "g3"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("generate.layer"));
}

#[test]
fn detox_margins_match_the_report_files() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    base(d);
    write(d, "toxic.txt", &vec!["zorp grik zorp blat"; 20].join("\n"));
    write(
        d,
        "contrast.toml",
        &format!("seed = 3\nout = \"contrast\"\n{MODEL}{TRAIN}[train_base]\ncorpus = \"toxic.txt\"\n"),
    );
    // Same seed, same config, different corpus: a config-compatible contrast.
    ok(cogsteer(d, &["train-base", "--config", "contrast.toml"]));
    write(d, "prompts.txt", "the cat\nwe saw\na dog\n");
    write(d, "lexicon.txt", "# marked words\nzorp\ngrik\nblat\n");
    write(
        d,
        "dx.toml",
        "seed = 9\nout = \"dx\"\n[detox_eval]\ncheckpoint = \"base/model.ckpt\"\ncontrast = \"contrast/model.ckpt\"\n\
         prompts = \"prompts.txt\"\nlexicon = \"lexicon.txt\"\nlayers = [1, 2, 3]\nn_cont = 4\nmax_new = 12\n",
    );
    ok(cogsteer(d, &["detox-eval", "--config", "dx.toml"]));
    let summary = json(&d.join("dx/margins.json"));
    let reference = json(&d.join("dx/report_reference.json"));
    let maxima = |r: &Value| -> Vec<f64> { r["per_prompt_max"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect() };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert_eq!(reference["aggregate"].as_f64().unwrap(), mean(&maxima(&reference)));
    let rows = summary["layers"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let l = row["layer"].as_u64().unwrap();
        let report = json(&d.join(format!("dx/report_layer_{l}.json")));
        assert_eq!(report["plan"]["layer"], l);
        let agg = mean(&maxima(&report));
        let margin = reference["aggregate"].as_f64().unwrap() - agg;
        assert!((row["margin"].as_f64().unwrap() - margin).abs() < 1e-12);
    }
    assert_eq!(rows[1]["bucket"], "middle");

    ok(cogsteer(d, &["detox-eval", "--config", "dx.toml", "--out", "dx2"]));
    for f in ["report_reference.json", "report_layer_2.json"] {
        assert_eq!(fs::read(d.join("dx").join(f)).unwrap(), fs::read(d.join("dx2").join(f)).unwrap());
    }
}

#[test]
fn external_scorer_needs_its_endpoint() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write(d, "prompts.txt", "the cat\n");
    write(d, "x.toml", "[detox_eval]\ncheckpoint = \"m.ckpt\"\nprompts = \"prompts.txt\"\n");
    let out = Command::new(env!("CARGO_BIN_EXE_cogsteer"))
        .current_dir(d)
        .args(["detox-eval", "--config", "x.toml", "--scorer", "external"])
        .env_remove("COGSTEER_SCORER_URL")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("COGSTEER_SCORER_URL"));
}
