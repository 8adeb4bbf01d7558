//! End-to-end runs of the `datclone` binary on a tiny corpus.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[corpus]
n_speakers = 6
utts_per_speaker = 6

[augment]
held_out = 2
n_test = 2

[train]
max_steps = 3
warmup_steps = 0
batch_size = 4

[speaker_encoder_train]
steps = 5

[adapt]
max_steps = 3
plateau_window = 2
smoothing = 1

[probe]
epochs = 2
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_datclone"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed with {:?}\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    run(dir, args).status.code().expect("exit code")
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

/// gen, held-out split, both augmentations, encoder and base training.
fn prepared(config: &str) -> Workspace {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    fs::write(root.join("tiny.toml"), config).unwrap();
    let c = ["--config", "tiny.toml"];
    let with = |rest: &[&'static str]| -> Vec<&'static str> { rest.iter().copied().chain(c).collect() };
    ok(&root, &with(&["corpus", "gen", "--out", "corpus"]));
    ok(
        &root,
        &with(&[
            "corpus",
            "augment",
            "--manifest",
            "corpus/manifest.tsv",
            "--mode",
            "held-out",
            "--out",
            "held",
        ]),
    );
    ok(
        &root,
        &with(&["corpus", "augment", "--manifest", "held/base.tsv", "--out", "adapt"]),
    );
    ok(
        &root,
        &with(&[
            "corpus",
            "augment",
            "--manifest",
            "held/base.tsv",
            "--mode",
            "encoding",
            "--out",
            "enc",
        ]),
    );
    ok(
        &root,
        &with(&["train", "encoder", "--manifest", "held/base.tsv", "--out", "tdnn.ckpt"]),
    );
    ok(
        &root,
        &with(&["train", "base", "--manifest", "adapt/train.tsv", "--out", "base"]),
    );
    Workspace { _tmp: tmp, root }
}

fn eval_all(root: &Path, out: &str) {
    let tail = ["--config", "tiny.toml", "--out", out];
    let synth_args = [
        "--checkpoint",
        "adapted/adapted.ckpt",
        "--speaker",
        "spk04",
        "--manifest",
        "held/test_spk04-C.tsv",
    ];
    for head in [&["eval", "mcd"][..], &["eval", "cosine", "--encoder", "tdnn.ckpt"][..]] {
        let args: Vec<&str> = head.iter().chain(&synth_args).chain(&tail).copied().collect();
        ok(root, &args);
    }
    let probe = [
        "eval",
        "probe",
        "--checkpoint",
        "base/final.ckpt",
        "--manifest",
        "enc/encoding.tsv",
    ];
    ok(root, &probe.iter().chain(&tail).copied().collect::<Vec<_>>());
}

#[test]
fn synth_without_checkpoint_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["synth", "--tokens", "1 2", "--out", "x.wav"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("--checkpoint") && err.contains("Usage"), "{err}");
}

#[test]
fn unknown_flags_and_bad_configs_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(tmp.path(), &["corpus", "gen", "--out", "c", "--bogus"]), 2);
    fs::write(tmp.path().join("bad.toml"), "[train]\nlambda = \"high\"\n").unwrap();
    assert_eq!(
        code(tmp.path(), &["corpus", "gen", "--out", "c", "--config", "bad.toml"]),
        2
    );
    fs::write(tmp.path().join("neg.toml"), "[corpus]\nn_speakers = 2\n").unwrap();
    assert_eq!(
        code(tmp.path(), &["corpus", "gen", "--out", "c", "--config", "neg.toml"]),
        2
    );
}

#[test]
fn missing_inputs_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        code(tmp.path(), &["train", "base", "--manifest", "nope.tsv", "--out", "b"]),
        3
    );
}

#[test]
fn full_pipeline_writes_a_deterministic_report() {
    let ws = prepared(TINY);
    let root = &ws.root;
    let c = ["--config", "tiny.toml"];
    let mut adapt = vec![
        "adapt",
        "few-shot",
        "--checkpoint",
        "base/final.ckpt",
        "--manifest",
        "held/adapt.tsv",
        "--speaker",
        "spk04",
        "--encoder",
        "tdnn.ckpt",
        "--donor-manifest",
        "held/base.tsv",
        "--out",
        "adapted",
    ];
    adapt.extend(c);
    ok(root, &adapt);
    let mut synth = vec![
        "synth",
        "--checkpoint",
        "adapted/adapted.ckpt",
        "--speaker",
        "spk04",
        "--tokens",
        "1 2 3",
        "--out",
        "out.wav",
    ];
    synth.extend(c);
    ok(root, &synth);
    assert!(root.join("out.wav").exists() && root.join("out.mel.tsv").exists());

    eval_all(root, "report_a");
    eval_all(root, "report_b");
    let a = fs::read(root.join("report_a/report.jsonl")).unwrap();
    let b = fs::read(root.join("report_b/report.jsonl")).unwrap();
    assert_eq!(a, b, "identical inputs must give identical reports");
    assert_eq!(
        fs::read(root.join("report_a/report.txt")).unwrap(),
        fs::read(root.join("report_b/report.txt")).unwrap()
    );
    let text = String::from_utf8(a).unwrap();
    let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    let synth_row = rows.iter().find(|r| r["model"] == "adapted/adapted").unwrap();
    assert!(synth_row["mcd"].is_array() && synth_row["cosine"].is_array());
    let probe_row = rows.iter().find(|r| r["model"] == "base/final").unwrap();
    let p = probe_row["probe_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    for r in &rows {
        assert_eq!(r["checkpoint_hash"].as_str().unwrap().len(), 64);
        assert_eq!(r["manifest_hash"].as_str().unwrap().len(), 64);
    }

    // Re-running eval into an existing report leaves it unchanged.
    eval_all(root, "report_a");
    assert_eq!(
        fs::read(root.join("report_a/report.jsonl")).unwrap(),
        fs::read(root.join("report_b/report.jsonl")).unwrap()
    );
}

#[test]
fn one_shot_encoding_and_export() {
    let ws = prepared(TINY);
    let root = &ws.root;
    let enc_toml = TINY.replace("[train]\n", "[train]\nvariant = \"encoding\"\n");
    fs::write(root.join("enc.toml"), enc_toml).unwrap();
    let e = ["--config", "enc.toml"];
    let mut train = vec![
        "train",
        "base",
        "--manifest",
        "enc/encoding.tsv",
        "--encoder",
        "tdnn.ckpt",
        "--out",
        "encbase",
    ];
    train.extend(e);
    ok(root, &train);
    let before = fs::read(root.join("encbase/final.ckpt")).unwrap();
    let mut encode = vec![
        "encode",
        "one-shot",
        "--encoder",
        "tdnn.ckpt",
        "--manifest",
        "held/adapt.tsv",
        "--speaker",
        "spk05",
        "--k",
        "3",
        "--checkpoint",
        "encbase/final.ckpt",
        "--out",
        "spk05.json",
    ];
    encode.extend(e);
    ok(root, &encode);
    assert_eq!(fs::read(root.join("encbase/final.ckpt")).unwrap(), before);
    let emb: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("spk05.json")).unwrap()).unwrap();
    assert_eq!(emb["utts"].as_array().unwrap().len(), 3);

    let mut synth = vec![
        "synth",
        "--checkpoint",
        "encbase/final.ckpt",
        "--embedding",
        "spk05.json",
        "--tokens",
        "2 3",
        "--out",
        "e.wav",
    ];
    synth.extend(e);
    ok(root, &synth);

    let mut export = vec![
        "export",
        "embeddings",
        "--encoder",
        "tdnn.ckpt",
        "--checkpoint",
        "encbase/final.ckpt",
        "--manifest",
        "enc/encoding.tsv",
        "--out",
        "emb.tsv",
    ];
    export.extend(e);
    ok(root, &export);
    let text = fs::read_to_string(root.join("emb.tsv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 48);
    assert!(lines[0].starts_with("utt_id\tspeaker_id\tcondition\tpca_x\tpca_y\tv0"));

    // Fewer than K references is a data error.
    let mut short = encode.clone();
    let k = short.iter().position(|a| *a == "3").unwrap();
    short[k] = "9";
    assert_eq!(code(root, &short), 3);
}

#[test]
fn hash_mismatch_needs_force() {
    let ws = prepared(TINY);
    let root = &ws.root;
    fs::write(root.join("wide.toml"), format!("{TINY}\n[model]\nd_dec = 72\n")).unwrap();
    let args = |cfg: &'static str, force: bool| {
        let mut v = vec![
            "synth",
            "--checkpoint",
            "base/final.ckpt",
            "--speaker",
            "spk00",
            "--tokens",
            "1",
            "--out",
            "o.wav",
            "--config",
            cfg,
        ];
        if force {
            v.push("--force");
        }
        v
    };
    assert_eq!(code(root, &args("wide.toml", false)), 3);
    // Forcing gets past the hash check; the parameters still load since the
    // file is self-describing.
    assert_eq!(code(root, &args("wide.toml", true)), 0);
    assert_eq!(code(root, &args("tiny.toml", false)), 0);
}

#[test]
fn divergence_exits_4() {
    let cfg = TINY.replace("warmup_steps = 0\n", "warmup_steps = 0\nlearning_rate = 1e300\n");
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    fs::write(root.join("tiny.toml"), cfg).unwrap();
    ok(root, &["corpus", "gen", "--out", "corpus", "--config", "tiny.toml"]);
    let c = code(
        root,
        &[
            "train",
            "base",
            "--manifest",
            "corpus/manifest.tsv",
            "--out",
            "b",
            "--config",
            "tiny.toml",
        ],
    );
    assert_eq!(c, 4);
    assert!(root.join("b/last_good.ckpt").exists());
}

#[test]
fn corpus_generation_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    fs::write(root.join("tiny.toml"), TINY).unwrap();
    for out in ["a", "b"] {
        ok(
            root,
            &["corpus", "gen", "--out", out, "--config", "tiny.toml", "--seed", "5"],
        );
        ok(
            root,
            &[
                "corpus",
                "augment",
                "--manifest",
                &format!("{out}/manifest.tsv"),
                "--out",
                &format!("{out}/aug"),
                "--config",
                "tiny.toml",
                "--seed",
                "5",
            ],
        );
    }
    for f in [
        "manifest.tsv",
        "aug/train.tsv",
        "aug/mixes.jsonl",
        "wavs/spk00_u000.wav",
        "aug/wavs/spk00_u000-n.wav",
    ] {
        assert_eq!(
            fs::read(root.join("a").join(f)).unwrap(),
            fs::read(root.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}
