use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use anatembed::infer::{embed_image, match_point, Anchor, MapChoice, Tiling};
use anatembed::phantom::Phantom;
use anatembed::tensor_file;
use anatembed::trainer::Checkpoint;
use serde_json::Value;
use sha2::{Digest, Sha256};

const TINY: &str = r#"
[data]
count = 5
train_count = 3
size = [96, 96]

[augment]
patch_size = [32, 32]

[train]
iterations = 4
batch_size = 2
n_pos = 8
n_neg = 8
n_rand_g = 8
n_cand_l = 16
log_every = 2
checkpoint_every = 2
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_anatembed"));
    c.env_remove("ANATEMBED_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// The single stderr line of a failed command, parsed.
fn failure(out: &Output) -> Value {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    serde_json::from_str(lines[0]).unwrap()
}

fn digests(dir: &Path) -> Vec<(String, String)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, hex_digest(&fs::read(&p).unwrap()))
        })
        .collect();
    v.sort();
    v
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Trained {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Trained {
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn run_dir(&self) -> PathBuf {
        self.root.join("run")
    }
    fn config(&self) -> PathBuf {
        self.root.join("tiny.toml")
    }
}

fn trained() -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    fs::write(root.join("tiny.toml"), TINY).unwrap();
    let t = Trained { _dir: dir, root };
    run(&[
        "generate",
        "--seed",
        "3",
        "--count",
        "3",
        "--size",
        "96,96",
        "--out",
        s(&t.data()),
    ]);
    run(&[
        "train",
        "--config",
        s(&t.config()),
        "--data",
        s(&t.data()),
        "--out",
        s(&t.run_dir()),
    ]);
    t
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run(&[
            "generate",
            "--seed",
            "7",
            "--count",
            "2",
            "--size",
            "64,64",
            "--out",
            s(out),
        ]);
    }
    let da = digests(&a);
    assert_eq!(da, digests(&b));
    // two phantoms of four files each, plus the config echo
    assert_eq!(da.len(), 9);
    let p = Phantom::load(&a.join("phantom-0001.json")).unwrap();
    assert_eq!(p.seed, 8);
    assert_eq!(
        p,
        anatembed::phantom::generate(8, 2, &[64, 64], 0.3).unwrap()
    );
}

#[test]
fn failures_are_single_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["generate", "--size", "8,8", "--out", s(dir.path())])
        .output()
        .unwrap();
    assert_eq!(failure(&out)["error"], "config");

    let out = bin().args(["generate", "--bogus"]).output().unwrap();
    assert_eq!(failure(&out)["error"], "usage");

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlr = 0.1\n").unwrap();
    let out = bin()
        .args([
            "train",
            "--config",
            s(&cfg),
            "--out",
            s(&dir.path().join("o")),
        ])
        .output()
        .unwrap();
    let e = failure(&out);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("lr"));

    let out = bin()
        .env("ANATEMBED_THREADS", "0")
        .args(["generate", "--size", "64,64", "--out", s(dir.path())])
        .output()
        .unwrap();
    assert_eq!(failure(&out)["error"], "config");

    let out = bin()
        .args([
            "embed",
            "--checkpoint",
            s(dir.path()),
            "--image",
            "x",
            "--out",
            "y",
        ])
        .output()
        .unwrap();
    assert_eq!(failure(&out)["error"], "format");
}

#[test]
fn train_writes_checkpoints_log_and_config_echo() {
    let t = trained();
    let run_dir = t.run_dir();
    for d in ["checkpoint-000002", "checkpoint-000004", "final"] {
        assert!(run_dir.join(d).join("manifest.json").exists(), "{d}");
    }
    let log = fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let echo: anatembed::config::ExperimentConfig =
        toml::from_str(&fs::read_to_string(run_dir.join("config.toml")).unwrap()).unwrap();
    let wanted: anatembed::config::ExperimentConfig = toml::from_str(TINY).unwrap();
    assert_eq!(echo, wanted);

    // a second identical run gives identical checkpoints
    let again = t.root.join("again");
    run(&[
        "train",
        "--config",
        s(&t.config()),
        "--data",
        s(&t.data()),
        "--out",
        s(&again),
    ]);
    assert_eq!(
        digests(&run_dir.join("final")),
        digests(&again.join("final"))
    );

    // resuming halfway reproduces the same final parameters
    let resumed = t.root.join("resumed");
    run(&[
        "train",
        "--resume",
        s(&run_dir.join("checkpoint-000002")),
        "--data",
        s(&t.data()),
        "--out",
        s(&resumed),
    ]);
    assert_eq!(
        fs::read(run_dir.join("final/params.pet")).unwrap(),
        fs::read(resumed.join("final/params.pet")).unwrap()
    );
}

#[test]
fn match_agrees_with_the_library() {
    let t = trained();
    let template = t.data().join("phantom-0000.json");
    let query = t.data().join("phantom-0001.json");
    let out = run(&[
        "match",
        "--checkpoint",
        s(&t.run_dir()),
        "--template",
        s(&template),
        "--landmark",
        "all",
        "--query",
        s(&template),
        "--query",
        s(&query),
    ]);
    let lines: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let tp = Phantom::load(&template).unwrap();
    let qp = Phantom::load(&query).unwrap();
    assert_eq!(lines.len(), 2 * tp.landmarks.len());

    let ck = Checkpoint::load(&t.run_dir().join("final")).unwrap();
    let temb = embed_image(
        &ck.manifest.encoder,
        &ck.params,
        &tp.image,
        &Tiling::whole(),
    )
    .unwrap();
    let qemb = embed_image(
        &ck.manifest.encoder,
        &ck.params,
        &qp.image,
        &Tiling::whole(),
    )
    .unwrap();
    for (k, l) in tp.landmarks.iter().enumerate() {
        let anchor = Anchor::at(&temb, &l.position).unwrap();
        for (line, emb, id) in [
            (&lines[k], &temb, "phantom-0000"),
            (&lines[tp.landmarks.len() + k], &qemb, "phantom-0001"),
        ] {
            let m = match_point(&anchor, emb, MapChoice::Combined).unwrap();
            assert_eq!(line["query_id"], id);
            assert_eq!(line["landmark"], l.name.as_str());
            assert_eq!(line["score"].as_f64().unwrap(), m.score);
            assert_eq!(
                line["matched"].as_bool().unwrap(),
                m.score >= anatembed::infer::DEFAULT_THRESHOLD
            );
            let point: Vec<f64> = serde_json::from_value(line["point"].clone()).unwrap();
            assert_eq!(point, emb.image.project(&m.point));
        }
    }
    assert!(lines
        .iter()
        .all(|l| l["score"].as_f64().unwrap() <= 2.0 + 1e-5));

    let out = run(&[
        "match",
        "--checkpoint",
        s(&t.run_dir()),
        "--template",
        s(&template),
        "--point",
        "40,50",
        "--query",
        s(&query),
        "--threshold",
        "3",
    ]);
    let line: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(line["landmark"], "point");
    assert_eq!(line["matched"], false);
}

#[test]
fn eval_report_matches_its_rows() {
    let t = trained();
    let queries = t.root.join("queries");
    run(&[
        "generate",
        "--seed",
        "40",
        "--count",
        "2",
        "--size",
        "96,96",
        "--out",
        s(&queries),
    ]);
    let report = t.root.join("report");
    let (ck, data) = (t.run_dir(), t.data());
    let args = [
        "eval",
        "--checkpoint",
        s(&ck),
        "--template-dir",
        s(&data),
        "--query-dir",
        s(&queries),
        "--variant",
        "all",
        "--report",
        s(&report),
    ];
    let out = run(&args);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 3);
    for v in ["combined", "global-only", "local-only"] {
        let r: Value =
            serde_json::from_slice(&fs::read(report.join(format!("report-{v}.json"))).unwrap())
                .unwrap();
        let rows = r["rows"].as_array().unwrap();
        let errs: Vec<f64> = rows
            .iter()
            .map(|r| r["error_px"].as_f64().unwrap())
            .collect();
        let mre = errs.iter().sum::<f64>() / errs.len() as f64;
        let max = errs.iter().cloned().fold(0.0, f64::max);
        assert_eq!(r["summary"]["mre_px"].as_f64().unwrap(), mre);
        assert_eq!(r["summary"]["max_px"].as_f64().unwrap(), max);
        assert_eq!(r["variant"], v);
        let csv = fs::read_to_string(report.join(format!("report-{v}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), rows.len() + 1);
    }
    assert!(report.join("config.toml").exists() && report.join("timing.json").exists());

    let again = t.root.join("report2");
    let mut args2 = args;
    args2[10] = s(&again);
    run(&args2);
    for v in ["combined", "global-only", "local-only"] {
        let f = format!("report-{v}.json");
        assert_eq!(
            fs::read(report.join(&f)).unwrap(),
            fs::read(again.join(&f)).unwrap()
        );
    }
}

#[test]
fn embed_writes_both_fields() {
    let t = trained();
    let out = t.root.join("emb/e.pet");
    run(&[
        "embed",
        "--checkpoint",
        s(&t.run_dir()),
        "--image",
        s(&t.data().join("phantom-0002")),
        "--out",
        s(&out),
        "--tile",
        "48,48",
    ]);
    let recs = tensor_file::load(&out).unwrap();
    assert_eq!(recs.len(), 2);
    let ck = Checkpoint::load(&t.run_dir().join("final")).unwrap();
    let embed = ck.manifest.encoder.embed_dim;
    assert_eq!(recs[0].shape, vec![embed, 12, 12]);
    assert_eq!(recs[1].shape, vec![embed, 48, 48]);
    let desc: Value =
        serde_json::from_slice(&fs::read(out.with_extension("json")).unwrap()).unwrap();
    assert_eq!(desc["global_stride"], serde_json::json!([8, 8]));
}

#[test]
fn sweep_emits_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let report = dir.path().join("sweep");
    run(&[
        "sweep",
        "--config",
        s(&cfg),
        "--param",
        "n_pos",
        "--values",
        "4,8",
        "--report",
        s(&report),
    ]);
    let csv = fs::read_to_string(report.join("sweep-n_pos.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "n_pos,mre_px,max_px,accuracy");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("4,") && lines[2].starts_with("8,"));
    assert!(report.join("sweep-n_pos.dat").exists());

    let out = bin()
        .args([
            "sweep",
            "--config",
            s(&cfg),
            "--param",
            "depth",
            "--values",
            "1",
            "--report",
            s(&report),
        ])
        .output()
        .unwrap();
    assert_eq!(failure(&out)["error"], "config");
}
