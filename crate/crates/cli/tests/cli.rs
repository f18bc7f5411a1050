use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use softfer::io;
use softfer::oracle::brute_force_pipeline;
use softfer::scoring::ConfidenceTable;
use softfer::study::{Decision, Event, StudyDefinition, StudyStore};
use tempfile::tempdir;

fn softfer(args: &[&str]) -> Output {
    softfer_env(args, None)
}

fn softfer_env(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_softfer"));
    cmd.args(args).env_remove("SOFTFER_CONFIG");
    if let Some(c) = config {
        cmd.env("SOFTFER_CONFIG", c);
    }
    cmd.output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = softfer(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr_lines(out: &Output) -> Vec<Value> {
    String::from_utf8(out.stderr.clone())
        .unwrap()
        .lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect()
}

fn last_error(out: &Output) -> Value {
    stderr_lines(out).pop().expect("a JSON line on stderr")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// synth, fuse, categorize and evaluate into `dir`; returns the output paths.
fn chain(dir: &Path, n: &str, extra: &[&str]) -> Vec<PathBuf> {
    let d = dir.join("batch");
    let sl = dir.join("sl.jsonl");
    let subsets = dir.join("subsets.jsonl");
    let dist = dir.join("dist.md");
    let report = dir.join("report.json");
    let report_md = dir.join("report.md");
    let with = |args: &[&str]| {
        let mut v = args.to_vec();
        v.extend_from_slice(extra);
        ok(&v);
    };
    with(&["synth", "--n", n, "--seed", "1", "--noise", "0.1", "--secondary-bias", "0.5", "--out", p(&d)]);
    with(&[
        "fuse",
        "--ebc",
        p(&d.join("ebc.csv")),
        "--au",
        p(&d.join("au.csv")),
        "--conf",
        p(&d.join("conf.json")),
        "--manifest",
        p(&d.join("manifest.jsonl")),
        "--out",
        p(&sl),
    ]);
    with(&[
        "categorize",
        "--softlabels",
        p(&sl),
        "--manifest",
        p(&d.join("manifest.jsonl")),
        "--out",
        p(&subsets),
        "--report",
        p(&dist),
    ]);
    with(&[
        "evaluate",
        "--truth",
        p(&d.join("truth.jsonl")),
        "--pred",
        p(&sl),
        "--hard",
        "--stratify",
        p(&subsets),
        "--out",
        p(&report),
        "--markdown",
        p(&report_md),
    ]);
    vec![
        d.join("manifest.jsonl"),
        d.join("ebc.csv"),
        d.join("au.csv"),
        d.join("truth.jsonl"),
        sl,
        subsets,
        dist,
        report,
        report_md,
    ]
}

#[test]
fn smoke_chain() {
    let dir = tempdir().unwrap();
    let outputs = chain(dir.path(), "10", &[]);
    for f in &outputs {
        assert!(fs::metadata(f).unwrap().len() > 0, "{}", f.display());
    }
    let dist = fs::read_to_string(dir.path().join("dist.md")).unwrap();
    assert!(dist.contains("Easy") && dist.contains("Difficult"));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["kind"], "evaluation");
    assert_eq!(report["all"]["soft"]["n"], 10);

    let rendered = ok(&["report", "--input", p(&dir.path().join("report.json"))]);
    let md = String::from_utf8(rendered.stdout).unwrap();
    assert_eq!(md, fs::read_to_string(dir.path().join("report.md")).unwrap());
}

#[test]
fn every_run_announces_config_and_digest() {
    let dir = tempdir().unwrap();
    let out = ok(&["synth", "--n", "3", "--out", p(dir.path())]);
    let lines = stderr_lines(&out);
    assert_eq!(lines[0]["command"], "synth");
    assert_eq!(lines[0]["config"]["synthesis"]["n_images"], 3);
    assert_eq!(lines[0]["common"]["seed"], 0);
    let digest = lines[0]["constants_digest"].as_str().unwrap();
    assert_eq!(digest.len(), 64);

    // The digest tracks the AU weights in effect.
    let other = ok(&["export", "--out-dir", p(dir.path()), "--aus-variant", "inverse-frequency"]);
    assert_ne!(stderr_lines(&other)[0]["constants_digest"].as_str().unwrap(), digest);
}

#[test]
fn missing_flag_is_a_usage_error() {
    let out = softfer(&["fuse", "--au", "a.csv", "--conf", "c.json", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let err = last_error(&out);
    assert_eq!(err["code"], "usage");
    assert!(err["message"].as_str().unwrap().contains("--ebc"));
    assert!(err["context"]["usage"].as_str().unwrap().starts_with("Usage: softfer fuse"));

    for args in [
        vec!["synth", "--out", "d", "--bogus"],
        vec!["frobnicate"],
        vec!["plan-sampling", "--target", "Joy", "--total", "5", "--out", "p.json"],
        vec!["plan-sampling", "--target", "Fear", "--total", "-5", "--out", "p.json"],
        vec!["fuse", "--ebc", "a", "--au", "b", "--conf", "c", "--out", "d", "--ebc-confidence", "median"],
    ] {
        let out = softfer(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(last_error(&out)["code"], "usage", "{args:?}");
    }
}

#[test]
fn out_of_range_values_are_usage_errors() {
    let dir = tempdir().unwrap();
    for (args, flag) in [
        (vec!["synth", "--noise=-1", "--out"], "--noise"),
        (vec!["synth", "--secondary-bias", "2", "--out"], "--secondary-bias"),
        (vec!["synth", "--threads", "0", "--out"], "--threads"),
        (vec!["synth", "--log-level", "loud", "--out"], "--log-level"),
    ] {
        let mut args = args;
        args.push(p(dir.path()));
        let out = softfer(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err = last_error(&out);
        assert_eq!(err["code"], "invalid_argument");
        assert_eq!(err["context"]["flag"], flag);
    }
}

#[test]
fn data_errors_exit_one() {
    let dir = tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = softfer(&["categorize", "--softlabels", p(&missing), "--out", p(&dir.path().join("s.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = last_error(&out);
    assert_eq!(err["code"], "io");
    assert_eq!(err["context"]["path"], p(&missing));

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"image_id\":\"a\",\"soft_label\":[0.1,0.2]}\n").unwrap();
    let out = softfer(&["categorize", "--softlabels", p(&bad), "--out", p(&dir.path().join("s.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(last_error(&out)["code"], "parse");
    assert_eq!(last_error(&out)["context"]["line"], 1);

    // Records without hard labels and no manifest cannot be categorized.
    let sl = dir.path().join("sl.jsonl");
    fs::write(&sl, "{\"image_id\":\"a\",\"soft_label\":[0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8]}\n").unwrap();
    let out = softfer(&["categorize", "--softlabels", p(&sl), "--out", p(&dir.path().join("s.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(last_error(&out)["code"], "invalid_data");
}

#[test]
fn pipeline_reproduces_the_oracle() {
    let dir = tempdir().unwrap();
    let d = dir.path().join("batch");
    ok(&["synth", "--n", "400", "--seed", "11", "--noise", "0.1", "--secondary-bias", "0.6", "--out", p(&d)]);
    let sl = dir.path().join("sl.jsonl");
    let subsets = dir.path().join("subsets.jsonl");
    ok(&[
        "fuse",
        "--ebc",
        p(&d.join("ebc.csv")),
        "--au",
        p(&d.join("au.csv")),
        "--conf",
        p(&d.join("conf.json")),
        "--manifest",
        p(&d.join("manifest.jsonl")),
        "--out",
        p(&sl),
    ]);
    ok(&["categorize", "--softlabels", p(&sl), "--out", p(&subsets)]);

    let manifest = io::load_manifest(&d.join("manifest.jsonl")).unwrap();
    let ebc = io::load_ebc(&d.join("ebc.csv"), false).unwrap();
    let au = io::load_au(&d.join("au.csv")).unwrap();
    let conf: ConfidenceTable = io::load_json(&d.join("conf.json")).unwrap();
    let oracle = brute_force_pipeline(&io::hard_labels(&manifest), &ebc, &au, &conf, 0.25);

    let got = io::load_soft_labels(&sl).unwrap();
    let assigned = io::load_subsets(&subsets).unwrap();
    assert_eq!(got.len(), 400);
    for ((g, o), s) in got.iter().zip(&oracle).zip(&assigned) {
        assert_eq!(g.image_id, o.image_id);
        for k in 0..8 {
            assert!((g.soft_label.values()[k] - o.soft_label[k]).abs() <= 1e-9, "{}", g.image_id);
        }
        assert_eq!(g.subset, o.subset);
        assert_eq!(Some(s.subset), o.subset);
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempdir().unwrap();
    let b = tempdir().unwrap();
    let c = tempdir().unwrap();
    let first = chain(a.path(), "120", &[]);
    let second = chain(b.path(), "120", &[]);
    let single = chain(c.path(), "120", &["--threads", "1"]);
    for ((x, y), z) in first.iter().zip(&second).zip(&single) {
        let bytes = fs::read(x).unwrap();
        assert_eq!(bytes, fs::read(y).unwrap(), "{}", x.display());
        assert_eq!(bytes, fs::read(z).unwrap(), "{}", x.display());
    }
}

#[test]
fn defaults_file_is_applied_below_flags() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("softfer.toml");
    fs::write(&cfg, "seed = 5\n[synth]\nn = 7\nnoise = 0.2\n").unwrap();
    let out = softfer_env(&["synth", "--noise", "0.0", "--out", p(&dir.path().join("d"))], Some(&cfg));
    assert!(out.status.success());
    let line = &stderr_lines(&out)[0];
    assert_eq!(line["common"]["seed"], 5);
    assert_eq!(line["common"]["defaults_file"], p(&cfg));
    assert_eq!(line["config"]["synthesis"]["n_images"], 7);
    assert_eq!(line["config"]["synthesis"]["noise_sigma"], 0.0);
    assert_eq!(io::load_manifest(&dir.path().join("d/manifest.jsonl")).unwrap().len(), 7);

    fs::write(&cfg, "[synth]\nsigma = 0.2\n").unwrap();
    let out = softfer_env(&["synth", "--out", p(&dir.path().join("e"))], Some(&cfg));
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(last_error(&out)["code"], "config");
}

#[test]
fn confidence_from_predictions_feeds_fuse_with_gzip() {
    let dir = tempdir().unwrap();
    let d = dir.path().join("batch");
    ok(&["synth", "--n", "200", "--seed", "4", "--noise", "0.15", "--out", p(&d)]);
    let conf = dir.path().join("conf.json");
    ok(&[
        "confidence",
        "--predictions",
        p(&d.join("ebc.csv")),
        "--predictions",
        p(&d.join("au.csv")),
        "--manifest",
        p(&d.join("manifest.jsonl")),
        "--mode",
        "balanced",
        "--out",
        p(&conf),
    ]);
    let table: ConfidenceTable = io::load_json(&conf).unwrap();
    assert_eq!(table.ebc.len(), 3);
    assert!(table.ebc_ensemble.is_some() && table.au.is_some());
    assert!(table.counts.values().all(|row| row.iter().all(|c| c.total() == 200)));

    let sl = dir.path().join("sl.jsonl.gz");
    ok(&[
        "fuse",
        "--ebc",
        p(&d.join("ebc.csv")),
        "--au",
        p(&d.join("au.csv")),
        "--conf",
        p(&conf),
        "--ebc-confidence",
        "ensemble",
        "--out",
        p(&sl),
    ]);
    assert_eq!(&fs::read(&sl).unwrap()[..2], &[0x1f, 0x8b]);
    let subsets = dir.path().join("subsets.jsonl");
    ok(&[
        "categorize",
        "--softlabels",
        p(&sl),
        "--manifest",
        p(&d.join("manifest.jsonl")),
        "--out",
        p(&subsets),
    ]);
    assert_eq!(io::load_subsets(&subsets).unwrap().len(), 200);

    // Two files of the same kind are refused.
    let out = softfer(&[
        "confidence",
        "--predictions",
        p(&d.join("au.csv")),
        "--predictions",
        p(&d.join("au.csv")),
        "--manifest",
        p(&d.join("manifest.jsonl")),
        "--out",
        p(&conf),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn plan_sampling_writes_plan_and_selection() {
    let dir = tempdir().unwrap();
    let d = dir.path().join("batch");
    ok(&["synth", "--n", "600", "--seed", "2", "--out", p(&d)]);
    let plan = dir.path().join("plan.json");
    ok(&["plan-sampling", "--target", "Surprise", "--total", "1000", "--out", p(&plan)]);
    let v: Value = serde_json::from_str(&fs::read_to_string(&plan).unwrap()).unwrap();
    let count = |name: &str| {
        let a = v["allocations"]
            .as_array()
            .unwrap()
            .iter()
            .find(|a| a["emotion"] == name)
            .unwrap();
        a["uniform"].as_u64().unwrap() + a["proportional"].as_u64().unwrap()
    };
    assert_eq!(count("Fear"), 444 + 29);
    let total: u64 = ["Neutral", "Happy", "Sad", "Fear", "Disgust", "Anger", "Contempt"]
        .iter()
        .map(|e| count(e))
        .sum();
    assert_eq!(total, 1000);

    let sel = dir.path().join("ids.txt");
    ok(&[
        "plan-sampling",
        "--target",
        "Happy",
        "--total",
        "100",
        "--manifest",
        p(&d.join("manifest.jsonl")),
        "--selection",
        p(&sel),
        "--out",
        p(&plan),
        "--seed",
        "3",
    ]);
    let ids: Vec<String> = fs::read_to_string(&sel).unwrap().lines().map(String::from).collect();
    assert_eq!(ids.len(), 100);
    let manifest = io::hard_labels(&io::load_manifest(&d.join("manifest.jsonl")).unwrap());
    assert!(ids.iter().all(|id| manifest[id] != softfer::Emotion::Happy));

    // Asking for more than the manifest holds is a data error.
    let out = softfer(&[
        "plan-sampling",
        "--target",
        "Happy",
        "--total",
        "100000",
        "--manifest",
        p(&d.join("manifest.jsonl")),
        "--selection",
        p(&sel),
        "--out",
        p(&plan),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn export_matches_the_shipped_files() {
    let dir = tempdir().unwrap();
    ok(&["export", "--out-dir", p(dir.path())]);
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    for name in ["au-tables.json", "conf.paper.json"] {
        assert_eq!(
            fs::read(dir.path().join(name)).unwrap(),
            fs::read(shipped.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn report_recomputes_agreement_from_an_event_log() {
    let dir = tempdir().unwrap();
    let batch = dir.path().join("batch");
    ok(&["synth", "--n", "12", "--out", p(&batch)]);
    let truth = io::load_soft_labels(&batch.join("truth.jsonl")).unwrap();
    let labels: std::collections::HashMap<String, softfer::SoftLabel> =
        truth.iter().map(|r| (r.image_id.clone(), r.soft_label)).collect();
    let pool = truth
        .into_iter()
        .map(|r| softfer::study::PoolImage {
            image_id: r.image_id,
            soft_label: r.soft_label,
            hard_label: r.hard_label.unwrap(),
            decoy: None,
        })
        .collect();
    let def = StudyDefinition::new(pool, vec!["a".into(), "b".into(), "c".into()]);
    let mut store = StudyStore::new();
    let mut log = Vec::new();
    let mut record = |store: &mut StudyStore, ev: Event| {
        store.apply(&ev).unwrap();
        log.push(ev);
    };
    let (ev, study) = store.create_study(def).unwrap();
    record(&mut store, ev);
    for who in ["a", "b", "c"] {
        let session = match store.start_session(&study, who).unwrap() {
            Decision::Record(ev, id) => {
                record(&mut store, ev);
                id
            }
            Decision::Noop(id) => id,
        };
        while let softfer::study::Next::Question(q) = store.next_question(&session).unwrap() {
            // Always the true soft-label in exp2, always "soft" in exp1.
            let choice = match q.options {
                Some(o) if o[0] == labels[&q.image_id] => "a",
                Some(_) => "b",
                None => "soft",
            };
            if let Decision::Record(ev, _) = store.submit_answer(&session, &q.question_id, choice, 0).unwrap() {
                record(&mut store, ev);
            }
        }
    }
    let events = dir.path().join("events.jsonl");
    io::save_jsonl(&events, &log).unwrap();

    let json = dir.path().join("agreement.json");
    let out = ok(&["report", "--events", p(&events), "--study", &study, "--json", p(&json)]);
    let md = String::from_utf8(out.stdout).unwrap();
    assert!(md.contains("Self-agreement") && md.contains("Experiment 2"));
    let v: Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["mean_self_agreement"], 100.0);
    assert_eq!(v["mean_pairwise_agreement"], 100.0);
    assert_eq!(v["exp2_accuracy"], 100.0);

    let out = softfer(&["report", "--events", p(&events), "--study", "study-9"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(last_error(&out)["code"], "study");
}

#[test]
fn help_exits_zero() {
    let out = softfer(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in ["plan-sampling", "confidence", "fuse", "categorize", "evaluate", "synth", "serve", "report"] {
        assert!(text.contains(sub), "{sub}");
    }
}
