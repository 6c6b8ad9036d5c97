use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use zofa::net::Model;

const SMALL: &str = "protocol.samples_per_domain=400";

fn zofa(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_zofa"));
    cmd.args(args).env_remove("ZOFA_THREADS");
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("ZOFA__")) {
        cmd.env_remove(k);
    }
    cmd.envs(env.iter().copied());
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = zofa(args, &[]);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn accuracy(dir: &Path) -> f64 {
    summary(dir)["report"]["average_accuracy"].as_f64().unwrap()
}

/// Pretrains seed 0 into `<tmp>/model` and returns the model path.
fn pretrained(tmp: &TempDir) -> PathBuf {
    let dir = tmp.path().join("model");
    ok(&["pretrain", "--out", s(&dir)]);
    dir.join("model.zofa")
}

#[test]
fn pretrain_is_reproducible_and_creates_nested_output() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a/b/c");
    let b = tmp.path().join("d");
    ok(&["pretrain", "--out", s(&a)]);
    ok(&["pretrain", "--out", s(&b)]);
    assert_eq!(fs::read(a.join("model.zofa")).unwrap(), fs::read(b.join("model.zofa")).unwrap());
    assert_eq!(fs::read(a.join("test.zofd")).unwrap(), fs::read(b.join("test.zofd")).unwrap());
    let acc = summary(&a)["source_accuracy"].as_f64().unwrap();
    assert!(acc >= 0.85, "source accuracy {acc}");
    let model = Model::load(a.join("model.zofa")).unwrap();
    assert!(model.source.is_some());
    ok(&["pretrain", "--out", s(&b), "--seed", "1"]);
    assert_ne!(fs::read(a.join("model.zofa")).unwrap(), fs::read(b.join("model.zofa")).unwrap());
}

#[test]
fn eva0_beats_no_adapt_on_the_preset() {
    let tmp = TempDir::new().unwrap();
    let model = pretrained(&tmp);
    let eva = tmp.path().join("eva");
    let none = tmp.path().join("none");
    ok(&["adapt", "--model", s(&model), "--out", s(&eva)]);
    ok(&["adapt", "--model", s(&model), "--out", s(&none), "--mode", "no-adapt"]);
    let (a, b) = (accuracy(&eva), accuracy(&none));
    assert!(a > b, "eva0 {a} vs no-adapt {b}");
    let report = &summary(&eva)["report"];
    assert_eq!(report["domains"].as_array().unwrap().len(), 15);
    assert_eq!(summary(&eva)["forwards_per_sample"].as_f64().unwrap(), 2.0);
    let trace = fs::read_to_string(eva.join("trace.csv")).unwrap();
    assert!(trace.starts_with("domain,step,"));
    assert_eq!(trace.lines().count(), 1 + 15 * 2000usize.div_ceil(16));
}

#[test]
fn artifacts_are_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let model = pretrained(&tmp);
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        ok(&["adapt", "--model", s(&model), "--out", s(&dir), "--set", SMALL]);
        dir
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(fs::read(a.join("trace.csv")).unwrap(), fs::read(b.join("trace.csv")).unwrap());
    let strip = |d: &Path| {
        let mut v = summary(d);
        v["config"]["out"] = Value::Null;
        v
    };
    assert_eq!(strip(&a), strip(&b));
}

fn strip_source(model: &Path, tmp: &TempDir) -> PathBuf {
    let mut m = Model::load(model).unwrap();
    m.source = None;
    let path = tmp.path().join("bare.zofa");
    m.save(&path).unwrap();
    path
}

#[test]
fn dagger_runs_without_source_statistics_but_alignment_needs_them() {
    let tmp = TempDir::new().unwrap();
    let bare = strip_source(&pretrained(&tmp), &tmp);
    let out = tmp.path().join("dagger");
    ok(&["adapt", "--model", s(&bare), "--out", s(&out), "--mode", "eva0-dagger", "--set", SMALL]);
    assert!(accuracy(&out) > 0.0);
    let refused = zofa(&["adapt", "--model", s(&bare), "--out", s(&out), "--mode", "eva0", "--set", SMALL], &[]);
    assert_eq!(code(&refused), 2, "{}", String::from_utf8_lossy(&refused.stderr));
    let zero = tmp.path().join("zero");
    ok(&["adapt", "--model", s(&bare), "--out", s(&zero), "--set", "adapt.lambda=0", "--set", SMALL]);
}

#[test]
fn quantized_model_improves_over_its_own_baseline() {
    let tmp = TempDir::new().unwrap();
    let model = pretrained(&tmp);
    let run = |mode: &str| {
        let dir = tmp.path().join(mode);
        ok(&["adapt", "--model", s(&model), "--out", s(&dir), "--mode", mode, "--quantize-bits", "8"]);
        assert_eq!(summary(&dir)["config"]["quantize_bits"], 8);
        accuracy(&dir)
    };
    let (adapted, frozen) = (run("eva0-dagger"), run("no-adapt"));
    assert!(adapted > frozen, "{adapted} vs {frozen}");
}

#[test]
fn file_then_env_then_flags_take_precedence() {
    let tmp = TempDir::new().unwrap();
    let model = pretrained(&tmp);
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        "seed = 3\n[adapt]\neta = 0.01\nmu = 0.05\ngamma = 0.002\n[protocol]\nsamples_per_domain = 200\nreset = \"continual\"\n",
    )
    .unwrap();
    let out = tmp.path().join("p");
    let res = zofa(
        &[
            "adapt", "--config", s(&cfg), "--model", s(&model), "--out", s(&out), "--seed", "7", "--set",
            "adapt.mu=0.04",
        ],
        &[("ZOFA__ADAPT__MU", "0.03"), ("ZOFA__ADAPT__GAMMA", "0.004")],
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let c = &summary(&out)["config"];
    assert_eq!(c["seed"], 7);
    assert_eq!(c["adapt"]["seed"], 7);
    assert_eq!(c["adapt"]["eta"], 0.01);
    assert_eq!(c["adapt"]["mu"], 0.04);
    assert_eq!(c["adapt"]["gamma"], 0.004);
    assert_eq!(c["protocol"]["samples_per_domain"], 200);
    assert_eq!(c["protocol"]["reset"], "continual");
    let flag = tmp.path().join("q");
    ok(&["adapt", "--config", s(&cfg), "--model", s(&model), "--out", s(&flag), "--protocol", "single-domain"]);
    assert_eq!(summary(&flag)["config"]["protocol"]["reset"], "single-domain");
}

#[test]
fn exit_codes_separate_config_io_and_numerical_failures() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    let o = s(&out);
    assert_eq!(code(&zofa(&["adapt", "--out", o, "--set", "adapt.nonsense=1"], &[])), 2);
    assert_eq!(code(&zofa(&["adapt", "--out", o], &[("ZOFA__BOGUS", "1")])), 2);
    assert_eq!(code(&zofa(&["adapt", "--out", o, "--set", "adapt.eta=-1"], &[])), 2);
    assert_eq!(code(&zofa(&["adapt", "--out", o, "--set", "adapt.batch_size=0"], &[])), 2);
    assert_eq!(code(&zofa(&["sweep", "k", "--out", o, "--values", "1.5"], &[])), 2);
    assert_eq!(code(&zofa(&["sweep", "k", "--out", o], &[("ZOFA_THREADS", "zero")])), 2);
    assert_eq!(code(&zofa(&["adapt", "--bogus-flag"], &[])), 2);
    let bad_toml = tmp.path().join("bad.toml");
    fs::write(&bad_toml, "[adapt\n").unwrap();
    assert_eq!(code(&zofa(&["adapt", "--config", s(&bad_toml), "--out", o], &[])), 2);

    let missing = tmp.path().join("absent.zofa");
    let res = zofa(&["adapt", "--model", s(&missing), "--out", o], &[]);
    assert_eq!(code(&res), 3);
    assert!(String::from_utf8_lossy(&res.stderr).contains("absent.zofa"));
    assert_eq!(code(&zofa(&["adapt", "--config", s(&tmp.path().join("none.toml")), "--out", o], &[])), 3);
    let garbage = tmp.path().join("garbage.zofa");
    fs::write(&garbage, b"not a model").unwrap();
    assert_eq!(code(&zofa(&["adapt", "--model", s(&garbage), "--out", o], &[])), 3);
    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"").unwrap();
    assert_eq!(code(&zofa(&["pretrain", "--out", s(&blocker.join("sub"))], &[])), 3);

    let res = zofa(&["pretrain", "--out", o, "--set", "fixture.pretrain_lr=1e300"], &[]);
    assert_eq!(code(&res), 4);
    assert!(String::from_utf8_lossy(&res.stderr).contains("diverged"));
}

#[test]
fn single_setting_sweep_matches_adapt() {
    let tmp = TempDir::new().unwrap();
    let model = pretrained(&tmp);
    let adapt = tmp.path().join("adapt");
    let sweep = tmp.path().join("sweep");
    ok(&["adapt", "--model", s(&model), "--out", s(&adapt), "--set", SMALL, "--set", "adapt.gamma=0.002"]);
    ok(&["sweep", "gamma", "--model", s(&model), "--out", s(&sweep), "--set", SMALL, "--values", "0.002"]);
    let mut rows = csv::Reader::from_path(sweep.join("gamma.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rows.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][3].parse::<usize>().unwrap(), 1);
    assert_eq!(rows[0][4].parse::<f64>().unwrap(), accuracy(&adapt));
    let run = sweep.join("gamma/gamma=0.002/seed-0");
    assert_eq!(fs::read(run.join("trace.csv")).unwrap(), fs::read(adapt.join("trace.csv")).unwrap());
}

#[test]
fn sweeps_are_independent_of_worker_count() {
    let tmp = TempDir::new().unwrap();
    let model = pretrained(&tmp);
    let run = |threads: &str| {
        let dir = tmp.path().join(format!("t{threads}"));
        let res = zofa(
            &["sweep", "components", "--model", s(&model), "--out", s(&dir), "--set", "protocol.samples_per_domain=100"],
            &[("ZOFA_THREADS", threads)],
        );
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        fs::read_to_string(dir.join("components.csv")).unwrap()
    };
    let serial = run("1");
    assert_eq!(serial, run("4"));
    assert_eq!(serial.lines().count(), 17);
    let labels: std::collections::HashSet<&str> =
        serial.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(labels.len(), 16);
    assert!(labels.contains("sr1-swa1-ago1-ssd1") && labels.contains("sr0-swa0-ago0-ssd0"));
}

#[test]
fn batch_size_sweep_crosses_learning_rates_over_seeds() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("b");
    ok(&[
        "sweep", "batch-size", "--out", s(&out), "--values", "4,16", "--set", "sweep.etas=[0.03, 0.06]", "--set",
        "seeds=[0, 1]", "--set", "protocol.samples_per_domain=100",
    ]);
    let text = fs::read_to_string(out.join("batch-size.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.split(',').nth(3) == Some("2")));
    assert!(out.join("batch-size/b=4-eta=0.03/seed-1/summary.json").exists());
}

#[test]
fn probes_write_their_tables() {
    let tmp = TempDir::new().unwrap();
    let model = pretrained(&tmp);
    let a = tmp.path().join("align");
    ok(&["probe", "alignment", "--model", s(&model), "--out", s(&a), "--set", "probe.probes=40"]);
    assert_eq!(fs::read_to_string(a.join("alignment.csv")).unwrap().lines().count(), 41);
    let sum = summary(&a);
    assert!(sum["mean_cosine"].as_f64().unwrap() > sum["mean_cosine_batch_shared"].as_f64().unwrap());

    let v = tmp.path().join("shortcut");
    ok(&["probe", "shortcut", "--out", s(&v), "--set", "probe.trials=20000"]);
    let text = fs::read_to_string(v.join("shortcut.csv")).unwrap();
    for line in text.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!(f[2] >= 0.95 * f[5], "{line}");
    }
}
