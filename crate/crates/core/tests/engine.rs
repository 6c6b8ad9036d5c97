use zofa::data::{build_protocol, preset_15, CorruptionKind, CorruptionSpec, Dataset, ResetPolicy};
use zofa::engine::{adapt_step, gradient_alignment_probe, run_stream, write_report, AdaptConfig, Mode, OnlineState};
use zofa::experiments::{desk_config, Fixture, FixtureSpec};
use zofa::net::{accuracy, forward_count, ParamSubset};
use zofa::Error;

fn fixture() -> Fixture {
    Fixture::build(&FixtureSpec::seeded(0)).unwrap()
}

fn domains(f: &Fixture, n: usize, per: usize) -> Vec<Dataset> {
    let specs: Vec<CorruptionSpec> = preset_15(5, 0).into_iter().step_by(15 / n).take(n).collect();
    build_protocol(specs, per, 0).unwrap().materialize(&f.test).unwrap()
}

#[test]
fn no_adapt_matches_static_evaluation_and_leaves_the_net_alone() {
    let f = fixture();
    let ds = domains(&f, 3, 200);
    let cfg = desk_config(Mode::NoAdapt, 0);
    let report = run_stream(&f.net, &ds, ResetPolicy::Continual, &cfg, Some(&f.source)).unwrap();
    for (r, d) in report.domains.iter().zip(&ds) {
        assert_eq!(r.accuracy, accuracy(&f.net, d).unwrap());
        assert_eq!(r.drift, 0.0);
        assert_eq!(r.forwards, d.len() as u64);
    }
    let state = OnlineState::new(&f.net, &cfg).unwrap();
    let x = ds[0].x.select_rows(&(0..16).collect::<Vec<_>>());
    let out = adapt_step(&f.net, &state, &x, None, &cfg, None).unwrap();
    assert_eq!(out.net, f.net);
    assert_eq!(out.predictions, f.net.forward(&x).unwrap().logits);
}

#[test]
fn zero_step_and_zero_relaxation_freeze_the_parameters() {
    let f = fixture();
    let ds = domains(&f, 1, 64);
    let cfg = AdaptConfig { eta: 0.0, gamma: 0.0, ..desk_config(Mode::Eva0, 0) };
    let mut net = f.net.clone();
    cfg.adapted.apply(&mut net).unwrap();
    let state = OnlineState::new(&net, &cfg).unwrap();
    let x = ds[0].x.select_rows(&(0..16).collect::<Vec<_>>());
    let out = adapt_step(&net, &state, &x, None, &cfg, Some(&f.source)).unwrap();
    assert_eq!(out.net.pack(ParamSubset::All), net.pack(ParamSubset::All));
    // Predictions still come from the perturbed pair, not the clean forward.
    assert_ne!(out.predictions, net.forward(&x).unwrap().logits);
    assert_eq!(out.state.step, 1);
}

#[test]
fn every_adapted_step_costs_two_forwards_per_sample() {
    let f = fixture();
    let ds = domains(&f, 1, 64);
    let x = ds[0].x.select_rows(&(0..16).collect::<Vec<_>>());
    for mode in Mode::ALL {
        let cfg = desk_config(mode, 0);
        let mut net = f.net.clone();
        cfg.adapted.apply(&mut net).unwrap();
        let state = OnlineState::new(&net, &cfg).unwrap();
        let before = forward_count();
        adapt_step(&net, &state, &x, None, &cfg, Some(&f.source)).unwrap();
        let used = forward_count() - before;
        match mode {
            Mode::NoAdapt | Mode::BpOracleTent => assert_eq!(used, 16, "{}", mode.name()),
            _ => assert_eq!(used, 32, "{}", mode.name()),
        }
    }
}

#[test]
fn runs_are_bit_reproducible() {
    let f = fixture();
    let ds = domains(&f, 3, 160);
    let cfg = desk_config(Mode::Eva0, 4);
    let a = run_stream(&f.net, &ds, ResetPolicy::Continual, &cfg, Some(&f.source)).unwrap();
    let b = run_stream(&f.net, &ds, ResetPolicy::Continual, &cfg, Some(&f.source)).unwrap();
    assert_eq!(a, b);
    let c = run_stream(&f.net, &ds, ResetPolicy::Continual, &desk_config(Mode::Eva0, 5), Some(&f.source)).unwrap();
    assert_ne!(a.trace, c.trace);
}

#[test]
fn single_domain_runs_equal_isolated_runs() {
    let f = fixture();
    let ds = domains(&f, 3, 160);
    let cfg = desk_config(Mode::Eva0, 0);
    let joint = run_stream(&f.net, &ds, ResetPolicy::SingleDomain, &cfg, Some(&f.source)).unwrap();
    for (i, d) in ds.iter().enumerate() {
        for reset in [ResetPolicy::SingleDomain, ResetPolicy::Continual] {
            let alone = run_stream(&f.net, std::slice::from_ref(d), reset, &cfg, Some(&f.source)).unwrap();
            let (a, b) = (&alone.domains[0], &joint.domains[i]);
            assert_eq!((a.correct, a.drift, a.forwards), (b.correct, b.drift, b.forwards));
        }
    }
}

#[test]
fn domain_order_matters_only_for_continual_runs() {
    let f = fixture();
    let ds = domains(&f, 3, 160);
    let mut rev = ds.clone();
    rev.reverse();
    let cfg = desk_config(Mode::Eva0, 0);
    let run = |d: &[Dataset], reset| run_stream(&f.net, d, reset, &cfg, Some(&f.source)).unwrap();
    let (a, b) = (run(&ds, ResetPolicy::SingleDomain), run(&rev, ResetPolicy::SingleDomain));
    for (x, y) in a.domains.iter().zip(b.domains.iter().rev()) {
        assert_eq!((x.correct, x.drift), (y.correct, y.drift));
    }
    let (c, d) = (run(&ds, ResetPolicy::Continual), run(&rev, ResetPolicy::Continual));
    let fwd: Vec<_> = c.domains.iter().map(|r| (r.correct, r.drift)).collect();
    let back: Vec<_> = d.domains.iter().rev().map(|r| (r.correct, r.drift)).collect();
    assert_ne!(fwd, back);
}

#[test]
fn anchor_guidance_bounds_continual_drift() {
    let f = fixture();
    let ds = domains(&f, 15, 400);
    let on = desk_config(Mode::Eva0, 0);
    let off = AdaptConfig { ago: Some(false), ..on.clone() };
    let a = run_stream(&f.net, &ds, ResetPolicy::Continual, &on, Some(&f.source)).unwrap();
    let b = run_stream(&f.net, &ds, ResetPolicy::Continual, &off, Some(&f.source)).unwrap();
    assert!(a.final_drift < b.final_drift, "{} vs {}", a.final_drift, b.final_drift);
    assert!(a.final_drift < 10.0, "drift {}", a.final_drift);
    for r in &a.domains {
        assert!(r.drift.is_finite());
    }
}

#[test]
fn alignment_without_source_statistics_is_a_config_error() {
    let f = fixture();
    let ds = domains(&f, 1, 32);
    let err = run_stream(&f.net, &ds, ResetPolicy::SingleDomain, &desk_config(Mode::Eva0, 0), None).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let dagger = run_stream(&f.net, &ds, ResetPolicy::SingleDomain, &desk_config(Mode::Eva0Dagger, 0), None).unwrap();
    assert_eq!(dagger.samples, 32);
    let lambda0 = AdaptConfig { lambda: 0.0, ..desk_config(Mode::Eva0, 0) };
    assert!(run_stream(&f.net, &ds, ResetPolicy::SingleDomain, &lambda0, None).is_ok());
}

#[test]
fn invalid_configs_are_rejected() {
    let f = fixture();
    let ds = domains(&f, 1, 32);
    let base = desk_config(Mode::Eva0, 0);
    for bad in [
        AdaptConfig { batch_size: 0, ..base.clone() },
        AdaptConfig { gamma: 1.5, ..base.clone() },
        AdaptConfig { mu: 0.0, ..base.clone() },
        AdaptConfig { eta: -1.0, ..base.clone() },
        AdaptConfig { rho: f64::NAN, ..base.clone() },
    ] {
        let err = run_stream(&f.net, &ds, ResetPolicy::SingleDomain, &bad, Some(&f.source)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}

#[test]
fn empty_streams_give_empty_reports() {
    let f = fixture();
    let r = run_stream(&f.net, &[], ResetPolicy::Continual, &desk_config(Mode::Eva0, 0), Some(&f.source)).unwrap();
    assert!(r.domains.is_empty());
    assert_eq!((r.samples, r.forwards, r.average_accuracy), (0, 0, 0.0));
}

#[test]
fn a_ragged_final_batch_and_batch_size_one_are_handled() {
    let f = fixture();
    let ds = domains(&f, 1, 37);
    for b in [1, 16] {
        let cfg = AdaptConfig { batch_size: b, ..desk_config(Mode::Eva0, 0) };
        let r = run_stream(&f.net, &ds, ResetPolicy::SingleDomain, &cfg, Some(&f.source)).unwrap();
        assert_eq!(r.samples, 37);
        assert_eq!(r.forwards, 74);
        assert_eq!(r.trace.len(), 37usize.div_ceil(b));
        assert_eq!(r.trace.last().unwrap().record.batch_size, if b == 1 { 1 } else { 5 });
    }
}

#[test]
fn the_first_step_bootstraps_the_online_statistics() {
    let f = fixture();
    let ds = domains(&f, 1, 32);
    let cfg = desk_config(Mode::Eva0, 0);
    let mut net = f.net.clone();
    cfg.adapted.apply(&mut net).unwrap();
    let state = OnlineState::new(&net, &cfg).unwrap();
    assert!(state.moments.mean().is_none());
    let x = ds[0].x.select_rows(&(0..16).collect::<Vec<_>>());
    let out = adapt_step(&net, &state, &x, None, &cfg, Some(&f.source)).unwrap();
    assert!(out.record.loss_plus.is_finite() && out.record.loss_minus.is_finite());
    assert!(out.state.moments.mean().is_some());
    assert!(out.state.center.value().is_some());
}

#[test]
fn diagnostics_record_a_cosine_every_step() {
    let f = fixture();
    let ds = domains(&f, 1, 48);
    let cfg = AdaptConfig { diagnostics: true, ..desk_config(Mode::Eva0, 0) };
    let r = run_stream(&f.net, &ds, ResetPolicy::SingleDomain, &cfg, Some(&f.source)).unwrap();
    assert_eq!(r.trace.len(), 3);
    for row in &r.trace {
        let c = row.record.cosine.unwrap();
        assert!((-1.0..=1.0).contains(&c));
    }
    let mut net = f.net.clone();
    cfg.adapted.apply(&mut net).unwrap();
    let state = OnlineState::new(&net, &cfg).unwrap();
    let x = ds[0].x.select_rows(&(0..16).collect::<Vec<_>>());
    let bp = AdaptConfig { mode: Mode::BpOracleTent, ..cfg.clone() };
    let exact = gradient_alignment_probe(&net, &state, &x, &bp, Some(&f.source)).unwrap();
    assert!((exact.cosine - 1.0).abs() < 1e-9, "{}", exact.cosine);
    let none = AdaptConfig { mode: Mode::NoAdapt, ..cfg };
    assert!(gradient_alignment_probe(&net, &state, &x, &none, Some(&f.source)).unwrap().degenerate);
}

#[test]
fn reports_are_written_reproducibly() {
    let f = fixture();
    let ds = domains(&f, 2, 64);
    let cfg = desk_config(Mode::Eva0, 0);
    let echo = serde_json::to_value(&cfg).unwrap();
    let report = run_stream(&f.net, &ds, ResetPolicy::Continual, &cfg, Some(&f.source)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    write_report(&a, &report, &echo).unwrap();
    let again = run_stream(&f.net, &ds, ResetPolicy::Continual, &cfg, Some(&f.source)).unwrap();
    write_report(&b, &again, &echo).unwrap();
    for name in ["trace.csv", "summary.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
    }
    let trace = std::fs::read_to_string(a.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + report.trace.len());
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"], echo);
    assert_eq!(summary["forwards_per_sample"], 2.0);
    assert_eq!(summary["report"]["domains"].as_array().unwrap().len(), 2);
}

#[test]
fn a_mask_domain_adapts_without_non_finite_values() {
    let f = fixture();
    let spec = CorruptionSpec::new(CorruptionKind::MaskDropout, 5, 3);
    let ds = build_protocol(vec![spec], 500, 0).unwrap().materialize(&f.test).unwrap();
    let r = run_stream(&f.net, &ds, ResetPolicy::SingleDomain, &desk_config(Mode::Eva0, 0), Some(&f.source)).unwrap();
    assert!(r.trace.iter().all(|t| t.record.warning.is_none() && t.record.excluded == 0));
    assert!(r.final_drift.is_finite() && r.final_drift > 0.0);
}
