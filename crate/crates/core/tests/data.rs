use zofa::data::{
    build_protocol, corrupt, load_dataset, make_source_task, make_source_task_with, preset_15, read_dataset,
    save_dataset, write_dataset, CorruptionKind, CorruptionSpec, Dataset, DatasetMeta, TaskSpec,
};
use zofa::experiments::{Fixture, FixtureSpec};
use zofa::net::accuracy;
use zofa::Tensor;

fn small() -> Dataset {
    make_source_task(7, 6, 3, 10, 40).unwrap().1
}

#[test]
fn generation_is_replayable() {
    let a = make_source_task(11, 8, 4, 50, 30).unwrap();
    let b = make_source_task(11, 8, 4, 50, 30).unwrap();
    assert_eq!(a, b);
    let c = make_source_task(12, 8, 4, 50, 30).unwrap();
    assert_ne!(a.0.x, c.0.x);
    assert_eq!(a.0.len(), 50);
    assert_eq!(a.1.len(), 30);
    assert!(a.0.y.iter().chain(&a.1.y).all(|&y| y < 4));
}

#[test]
fn degenerate_shapes_are_rejected() {
    assert!(make_source_task(0, 1, 3, 10, 10).is_err());
    assert!(make_source_task(0, 4, 1, 10, 10).is_err());
}

#[test]
fn datasets_validate_their_labels_and_widths() {
    let meta = DatasetMeta { seed: 0, d: 2, classes: 2, domain: "x".into(), severity: 0 };
    let x = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
    assert!(Dataset::new(x.clone(), vec![0, 1], meta.clone()).is_ok());
    assert!(Dataset::new(x.clone(), vec![0, 2], meta.clone()).is_err());
    assert!(Dataset::new(x.clone(), vec![0], meta.clone()).is_err());
    assert!(Dataset::new(x, vec![0, 1], DatasetMeta { d: 3, ..meta }).is_err());
}

#[test]
fn every_corruption_keeps_labels_and_shape_and_replays() {
    let ds = small();
    for kind in CorruptionKind::ALL {
        for sev in 1..=5 {
            let spec = CorruptionSpec::new(kind, sev, 99);
            let a = corrupt(&ds, &spec).unwrap();
            assert_eq!(a.y, ds.y);
            assert_eq!(a.x.dims2().unwrap(), ds.x.dims2().unwrap());
            assert_eq!(a.meta.severity, sev);
            assert_eq!(a.meta.domain, spec.tag());
            assert_ne!(a.x, ds.x, "{} s{sev} changed nothing", kind.name());
            assert_eq!(corrupt(&ds, &spec).unwrap(), a);
        }
    }
}

#[test]
fn zero_intensity_leaves_the_data_unchanged() {
    let ds = small();
    for kind in CorruptionKind::ALL {
        assert_eq!(corrupt(&ds, &CorruptionSpec::new(kind, 0, 5)).unwrap().x, ds.x);
        assert_eq!(corrupt(&ds, &CorruptionSpec::new(kind, 3, 5).with_base(0.0)).unwrap().x, ds.x);
    }
}

#[test]
fn intensity_follows_the_linear_severity_table() {
    for kind in CorruptionKind::ALL {
        for (sev, frac) in [(1u8, 0.2), (2, 0.4), (3, 0.6), (4, 0.8), (5, 1.0)] {
            let level = CorruptionSpec::new(kind, sev, 0).level();
            assert!((level - frac * kind.default_base()).abs() < 1e-12);
        }
    }
}

#[test]
fn gaussian_noise_has_the_documented_spread() {
    let (_, ds) = make_source_task(1, 16, 4, 0, 2000).unwrap();
    let spec = CorruptionSpec::new(CorruptionKind::GaussNoise, 4, 3);
    let out = corrupt(&ds, &spec).unwrap();
    let diff: Vec<f64> = out.x.data().iter().zip(ds.x.data()).map(|(a, b)| a - b).collect();
    let n = diff.len() as f64;
    let mean = diff.iter().sum::<f64>() / n;
    let sd = (diff.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let want = spec.level();
    assert!((sd - want).abs() < 4.0 * want / (2.0 * n).sqrt(), "sd {sd} vs {want}");
}

#[test]
fn masking_zeroes_a_fixed_fraction_of_features() {
    let ds = small();
    let out = corrupt(&ds, &CorruptionSpec::new(CorruptionKind::MaskDropout, 5, 1)).unwrap();
    let d = ds.dim();
    let zero_cols: Vec<usize> = (0..d).filter(|&j| (0..out.len()).all(|i| out.x.row(i)[j] == 0.0)).collect();
    assert_eq!(zero_cols.len(), 3);
}

#[test]
fn rotation_preserves_row_norms_and_needs_two_features() {
    let ds = small();
    let out = corrupt(&ds, &CorruptionSpec::new(CorruptionKind::Rotation2plane, 5, 2)).unwrap();
    for i in 0..ds.len() {
        let a: f64 = ds.x.row(i).iter().map(|v| v * v).sum();
        let b: f64 = out.x.row(i).iter().map(|v| v * v).sum();
        assert!((a - b).abs() <= 1e-9 * (1.0 + a));
    }
    let meta = DatasetMeta { seed: 0, d: 1, classes: 2, domain: "flat".into(), severity: 0 };
    let flat = Dataset::new(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap(), vec![0, 1], meta).unwrap();
    assert!(corrupt(&flat, &CorruptionSpec::new(CorruptionKind::Rotation2plane, 1, 0)).is_err());
    assert!(corrupt(&flat, &CorruptionSpec::new(CorruptionKind::GaussNoise, 1, 0)).is_ok());
}

#[test]
fn out_of_range_specs_are_rejected() {
    let ds = small();
    assert!(corrupt(&ds, &CorruptionSpec::new(CorruptionKind::GaussNoise, 6, 0)).is_err());
    assert!(corrupt(&ds, &CorruptionSpec::new(CorruptionKind::GaussNoise, 2, 0).with_base(-1.0)).is_err());
}

#[test]
fn no_adapt_accuracy_falls_with_severity() {
    let fixtures: Vec<Fixture> = (0..5).map(|s| Fixture::build(&FixtureSpec::seeded(s)).unwrap()).collect();
    for kind in CorruptionKind::ALL {
        let curve: Vec<f64> = (0..=5u8)
            .map(|sev| {
                fixtures
                    .iter()
                    .enumerate()
                    .map(|(s, f)| {
                        let spec = CorruptionSpec::new(kind, sev, 1000 + s as u64);
                        accuracy(&f.net, &corrupt(&f.test, &spec).unwrap()).unwrap()
                    })
                    .sum::<f64>()
                    / fixtures.len() as f64
            })
            .collect();
        let inversions: Vec<f64> = curve.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).collect();
        assert!(
            inversions.len() <= 1 && inversions.iter().all(|d| *d <= 0.01),
            "{}: {:?}",
            kind.name(),
            curve
        );
        assert!(curve[5] < curve[0], "{}: {:?}", kind.name(), curve);
    }
}

#[test]
fn protocols_need_a_domain_and_a_sample_count() {
    assert!(build_protocol(vec![], 10, 0).is_err());
    assert!(build_protocol(preset_15(3, 0), 0, 0).is_err());
    let one = build_protocol(vec![CorruptionSpec::new(CorruptionKind::MaskDropout, 2, 4)], 10, 0).unwrap();
    let streams = one.materialize(&small()).unwrap();
    assert_eq!(streams.len(), 1);
    assert_eq!(streams[0].len(), 10);
}

#[test]
fn preset_covers_five_groups_with_distinct_seeds() {
    let p = preset_15(5, 8);
    assert_eq!(p.len(), 15);
    let count = |k| p.iter().filter(|s| s.kind == k).count();
    assert_eq!(count(CorruptionKind::GaussNoise), 3);
    assert_eq!(count(CorruptionKind::FeatureScale), 4);
    assert_eq!(count(CorruptionKind::Rotation2plane), 4);
    assert_eq!(count(CorruptionKind::MaskDropout), 3);
    assert_eq!(count(CorruptionKind::Mixed), 1);
    assert!(p.iter().all(|s| s.severity == 5));
    let mut seeds: Vec<u64> = p.iter().map(|s| s.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    assert_eq!(seeds.len(), 15);
    assert_eq!(preset_15(5, 8), p);
}

#[test]
fn a_domain_stream_does_not_depend_on_its_position() {
    let base = small();
    let specs = preset_15(2, 1);
    let fwd = build_protocol(specs.clone(), 30, 6).unwrap().materialize(&base).unwrap();
    let mut rev_specs = specs;
    rev_specs.reverse();
    let mut rev = build_protocol(rev_specs, 30, 6).unwrap().materialize(&base).unwrap();
    rev.reverse();
    assert_eq!(fwd, rev);
    let shuffled = build_protocol(preset_15(2, 1), 30, 7).unwrap().materialize(&base).unwrap();
    assert_ne!(fwd[0].x, shuffled[0].x);
    assert!(build_protocol(preset_15(2, 1), 41, 6).unwrap().materialize(&base).is_err());
}

#[test]
fn dataset_files_round_trip() {
    let ds = make_source_task_with(&TaskSpec { n_train: 0, n_test: 25, ..TaskSpec::default() }).unwrap().1;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.zofd");
    save_dataset(&ds, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.x, ds.x);
    assert_eq!(back.y, ds.y);
    assert_eq!((back.dim(), back.classes()), (ds.dim(), ds.classes()));
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..5], b"ZOFD1");
    assert_eq!(bytes.len(), 5 + 24 + 8 * ds.x.data().len() + 4 * ds.len());
    let mut again = Vec::new();
    write_dataset(&back, &mut again).unwrap();
    assert_eq!(again, bytes);
}

#[test]
fn malformed_dataset_files_are_rejected() {
    let ds = small();
    let mut bytes = Vec::new();
    write_dataset(&ds, &mut bytes).unwrap();
    assert!(read_dataset(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(read_dataset(extra.as_slice()).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(read_dataset(magic.as_slice()).is_err());
    let mut label = bytes;
    let n = label.len();
    label[n - 4..].copy_from_slice(&7u32.to_le_bytes());
    assert!(read_dataset(label.as_slice()).is_err());
}
