//! Ingestion, patch assembly and archives on a small hand-written dataset.

mod common;

use common::{start, value, Fixture, STATIONS};
use plume_core::config::{ModelConfig, TargetConfig};
use plume_core::features::archive::{Archive, ArchiveWriter};
use plume_core::features::{
    closest_measurement_benchmark, denormalize_features, normalize_features, Dataset, FeatureStats, Patch, PatchBuilder,
    ValidationRules,
};
use plume_core::geo::{GeoPoint, GridSpec};
use plume_core::Error;
use plume_tensor::Tensor;

fn load(fx: &Fixture) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    fx.write(dir.path(), ModelConfig::tiny().n_out as i64);
    let data = Dataset::load(dir.path(), &ValidationRules::default()).unwrap();
    (dir, data)
}

fn same_bits(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn inputs_identical(a: &Patch, b: &Patch) -> bool {
    same_bits(&a.hi_hist, &b.hi_hist)
        && same_bits(&a.hi_const, &b.hi_const)
        && same_bits(&a.lo_hist, &b.lo_hist)
        && same_bits(&a.lo_fcst, &b.lo_fcst)
        && a.targets.iter().zip(&b.targets).all(|(x, y)| same_bits(x, y))
        && same_bits(&a.benchmark, &b.benchmark)
}

#[test]
fn ingests_without_rejections() {
    let (_d, data) = load(&Fixture::default());
    assert_eq!(data.report.rejected.total(), 0);
    assert_eq!(data.report.traffic_unknown_segment, 0);
    assert_eq!(data.stations.len(), 5);
    assert_eq!(data.measurements.hours, common::HOURS as usize);
    assert_eq!(data.cities()["alpha"].len(), 4);
    assert_eq!(data.weather.len(), 9);
}

#[test]
fn patch_has_layout_shapes() {
    let (_d, data) = load(&Fixture::default());
    let cfg = ModelConfig::tiny();
    let b = PatchBuilder::new(&data, &cfg, &TargetConfig::default());
    let t0s = b.candidate_t0s(1);
    assert_eq!(t0s.first(), Some(&start().offset(2)));
    assert_eq!(t0s.last(), Some(&start().offset(10)));
    let p = b.build(0, start().offset(4)).unwrap();
    let ch = cfg.channels();
    assert_eq!(p.hi_hist.shape(), &[3, 8, 8, ch.hi_hist.len()]);
    assert_eq!(ch.hi_hist.len(), 11);
    assert_eq!(p.hi_const.shape(), &[8, 8, 2]);
    assert_eq!(p.lo_hist.shape(), &[3, 4, 4, 8]);
    assert_eq!(p.lo_fcst.shape(), &[3, 4, 4, 10]);
    let shapes: Vec<Vec<usize>> = p.targets.iter().map(|t| t.shape().to_vec()).collect();
    let want: Vec<Vec<usize>> = cfg.output_grids().iter().map(|&(_, n)| vec![3, n, n, 4]).collect();
    assert_eq!(shapes, want);
    assert!(p.lo_fcst.data().iter().all(|v| v.is_finite()));
    // two roads cross near the center
    assert!(p.hi_const.data().iter().sum::<f32>() >= 2.0);
}

#[test]
fn default_layout_shapes() {
    let cfg = ModelConfig::default();
    let grids: Vec<(f64, usize)> = cfg.output_grids();
    assert_eq!(grids, vec![(50.0, 64), (100.0, 32), (200.0, 16), (20_000.0, 20)]);
    let ch = cfg.channels();
    assert_eq!((ch.hi_hist.len(), ch.hi_const.len(), ch.lo_hist.len(), ch.lo_fcst.len()), (11, 2, 8, 10));
}

#[test]
fn center_station_never_reaches_inputs_or_targets() {
    let (_d1, base) = load(&Fixture::default());
    let (_d2, perturbed) = load(&Fixture {
        a_scale: 7.0,
        ..Fixture::default()
    });
    let cfg = ModelConfig::tiny();
    let tc = TargetConfig::default();
    let (b1, b2) = (PatchBuilder::new(&base, &cfg, &tc), PatchBuilder::new(&perturbed, &cfg, &tc));
    for t in [3, 6, 9] {
        let t0 = start().offset(t);
        let (p, q) = (b1.build(0, t0).unwrap(), b2.build(0, t0).unwrap());
        assert!(inputs_identical(&p, &q), "patch at {t0} depends on its center station");
        assert!(!same_bits(&p.station_truth, &q.station_truth));
        // other centers do see A
        let (p, q) = (b1.build(1, t0).unwrap(), b2.build(1, t0).unwrap());
        assert!(!same_bits(&p.hi_hist, &q.hi_hist));
    }
}

#[test]
fn hi_res_projection_matches_oracle() {
    let (_d, data) = load(&Fixture::default());
    let cfg = ModelConfig::tiny();
    let b = PatchBuilder::new(&data, &cfg, &TargetConfig::default());
    let t0 = start().offset(5);
    let p = b.build(0, t0).unwrap();
    let center = GeoPoint::new(STATIONS[0].2, STATIONS[0].3).unwrap();
    let grid = GridSpec::centered(center, cfg.hi_resolution_m, cfg.hi_size, cfg.hi_size).unwrap();
    let c = p.hi_hist.shape()[3];
    for k in 0..cfg.n_in {
        let hour = 5 - (cfg.n_in - 1 - k) as i64;
        for pol in 0..4 {
            for cell in 0..grid.cells() {
                let (cx, cy) = grid.cell_center_local(cell / grid.width, cell % grid.width);
                let (mut ws, mut wv) = (0.0, 0.0);
                for (i, s) in STATIONS.iter().enumerate().skip(1) {
                    let (x, y) = grid.frame.to_local(GeoPoint::new(s.2, s.3).unwrap());
                    let w = (-((cx - x).powi(2) + (cy - y).powi(2)) / (2.0 * cfg.sigma_hi_m.powi(2))).exp();
                    ws += w;
                    wv += w * value(i, hour, pol);
                }
                let at = |ch: usize| p.hi_hist.data()[((k * 64) + cell) * c + ch] as f64;
                assert!((at(pol) - wv / ws).abs() <= 1e-5 * (wv / ws));
                assert!((at(4 + pol) - ws).abs() <= 1e-5 * ws.max(1e-30));
            }
        }
    }
}

#[test]
fn benchmark_is_nearest_with_id_tie_break() {
    let (_d, data) = load(&Fixture::default());
    let t0 = start().offset(4);
    // B and C are equidistant from A; B has the smaller id
    let bench = closest_measurement_benchmark(&data, 0, t0);
    for p in 0..4 {
        assert_eq!(bench[p], Some(value(1, 4, p) as f32 as f64));
    }
    // from D the nearest is A
    let bench = closest_measurement_benchmark(&data, 3, t0);
    assert_eq!(bench[0], Some(value(0, 4, 0) as f32 as f64));
}

#[test]
fn missing_issuance_is_incomplete_patch() {
    let (_d, data) = load(&Fixture {
        weather_issues: vec![2, 3, 5],
        ..Fixture::default()
    });
    let b = PatchBuilder::new(&data, &ModelConfig::tiny(), &TargetConfig::default());
    match b.build(0, start().offset(4)) {
        Err(Error::IncompletePatch(msg)) => assert!(msg.contains("weather"), "{msg}"),
        other => panic!("expected incomplete patch, got {other:?}"),
    }
    assert!(matches!(b.build(0, start().offset(13)), Err(Error::IncompletePatch(_))));
    assert_eq!(b.candidate_t0s(1).len(), 3);
}

#[test]
fn invalid_readings_are_rejected_and_counted() {
    let (_d, data) = load(&Fixture {
        extra_measurement_lines: vec![
            "E,48.25,11.7,2021-03-02T00:00Z,NO2,-3".into(),
            "E,48.25,11.7,2021-03-02T00:00Z,O3,5000".into(),
            "E,48.25,11.7,2021-03-02T00:00Z,PM10,".into(),
            "A,48.1,11.5,2021-03-01T00:00Z,NO2,1".into(),
        ],
        ..Fixture::default()
    });
    let r = &data.report.rejected;
    assert_eq!((r.negative, r.above_cap, r.non_finite, r.duplicate), (1, 1, 1, 1));
    assert_eq!(data.measurement(0, start(), plume_core::time::Pollutant::NO2), Some(value(0, 0, 0) as f32 as f64));
}

#[test]
fn malformed_row_names_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    Fixture {
        extra_measurement_lines: vec!["A,48.1,11.5,2021-03-01T00:00Z,CO,3".into()],
        ..Fixture::default()
    }
    .write(dir.path(), 3);
    match Dataset::load(dir.path(), &ValidationRules::default()) {
        Err(Error::RejectedRecord { file, line, .. }) => {
            assert!(file.ends_with("measurements.csv"));
            assert_eq!(line, 5 * 14 * 4 + 2);
        }
        other => panic!("expected rejected record, got {other:?}"),
    }
}

#[test]
fn archive_round_trip_is_bit_exact() {
    let (_d, data) = load(&Fixture::default());
    let cfg = ModelConfig::tiny();
    let b = PatchBuilder::new(&data, &cfg, &TargetConfig::default());
    let patches: Vec<Patch> = [(0, 3), (2, 7), (4, 10)]
        .iter()
        .map(|&(s, t)| b.build(s, start().offset(t)).unwrap())
        .collect();
    assert!(patches[2].targets[0].data().iter().any(|v| v.is_nan()));
    let dir = tempfile::tempdir().unwrap();
    let mut w = ArchiveWriter::create(dir.path(), b.layout(), &cfg.channels()).unwrap();
    for p in &patches {
        w.push(p).unwrap();
    }
    let manifest = w.finish().unwrap();
    assert_eq!(manifest.layout_fingerprint, b.layout().fingerprint());
    let a = Archive::open(dir.path()).unwrap();
    assert_eq!(a.len(), 3);
    for (i, p) in patches.iter().enumerate() {
        let q = a.get(i).unwrap();
        assert!(inputs_identical(p, &q) && same_bits(&p.station_truth, &q.station_truth));
        assert_eq!((&p.center_station_id, p.t0), (&q.center_station_id, q.t0));
    }
    // truncating a blob is detected
    let blob = dir.path().join("hi_hist.f32");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(Archive::open(dir.path()), Err(Error::Integrity(_))));
}

#[test]
fn fitted_normalization_round_trips() {
    let (_d, data) = load(&Fixture::default());
    let cfg = ModelConfig::tiny();
    let b = PatchBuilder::new(&data, &cfg, &TargetConfig::default());
    let patches: Vec<Patch> = (0..5).map(|s| b.build(s, start().offset(6)).unwrap()).collect();
    let stats = FeatureStats::fit(&cfg.channels(), &patches);
    let n = normalize_features(&patches[0], &stats);
    let back = denormalize_features(&n, &stats);
    for (x, y) in patches[0].hi_hist.data().iter().zip(back.hi_hist.data()) {
        assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
    }
    // inputs are standardized across the fitted patches
    let fcst: Vec<f32> = patches.iter().flat_map(|p| normalize_features(p, &stats).lo_fcst.data().to_vec()).collect();
    let mean = fcst.iter().map(|&v| v as f64).sum::<f64>() / fcst.len() as f64;
    assert!(mean.abs() < 1e-3, "{mean}");
}
