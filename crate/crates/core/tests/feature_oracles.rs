//! Target and road gridding against brute-force references.

use plume_core::config::TargetConfig;
use plume_core::features::roads::SAMPLE_STEP_M;
use plume_core::features::{build_target_values, grid_roads, RoadCategory, RoadSegment};
use plume_core::geo::{project_points, GeoPoint, GridSpec};
use proptest::prelude::*;

const GRIDS: [(f64, usize); 4] = [(50.0, 32), (100.0, 32), (200.0, 16), (20_000.0, 20)];

fn center() -> GeoPoint {
    GeoPoint::new(48.137, 11.575).unwrap()
}

/// Weighted mean over every listed station, NaN below the threshold.
fn target_oracle(grid: &GridSpec, sigma: f64, stations: &[(GeoPoint, f64)], threshold: f64) -> Vec<f64> {
    (0..grid.cells())
        .map(|i| {
            let (cx, cy) = grid.cell_center_local(i / grid.width, i % grid.width);
            let (mut ws, mut wv) = (0.0, 0.0);
            for (p, v) in stations {
                let (x, y) = grid.frame.to_local(*p);
                let w = (-((cx - x).powi(2) + (cy - y).powi(2)) / (2.0 * sigma * sigma)).exp();
                ws += w;
                wv += w * v;
            }
            if ws >= threshold {
                wv / ws
            } else {
                f64::NAN
            }
        })
        .collect()
}

fn stations_strategy() -> impl Strategy<Value = Vec<(f64, f64, [f64; 4])>> {
    // offsets in units of the grid half-extent, so every resolution sees neighbours
    prop::collection::vec((-1.2f64..1.2, -1.2f64..1.2, prop::array::uniform4(0.0f64..300.0)), 1..=12)
}

fn place(offsets: &[(f64, f64, [f64; 4])], half: f64) -> (Vec<String>, Vec<GeoPoint>, Vec<[f64; 4]>) {
    let g = GridSpec::centered(center(), 1.0, 1, 1).unwrap();
    let ids = (0..offsets.len()).map(|i| format!("s{i:02}")).collect();
    let locs = offsets.iter().map(|(x, y, _)| g.frame.to_geo(x * half, y * half)).collect();
    let vals = offsets.iter().map(|o| o.2).collect();
    (ids, locs, vals)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn targets_match_brute_force(offsets in stations_strategy(), grid_k in 0usize..4, exclude in 0usize..12) {
        let (r, n) = GRIDS[grid_k];
        let (ids, locs, vals) = place(&offsets, r * n as f64 / 2.0);
        let cfg = TargetConfig::default();
        let exclude_id = format!("s{exclude:02}");
        let got = build_target_values(center(), &ids, &locs, &[vals.clone()], &[(r, n)], &cfg, &exclude_id).unwrap();
        let grid = GridSpec::centered(center(), r, n, n).unwrap();
        for p in 0..4 {
            let pts: Vec<(GeoPoint, f64)> = (0..ids.len())
                .filter(|&i| ids[i] != exclude_id)
                .map(|i| (locs[i], vals[i][p]))
                .collect();
            let want = target_oracle(&grid, 3.0 * r, &pts, cfg.weight_threshold);
            for (cell, w) in want.iter().enumerate() {
                let g = got[0][cell * 4 + p];
                if w.is_nan() {
                    prop_assert!(g.is_nan(), "cell {cell} should be masked, got {g}");
                } else {
                    prop_assert!((g - w).abs() <= 1e-12 * w.abs().max(1e-12), "cell {cell}: {g} vs {w}");
                }
            }
        }
    }

    #[test]
    fn targets_agree_with_projection_on_valid_cells(offsets in stations_strategy()) {
        let (ids, locs, vals) = place(&offsets, 1_600.0);
        let got = build_target_values(center(), &ids, &locs, &[vals.clone()], &[(50.0, 64)], &TargetConfig::default(), "none").unwrap();
        let grid = GridSpec::centered(center(), 50.0, 64, 64).unwrap();
        let pts: Vec<(GeoPoint, f64)> = locs.iter().zip(&vals).map(|(l, v)| (*l, v[0])).collect();
        let proj = project_points(&pts, &grid, 150.0).unwrap();
        for cell in 0..grid.cells() {
            let g = got[0][cell * 4];
            prop_assert_eq!(g.is_nan(), proj.weight_sum[cell] < 0.5);
            if !g.is_nan() {
                prop_assert!((g - proj.values[cell]).abs() <= 1e-12 * proj.values[cell].abs().max(1e-12));
            }
        }
    }

    #[test]
    fn adding_a_station_never_invalidates_a_cell(offsets in stations_strategy(), extra in (-1.2f64..1.2, -1.2f64..1.2), k in 0usize..4) {
        let (r, n) = GRIDS[k];
        let half = r * n as f64 / 2.0;
        let (ids, locs, vals) = place(&offsets, half);
        let mut more = offsets.clone();
        more.push((extra.0, extra.1, [10.0; 4]));
        let (ids2, locs2, vals2) = place(&more, half);
        let cfg = TargetConfig::default();
        let a = build_target_values(center(), &ids, &locs, &[vals], &[(r, n)], &cfg, "none").unwrap();
        let b = build_target_values(center(), &ids2, &locs2, &[vals2], &[(r, n)], &cfg, "none").unwrap();
        for (x, y) in a[0].iter().zip(&b[0]) {
            prop_assert!(x.is_nan() || !y.is_nan());
        }
    }
}

/// Length of the part of segment `a→b` inside the closed rectangle.
fn clip_length(a: (f64, f64), b: (f64, f64), rect: (f64, f64, f64, f64)) -> Option<f64> {
    let (x0, x1, y0, y1) = rect;
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [(-dx, a.0 - x0), (dx, x1 - a.0), (-dy, a.1 - y0), (dy, y1 - a.1)] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let t = q / p;
            if p < 0.0 {
                t0 = t0.max(t);
            } else {
                t1 = t1.min(t);
            }
        }
    }
    (t0 <= t1).then(|| (t1 - t0) * dx.hypot(dy))
}

/// Per cell: `Some(true)` when a segment clearly crosses it, `Some(false)` when
/// it misses, `None` when the crossing is too short for the sampling step.
fn road_oracle(local: &[(f64, f64)], grid: &GridSpec) -> Vec<Option<bool>> {
    (0..grid.cells())
        .map(|i| {
            let (cx, cy) = grid.cell_center_local(i / grid.width, i % grid.width);
            let h = grid.resolution_m / 2.0;
            let rect = (cx - h, cx + h, cy - h, cy + h);
            let mut touched = false;
            let mut longest = 0.0f64;
            for w in local.windows(2) {
                if let Some(l) = clip_length(w[0], w[1], rect) {
                    touched = true;
                    longest = longest.max(l);
                }
            }
            if !touched {
                Some(false)
            } else if longest > 2.0 * SAMPLE_STEP_M {
                Some(true)
            } else {
                None
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn road_counts_match_clipping_oracle(
        polylines in prop::collection::vec(
            (prop::collection::vec((-1_000.0f64..1_000.0, -1_000.0f64..1_000.0), 2..5), any::<bool>()),
            1..8,
        ),
    ) {
        let grid = GridSpec::centered(center(), 50.0, 32, 32).unwrap();
        let segs: Vec<RoadSegment> = polylines
            .iter()
            .enumerate()
            .map(|(i, (pts, major))| RoadSegment {
                id: format!("r{i}"),
                category: if *major { RoadCategory::MajorRoads } else { RoadCategory::Roads },
                points: pts.iter().map(|&(x, y)| grid.frame.to_geo(x, y)).collect(),
            })
            .collect();
        let got = grid_roads(&segs, &grid);
        let mut want = vec![0.0; grid.cells() * 2];
        let mut ambiguous = vec![false; grid.cells()];
        for (pts, major) in &polylines {
            let local: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| grid.frame.to_local(grid.frame.to_geo(x, y))).collect();
            for (cell, hit) in road_oracle(&local, &grid).into_iter().enumerate() {
                match hit {
                    Some(true) => want[cell * 2 + usize::from(*major)] += 1.0,
                    Some(false) => {}
                    None => ambiguous[cell] = true,
                }
            }
        }
        for cell in 0..grid.cells() {
            if !ambiguous[cell] {
                for k in 0..2 {
                    prop_assert_eq!(got[cell * 2 + k], want[cell * 2 + k], "cell {} channel {}", cell, k);
                }
            }
        }
    }
}

#[test]
fn major_road_through_three_cells() {
    let grid = GridSpec::centered(center(), 50.0, 8, 8).unwrap();
    let (ax, ay) = grid.cell_center_local(2, 1);
    let (bx, by) = grid.cell_center_local(2, 3);
    let seg = RoadSegment {
        id: "m".into(),
        category: RoadCategory::MajorRoads,
        points: vec![grid.frame.to_geo(ax, ay), grid.frame.to_geo(bx, by)],
    };
    let out = grid_roads(&[seg.clone(), seg], &grid);
    let major: Vec<usize> = (0..64).filter(|c| out[c * 2 + 1] > 0.0).collect();
    assert_eq!(major, vec![17, 18, 19]);
    assert!(major.iter().all(|&c| out[c * 2 + 1] == 2.0 && out[c * 2] == 0.0));
}
