use plume_tensor::Tensor;

use crate::config::{TargetConfig, N_POLLUTANTS};
use crate::error::Result;
use crate::geo::{GeoPoint, GridSpec, KernelProjector};

/// Target grids for one output resolution: `σ = sigma_factor · R` projectors
/// over the contributing stations.
#[derive(Debug, Clone)]
pub struct TargetProjector {
    pub resolution_m: f64,
    pub size: usize,
    projector: KernelProjector,
}

impl TargetProjector {
    pub fn new(center: GeoPoint, resolution_m: f64, size: usize, points: &[GeoPoint], cfg: &TargetConfig) -> Result<Self> {
        let grid = GridSpec::centered(center, resolution_m, size, size)?;
        Ok(Self {
            resolution_m,
            size,
            projector: KernelProjector::new(&grid, cfg.sigma_factor * resolution_m, points)?,
        })
    }

    /// `(N_out, H, W, 4)` row-major in f64, NaN where the kernel weight total
    /// is below the threshold. `values[step][point][pollutant]`, NaN for
    /// missing readings.
    pub fn values(&self, values: &[Vec<[f64; N_POLLUTANTS]>], cfg: &TargetConfig) -> Vec<f64> {
        let cells = self.size * self.size;
        let mut out = vec![f64::NAN; values.len() * cells * N_POLLUTANTS];
        for (step, per_point) in values.iter().enumerate() {
            for p in 0..N_POLLUTANTS {
                let v: Vec<Option<f64>> = per_point.iter().map(|x| x[p].is_finite().then_some(x[p])).collect();
                let wg = self.projector.project(&v);
                for cell in 0..cells {
                    if wg.weight_sum[cell] >= cfg.weight_threshold {
                        out[(step * cells + cell) * N_POLLUTANTS + p] = wg.values[cell];
                    }
                }
            }
        }
        out
    }

    pub fn build(&self, values: &[Vec<[f64; N_POLLUTANTS]>], cfg: &TargetConfig) -> Tensor<f32> {
        let data = self.values(values, cfg).into_iter().map(|v| v as f32).collect();
        Tensor::from_vec(&[values.len(), self.size, self.size, N_POLLUTANTS], data).expect("target shape")
    }
}

/// Masked target stacks per output grid `(R, size)` in f64, centered on
/// `center`, ignoring the station `exclude`. `values[step][station][pollutant]`.
pub fn build_target_values(
    center: GeoPoint,
    ids: &[String],
    locations: &[GeoPoint],
    values: &[Vec<[f64; N_POLLUTANTS]>],
    grids: &[(f64, usize)],
    cfg: &TargetConfig,
    exclude: &str,
) -> Result<Vec<Vec<f64>>> {
    let keep: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] != exclude).collect();
    let points: Vec<GeoPoint> = keep.iter().map(|&i| locations[i]).collect();
    let kept: Vec<Vec<[f64; N_POLLUTANTS]>> = values
        .iter()
        .map(|row| keep.iter().map(|&i| row[i]).collect())
        .collect();
    grids
        .iter()
        .map(|&(r, n)| Ok(TargetProjector::new(center, r, n, &points, cfg)?.values(&kept, cfg)))
        .collect()
}

/// [`build_target_values`] as `(N_out, H, W, 4)` f32 tensors.
pub fn build_targets(
    center: GeoPoint,
    ids: &[String],
    locations: &[GeoPoint],
    values: &[Vec<[f64; N_POLLUTANTS]>],
    grids: &[(f64, usize)],
    cfg: &TargetConfig,
    exclude: &str,
) -> Result<Vec<Tensor<f32>>> {
    let raw = build_target_values(center, ids, locations, values, grids, cfg, exclude)?;
    raw.into_iter()
        .zip(grids)
        .map(|(v, &(_, n))| {
            let data = v.into_iter().map(|x| x as f32).collect();
            Ok(Tensor::from_vec(&[values.len(), n, n, N_POLLUTANTS], data)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_station_and_empty_cells() {
        let center = GeoPoint::new(45.0, 5.0).unwrap();
        let grid = GridSpec::centered(center, 50.0, 64, 64).unwrap();
        let at = grid.cell_center_geo(10, 20);
        let ids = vec!["s1".to_string(), "c".to_string()];
        let vals = vec![vec![[30.0, f64::NAN, f64::NAN, f64::NAN], [99.0; 4]]];
        let t = build_targets(center, &ids, &[at, center], &vals, &[(50.0, 64)], &TargetConfig::default(), "c").unwrap();
        let t = &t[0];
        assert_eq!(t.shape(), &[1, 64, 64, 4]);
        let idx = |r: usize, c: usize, p: usize| ((r * 64) + c) * 4 + p;
        assert!((t.data()[idx(10, 20, 0)] - 30.0).abs() < 1e-5);
        assert!(t.data()[idx(10, 20, 1)].is_nan());
        // far corner: weight ~ 0 < 1/2
        assert!(t.data()[idx(63, 63, 0)].is_nan());
        // the excluded station's value never shows up
        assert!(t.data().iter().all(|v| v.is_nan() || (*v - 30.0).abs() < 1e-4));
    }
}
