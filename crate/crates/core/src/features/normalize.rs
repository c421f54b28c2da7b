//! Per-channel input normalization: optional `log1p`, then standardization.

use std::borrow::Borrow;

use plume_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::patch::Patch;
use crate::config::{ChannelLayout, POLLUTANT_NAMES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub name: String,
    pub log1p: bool,
    pub mean: f64,
    pub std: f64,
}

impl ChannelStats {
    pub fn normalize(&self, v: f64) -> f64 {
        let x = if self.log1p { v.max(0.0).ln_1p() } else { v };
        (x - self.mean) / self.std
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        let x = v * self.std + self.mean;
        if self.log1p {
            x.exp_m1()
        } else {
            x
        }
    }

    fn forward(&self, v: f32) -> f32 {
        self.normalize(v as f64) as f32
    }

    fn inverse(&self, v: f32) -> f32 {
        self.denormalize(v as f64) as f32
    }
}

/// Statistics for every input stream, fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub hi_hist: Vec<ChannelStats>,
    pub hi_const: Vec<ChannelStats>,
    pub lo_hist: Vec<ChannelStats>,
    pub lo_fcst: Vec<ChannelStats>,
}

fn is_concentration(name: &str) -> bool {
    POLLUTANT_NAMES.contains(&name) || name.ends_with("_model")
}

#[derive(Debug, Clone)]
struct Accumulator {
    names: Vec<String>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    count: u64,
}

impl Accumulator {
    fn new(names: &[String]) -> Self {
        Self {
            names: names.to_vec(),
            sum: vec![0.0; names.len()],
            sum_sq: vec![0.0; names.len()],
            count: 0,
        }
    }

    fn add(&mut self, t: &Tensor<f32>) {
        let c = self.names.len();
        let logs: Vec<bool> = self.names.iter().map(|n| is_concentration(n)).collect();
        for px in t.data().chunks_exact(c) {
            for k in 0..c {
                let v = px[k] as f64;
                let x = if logs[k] { v.max(0.0).ln_1p() } else { v };
                self.sum[k] += x;
                self.sum_sq[k] += x * x;
            }
        }
        self.count += (t.numel() / c) as u64;
    }

    fn finish(self) -> Vec<ChannelStats> {
        let n = self.count.max(1) as f64;
        self.names
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let mean = self.sum[k] / n;
                let var = (self.sum_sq[k] / n - mean * mean).max(0.0);
                let std = var.sqrt();
                ChannelStats {
                    name: name.clone(),
                    log1p: is_concentration(name),
                    mean,
                    // constant channels are only centered
                    std: if std > 1e-12 { std } else { 1.0 },
                }
            })
            .collect()
    }
}

impl FeatureStats {
    /// Identity statistics (no log, mean 0, std 1).
    pub fn identity(channels: &ChannelLayout) -> Self {
        let id = |names: &[String]| {
            names
                .iter()
                .map(|n| ChannelStats {
                    name: n.clone(),
                    log1p: false,
                    mean: 0.0,
                    std: 1.0,
                })
                .collect()
        };
        Self {
            hi_hist: id(&channels.hi_hist),
            hi_const: id(&channels.hi_const),
            lo_hist: id(&channels.lo_hist),
            lo_fcst: id(&channels.lo_fcst),
        }
    }

    pub fn fit<P: Borrow<Patch>>(channels: &ChannelLayout, patches: impl IntoIterator<Item = P>) -> Self {
        let mut acc = [
            Accumulator::new(&channels.hi_hist),
            Accumulator::new(&channels.hi_const),
            Accumulator::new(&channels.lo_hist),
            Accumulator::new(&channels.lo_fcst),
        ];
        for p in patches {
            let p = p.borrow();
            acc[0].add(&p.hi_hist);
            acc[1].add(&p.hi_const);
            acc[2].add(&p.lo_hist);
            acc[3].add(&p.lo_fcst);
        }
        let [a, b, c, d] = acc;
        Self {
            hi_hist: a.finish(),
            hi_const: b.finish(),
            lo_hist: c.finish(),
            lo_fcst: d.finish(),
        }
    }
}

fn apply(t: &Tensor<f32>, stats: &[ChannelStats], inverse: bool) -> Tensor<f32> {
    let c = stats.len();
    assert_eq!(t.channels(), c, "channel count mismatch in normalization");
    let mut out = t.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for (v, s) in px.iter_mut().zip(stats) {
            *v = if inverse { s.inverse(*v) } else { s.forward(*v) };
        }
    }
    out
}

/// Normalizes the input streams of a patch; targets and evaluation fields are
/// left in µg/m³.
pub fn normalize_features(patch: &Patch, stats: &FeatureStats) -> Patch {
    Patch {
        hi_hist: apply(&patch.hi_hist, &stats.hi_hist, false),
        hi_const: apply(&patch.hi_const, &stats.hi_const, false),
        lo_hist: apply(&patch.lo_hist, &stats.lo_hist, false),
        lo_fcst: apply(&patch.lo_fcst, &stats.lo_fcst, false),
        ..patch.clone()
    }
}

pub fn denormalize_features(patch: &Patch, stats: &FeatureStats) -> Patch {
    Patch {
        hi_hist: apply(&patch.hi_hist, &stats.hi_hist, true),
        hi_const: apply(&patch.hi_const, &stats.hi_const, true),
        lo_hist: apply(&patch.lo_hist, &stats.lo_hist, true),
        lo_fcst: apply(&patch.lo_fcst, &stats.lo_fcst, true),
        ..patch.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::geo::GeoPoint;
    use crate::time::Hour;
    use rand::{Rng, SeedableRng};

    fn patch(seed: u64) -> Patch {
        let cfg = ModelConfig::tiny();
        let ch = cfg.channels();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut t = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(0.0f32..80.0));
        Patch {
            center_station_id: "s".into(),
            center: GeoPoint { lat: 0.0, lon: 0.0 },
            t0: Hour(0),
            hi_hist: t(&[3, 8, 8, ch.hi_hist.len()]),
            hi_const: Tensor::full(&[8, 8, 2], 3.0),
            lo_hist: t(&[3, 4, 4, ch.lo_hist.len()]),
            lo_fcst: t(&[3, 4, 4, ch.lo_fcst.len()]),
            targets: vec![],
            station_truth: Tensor::zeros(&[3, 4]),
            benchmark: Tensor::zeros(&[4]),
        }
    }

    #[test]
    fn constant_channel_maps_to_zero_and_round_trips() {
        let ch = ModelConfig::tiny().channels();
        let patches: Vec<Patch> = (0..3).map(patch).collect();
        let stats = FeatureStats::fit(&ch, &patches);
        assert_eq!(stats.hi_const[0].std, 1.0);
        let n = normalize_features(&patches[0], &stats);
        assert!(n.hi_const.data().iter().all(|&v| v == 0.0));
        // single-precision storage of the normalized values bounds the patch round trip
        let back = denormalize_features(&n, &stats);
        for (a, b) in back.hi_hist.data().iter().zip(patches[0].hi_hist.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
        for (a, b) in back.lo_fcst.data().iter().zip(patches[0].lo_fcst.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
        for s in stats.hi_hist.iter().chain(&stats.lo_fcst) {
            for x in [0.0, 0.37, 12.5, 79.9, 480.0] {
                let y = s.denormalize(s.normalize(x));
                assert!((y - x).abs() <= 1e-6 * x + 1e-12, "{}: {x} -> {y}", s.name);
            }
        }
        assert!(stats.hi_hist[0].log1p && !stats.hi_hist[4].log1p);
    }

    #[test]
    fn zero_concentration_is_zero_after_log() {
        let s = ChannelStats {
            name: "NO2".into(),
            log1p: true,
            mean: 0.0,
            std: 1.0,
        };
        assert_eq!(s.forward(0.0), 0.0);
    }
}
