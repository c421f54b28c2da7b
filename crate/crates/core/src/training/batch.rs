use plume_tensor::Tensor;

use crate::error::{Error, Result};
use crate::features::{normalize_features, FeatureStats, Patch};
use crate::model::UnetInputs;

/// Interleaves per-sample `(T, ...)` arrays into a time-major `(T, B, ...)` array.
pub fn stack_time_major(items: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidShape("cannot stack an empty batch".into()))?;
    let shape = first.shape();
    if items.iter().any(|t| t.shape() != shape) {
        return Err(Error::InvalidShape("batch members differ in shape".into()));
    }
    let t = shape[0];
    let per = first.numel() / t;
    let b = items.len();
    let mut data = Vec::with_capacity(first.numel() * b);
    for step in 0..t {
        for item in items {
            data.extend_from_slice(&item.data()[step * per..(step + 1) * per]);
        }
    }
    let mut out_shape = vec![t, b];
    out_shape.extend_from_slice(&shape[1..]);
    Ok(Tensor::from_vec(&out_shape, data)?)
}

/// Stacks per-sample arrays along a new leading axis.
pub fn stack_batch(items: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidShape("cannot stack an empty batch".into()))?;
    if items.iter().any(|t| t.shape() != first.shape()) {
        return Err(Error::InvalidShape("batch members differ in shape".into()));
    }
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for item in items {
        data.extend_from_slice(item.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Ok(Tensor::from_vec(&shape, data)?)
}

/// Normalized model inputs plus flattened `(N_out*B, H, W, 4)` targets.
pub struct Batch {
    pub inputs: UnetInputs<f32>,
    pub targets: Vec<Tensor<f32>>,
}

pub fn make_batch(patches: &[Patch], stats: &FeatureStats) -> Result<Batch> {
    let norm: Vec<Patch> = patches.iter().map(|p| normalize_features(p, stats)).collect();
    let refs = |f: fn(&Patch) -> &Tensor<f32>| norm.iter().map(f).collect::<Vec<_>>();
    let inputs = UnetInputs {
        hi_hist: stack_time_major(&refs(|p| &p.hi_hist))?,
        hi_const: stack_batch(&refs(|p| &p.hi_const))?,
        lo_hist: stack_time_major(&refs(|p| &p.lo_hist))?,
        lo_fcst: stack_time_major(&refs(|p| &p.lo_fcst))?,
    };
    let n_grids = patches[0].targets.len();
    let targets = (0..n_grids)
        .map(|g| {
            let items: Vec<&Tensor<f32>> = patches.iter().map(|p| &p.targets[g]).collect();
            let s = stack_time_major(&items)?;
            let sh = s.shape().to_vec();
            let mut flat = vec![sh[0] * sh[1]];
            flat.extend_from_slice(&sh[2..]);
            Ok(s.reshape(&flat)?)
        })
        .collect::<Result<_>>()?;
    Ok(Batch { inputs, targets })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_major_interleaves_samples() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let s = stack_time_major(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
    }
}
