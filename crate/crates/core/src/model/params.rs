use plume_tensor::{BatchStats, Initializer, Scalar, Tensor};
use rand::Rng;

/// Momentum of the batch-norm running averages.
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<S> {
    pub name: String,
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> RunningStats<S> {
    pub fn new(name: String, channels: usize) -> Self {
        Self {
            name,
            mean: vec![S::zero(); channels],
            var: vec![S::one(); channels],
        }
    }

    pub fn update(&mut self, batch: &BatchStats<S>) {
        let m = S::lit(BN_MOMENTUM);
        let om = S::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = m * *r + om * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = m * *r + om * b;
        }
    }
}

/// Named trainable tensors plus non-trainable batch-norm state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S> {
    pub params: Vec<Param<S>>,
    pub running: Vec<RunningStats<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn add<R: Rng + ?Sized>(&mut self, name: String, shape: &[usize], init: Initializer, rng: &mut R) -> usize {
        self.params.push(Param {
            name,
            value: init.build(shape, rng),
        });
        self.params.len() - 1
    }

    pub fn add_tensor(&mut self, name: String, value: Tensor<S>) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    pub fn add_running(&mut self, name: String, channels: usize) -> usize {
        self.running.push(RunningStats::new(name, channels));
        self.running.len() - 1
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }
}
