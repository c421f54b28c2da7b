//! Layer building blocks over a bound parameter set.

use plume_tensor::{BatchStats, Graph, Initializer, Scalar, Var};
use rand::Rng;

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, gradients recorded.
    Train,
    /// Running statistics.
    Infer,
}

/// A forward pass over one graph with the model's parameters bound as nodes.
pub struct Forward<'a, S: Scalar> {
    pub graph: &'a mut Graph<S>,
    pub params: &'a [Var],
    pub store: &'a ParamStore<S>,
    pub mode: Mode,
    /// Batch statistics per running-stats slot, filled in train mode.
    pub batch_stats: Vec<Option<BatchStats<S>>>,
}

impl<'a, S: Scalar> Forward<'a, S> {
    pub fn new(graph: &'a mut Graph<S>, params: &'a [Var], store: &'a ParamStore<S>, mode: Mode) -> Self {
        Self {
            graph,
            params,
            store,
            mode,
            batch_stats: vec![None; store.running.len()],
        }
    }

    pub fn param(&self, idx: usize) -> Var {
        self.params[idx]
    }

    /// Applies a per-frame layer to a `(T, B, H, W, C)` sequence.
    pub fn time_distributed(&mut self, seq: Var, f: impl FnOnce(&mut Self, Var) -> Result<Var>) -> Result<Var> {
        let shape = self.graph.shape(seq).to_vec();
        let [t, b, h, w, c] = shape[..] else {
            return Err(Error::InvalidShape(format!("expected (T,B,H,W,C), got {shape:?}")));
        };
        let flat = self.graph.reshape(seq, &[t * b, h, w, c])?;
        let out = f(self, flat)?;
        let os = self.graph.shape(out).to_vec();
        Ok(self.graph.reshape(out, &[t, b, os[1], os[2], os[3]])?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub kernel: usize,
    pub bias: usize,
}

impl Conv {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        bias_init: f64,
        rng: &mut R,
    ) -> Self {
        Self::with_init(store, name, k, cin, cout, Initializer::FanIn(k * k * cin), bias_init, rng)
    }

    pub fn with_init<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        kernel_init: Initializer,
        bias_init: f64,
        rng: &mut R,
    ) -> Self {
        let kernel = store.add(format!("{name}/kernel"), &[k, k, cin, cout], kernel_init, rng);
        let bias = store.add(format!("{name}/bias"), &[cout], Initializer::Constant(bias_init), rng);
        Self { kernel, bias }
    }

    pub fn apply<S: Scalar>(&self, fw: &mut Forward<'_, S>, x: Var) -> Result<Var> {
        let (k, b) = (fw.param(self.kernel), fw.param(self.bias));
        Ok(fw.graph.conv2d(x, k, Some(b))?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gamma: usize,
    pub beta: usize,
    pub stats: usize,
}

impl Norm {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, name: &str, channels: usize, rng: &mut R) -> Self {
        let gamma = store.add(format!("{name}/gamma"), &[channels], Initializer::Constant(1.0), rng);
        let beta = store.add(format!("{name}/beta"), &[channels], Initializer::Zeros, rng);
        let stats = store.add_running(name.to_string(), channels);
        Self { gamma, beta, stats }
    }

    pub fn apply<S: Scalar>(&self, fw: &mut Forward<'_, S>, x: Var) -> Result<Var> {
        let (g, b) = (fw.param(self.gamma), fw.param(self.beta));
        match fw.mode {
            Mode::Train => {
                let (y, stats) = fw.graph.batch_norm_train(x, g, b)?;
                fw.batch_stats[self.stats] = Some(stats);
                Ok(y)
            }
            Mode::Infer => {
                let rs = &fw.store.running[self.stats];
                Ok(fw.graph.batch_norm_infer(x, g, b, &rs.mean, &rs.var)?)
            }
        }
    }
}

/// ConvLSTM layer without peepholes; gate order `[i | f | g | o]`.
#[derive(Debug, Clone, Copy)]
pub struct ConvLstm {
    pub w_input: usize,
    pub w_state: usize,
    pub bias: usize,
    pub filters: usize,
}

impl ConvLstm {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        k: usize,
        cin: usize,
        filters: usize,
        rng: &mut R,
    ) -> Self {
        let w_input = store.add(
            format!("{name}/input_kernel"),
            &[k, k, cin, 4 * filters],
            Initializer::FanIn(k * k * cin),
            rng,
        );
        let w_state = store.add(
            format!("{name}/state_kernel"),
            &[k, k, filters, 4 * filters],
            Initializer::FanIn(k * k * filters),
            rng,
        );
        // forget gate biased open
        let bias_vals: Vec<S> = (0..4 * filters)
            .map(|i| if (filters..2 * filters).contains(&i) { S::one() } else { S::zero() })
            .collect();
        let bias = store.add_tensor(
            format!("{name}/bias"),
            plume_tensor::Tensor::from_vec(&[4 * filters], bias_vals).expect("bias shape"),
        );
        Self {
            w_input,
            w_state,
            bias,
            filters,
        }
    }

    /// Scans a `(T, B, H, W, C)` sequence from the zero state. Returns every
    /// hidden state stacked as `(T, B, H, W, F)` when `full_sequence`, else
    /// only the last one as `(B, H, W, F)`.
    pub fn scan<S: Scalar>(&self, fw: &mut Forward<'_, S>, seq: Var, full_sequence: bool) -> Result<Var> {
        let shape = fw.graph.shape(seq).to_vec();
        let [t, b, h, w, c] = shape[..] else {
            return Err(Error::InvalidShape(format!("ConvLSTM expects (T,B,H,W,C), got {shape:?}")));
        };
        let flat = fw.graph.reshape(seq, &[t * b, h, w, c])?;
        let (wi, ws, bias) = (fw.param(self.w_input), fw.param(self.w_state), fw.param(self.bias));
        let projected = fw.graph.conv2d(flat, wi, Some(bias))?;
        let mut state: Option<(Var, Var)> = None;
        let mut hidden = Vec::with_capacity(if full_sequence { t } else { 1 });
        for step in 0..t {
            let zx = fw.graph.slice(projected, 0, step * b, b)?;
            let (hn, cn) = fw.graph.convlstm_step_projected(zx, state, ws)?;
            state = Some((hn, cn));
            if full_sequence {
                hidden.push(hn);
            }
        }
        let (last, _) = state.expect("t >= 1");
        if !full_sequence {
            return Ok(last);
        }
        let stacked = fw.graph.concat(&hidden, 0)?;
        Ok(fw.graph.reshape(stacked, &[t, b, h, w, self.filters])?)
    }
}
