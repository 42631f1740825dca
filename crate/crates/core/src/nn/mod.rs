//! Minimal differentiable kernels with reverse-mode gradients, in `f64`.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use gradcheck::{all_coords, grad_check, rel_err, GradCheckReport};
pub use graph::{BnMode, BnStats, Gradients, Graph, KernelError, Var, BN_EPS};
pub use params::{normal, xavier_uniform, Param, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;

/// Parameters of one LSTM direction.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

impl LstmParams {
    pub fn register<R: rand::Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let w_ih = store.add(
            format!("{prefix}.w_ih"),
            ParamKind::Trainable,
            xavier_uniform(rng, &[4 * hidden, input], input, 4 * hidden),
        );
        let w_hh = store.add(
            format!("{prefix}.w_hh"),
            ParamKind::Trainable,
            xavier_uniform(rng, &[4 * hidden, hidden], hidden, 4 * hidden),
        );
        let bias = store.add(format!("{prefix}.bias"), ParamKind::Trainable, Tensor::zeros(&[4 * hidden]));
        LstmParams { w_ih, w_hh, bias }
    }

    fn run(&self, g: &mut Graph, store: &ParamStore, x: Var, reverse: bool) -> Result<Var, KernelError> {
        let w_ih = g.param(store, self.w_ih);
        let w_hh = g.param(store, self.w_hh);
        let bias = g.param(store, self.bias);
        g.lstm(x, w_ih, w_hh, bias, reverse)
    }
}

/// Forward and backward LSTM over `x: [L, E]`, concatenated to `[L, 2H]`.
pub fn bilstm(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    forward: &LstmParams,
    backward: &LstmParams,
) -> Result<Var, KernelError> {
    let f = forward.run(g, store, x, false)?;
    let b = backward.run(g, store, x, true)?;
    g.concat(&[f, b], 1)
}

/// A 3×3 convolution followed by batch normalization and ReLU.
#[derive(Debug, Clone, Copy)]
pub struct ConvBnRelu {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Momentum of the running batch-norm estimates.
pub const BN_MOMENTUM: f64 = 0.1;

impl ConvBnRelu {
    pub fn register<R: rand::Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, cin: usize, cout: usize) -> Self {
        let weight = store.add(
            format!("{prefix}.weight"),
            ParamKind::Trainable,
            xavier_uniform(rng, &[cout, cin, 3, 3], cin * 9, cout * 9),
        );
        let bias = store.add(format!("{prefix}.bias"), ParamKind::Trainable, Tensor::zeros(&[cout]));
        let gamma = store.add(format!("{prefix}.bn.gamma"), ParamKind::Trainable, Tensor::full(&[cout], 1.0));
        let beta = store.add(format!("{prefix}.bn.beta"), ParamKind::Trainable, Tensor::zeros(&[cout]));
        let running_mean = store.add(format!("{prefix}.bn.running_mean"), ParamKind::Buffer, Tensor::zeros(&[cout]));
        let running_var = store.add(format!("{prefix}.bn.running_var"), ParamKind::Buffer, Tensor::full(&[cout], 1.0));
        ConvBnRelu { weight, bias, gamma, beta, running_mean, running_var }
    }

    /// Applies the block. In training mode the batch statistics are pushed to
    /// `updates` for a later [`apply_bn_updates`].
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        training: bool,
        updates: &mut Vec<(ConvBnRelu, BnStats)>,
    ) -> Result<Var, KernelError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let conv = g.conv3x3(x, w, b)?;
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let mode = if training {
            BnMode::Train
        } else {
            BnMode::Eval { mean: store.value(self.running_mean).data(), var: store.value(self.running_var).data() }
        };
        let (bn, stats) = g.batch_norm(conv, gamma, beta, mode)?;
        if let Some(stats) = stats {
            updates.push((*self, stats));
        }
        Ok(g.relu(bn))
    }
}

/// Folds batch statistics into the running estimates.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[(ConvBnRelu, BnStats)]) {
    for (block, stats) in updates {
        for (r, m) in store.value_mut(block.running_mean).data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in store.value_mut(block.running_var).data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}
