//! Minimal neural-network toolkit: autodiff graph, parameters, optimizer.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod train;

pub use graph::{Graph, Mat, Var};
pub use optim::{AdamW, OptimizerConfig};
pub use params::{Gradients, ParamId, ParamSet};

/// Affine map `x·w + b` with a `1×n` bias row.
pub fn linear(g: &mut Graph<'_>, x: Var, w: ParamId, b: ParamId) -> Var {
    let w = g.param(w);
    let b = g.param(b);
    let h = g.matmul(x, w);
    g.add(h, b)
}

/// Row-wise layer normalization with learned gain and bias rows.
pub fn layer_norm(g: &mut Graph<'_>, x: Var, gain: ParamId, bias: ParamId) -> Var {
    let n = g.layer_norm_rows(x, 1e-5);
    let gain = g.param(gain);
    let bias = g.param(bias);
    let h = g.mul(n, gain);
    g.add(h, bias)
}

/// Cross-entropy of a `1×C` logit row against class `label`.
pub fn cross_entropy(g: &mut Graph<'_>, logits: Var, label: usize) -> Var {
    let lsm = g.log_softmax_rows(logits);
    let p = g.pick(lsm, 0, label);
    g.scale(p, -1.0)
}
