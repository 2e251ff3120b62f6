//! Shared mini-batch loop: shuffle, per-sample gradients in parallel,
//! ordered reduction, AdamW step on a cosine-annealed learning rate.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::optim::{AdamW, OptimizerConfig};
use super::params::{Gradients, ParamSet};
use crate::error::{GazeError, Result};
use crate::par;
use crate::rng::{stream_id, stream_rng};

/// Stream offset separating shuffle streams from per-sample streams.
const SHUFFLE_STREAM: u64 = 0xFFFF_FFFF;

pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Runs `cfg.epochs` epochs over the training indices `0..n_train`.
///
/// `sample_grad(params, index, rng)` returns the loss and gradient for one
/// training item; `rng` is a stream private to `(epoch, index)`. After each
/// epoch `on_epoch` is called with the updated parameters.
pub fn run<F, E>(
    stage: &str,
    params: &mut ParamSet,
    cfg: &OptimizerConfig,
    n_train: usize,
    seed: u64,
    sample_grad: F,
    mut on_epoch: E,
) -> Result<()>
where
    F: Fn(&ParamSet, usize, &mut ChaCha8Rng) -> Result<(f64, Gradients)> + Sync + Send,
    E: FnMut(&EpochStats, &ParamSet) -> Result<()>,
{
    cfg.validate().map_err(GazeError::Config)?;
    if n_train == 0 {
        return Err(GazeError::Config(format!("{stage}: empty training set")));
    }
    let mut opt = AdamW::new(cfg.clone(), params);
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = stream_rng(seed, stream_id(SHUFFLE_STREAM, epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let lr = cfg.lr_at_epoch(epoch);
        let mut total = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let snapshot: &ParamSet = params;
            let results = par::try_map_indexed(batch.len(), |k| {
                let idx = batch[k];
                let mut rng = stream_rng(seed, stream_id(epoch as u64 + 1, idx as u64));
                sample_grad(snapshot, idx, &mut rng)
            })?;
            let mut grads = Gradients::zeros_like(params);
            for (loss, g) in &results {
                if !loss.is_finite() {
                    return Err(GazeError::numeric(
                        stage,
                        epoch,
                        format!("non-finite loss {loss} at step {step}"),
                    ));
                }
                total += loss;
                grads.add_assign(g);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.all_finite() {
                return Err(GazeError::numeric(
                    stage,
                    epoch,
                    format!("non-finite gradient at step {step}"),
                ));
            }
            opt.step(params, &grads, lr);
        }
        let stats = EpochStats {
            epoch,
            mean_loss: total / n_train as f64,
            lr,
        };
        log::debug!("{stage} epoch {epoch}: loss {:.5} lr {:.2e}", stats.mean_loss, lr);
        on_epoch(&stats, params)?;
    }
    Ok(())
}
