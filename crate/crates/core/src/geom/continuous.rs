//! Continuous screen-coordinate regression on top of a trained student.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, CheckpointWriter};
use crate::corrnet::{copy_params_by_name, CorrNet};
use crate::error::{GazeError, Result};
use crate::nn::{self, Graph, Mat, OptimizerConfig, ParamId, ParamSet, Var};
use crate::par;
use crate::rng::stream_rng;
use crate::tokenizer::TokenizedState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct HeadIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Two fully connected layers from the mean-pooled latent to `(x, y)` in
/// normalised screen coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousHead {
    pub dim: usize,
    pub hidden: usize,
    pub params: ParamSet,
    ids: HeadIds,
}

impl ContinuousHead {
    pub fn new(dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let ids = Self::register(&mut params, dim, hidden, seed)?;
        Ok(Self {
            dim,
            hidden,
            params,
            ids,
        })
    }

    fn register(ps: &mut ParamSet, dim: usize, hidden: usize, seed: u64) -> Result<HeadIds> {
        if dim == 0 || hidden == 0 {
            return Err(GazeError::Config("continuous head sizes must be positive".into()));
        }
        let mut rng = stream_rng(seed, 0x636f_6e74);
        Ok(HeadIds {
            w1: ps.add_linear("chead.w1", dim, hidden, &mut rng),
            b1: ps.add_zeros("chead.b1", 1, hidden),
            w2: ps.add_linear("chead.w2", hidden, 2, &mut rng),
            b2: ps.add_zeros("chead.b2", 1, 2),
        })
    }

    /// `1 × 2` prediction from an `L × d` latent.
    pub fn forward_graph(&self, g: &mut Graph<'_>, latent: Var) -> Var {
        let pooled = g.mean_rows(latent);
        let h = nn::linear(g, pooled, self.ids.w1, self.ids.b1);
        let h = g.gelu(h);
        nn::linear(g, h, self.ids.w2, self.ids.b2)
    }

    pub fn predict_from_latent(&self, latent: &Mat) -> [f64; 2] {
        let mut g = Graph::new(&self.params);
        let x = g.constant(latent.clone());
        let y = self.forward_graph(&mut g, x);
        let v = g.value(y);
        [v[[0, 0]], v[[0, 1]]]
    }

    pub fn save(&self, path: &Path, seed: u64, epoch: usize) -> Result<()> {
        CheckpointWriter {
            kind: "continuous-head",
            seed,
            epoch,
            config: serde_json::json!({ "dim": self.dim, "hidden": self.hidden }),
            extra: serde_json::Value::Null,
        }
        .write_params(path, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        ck.expect_kind("continuous-head")?;
        let c = &ck.header.config;
        let get = |k: &str| {
            c[k].as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| GazeError::Validation(format!("continuous head config lacks {k}")))
        };
        let mut head = Self::new(get("dim")?, get("hidden")?, ck.header.seed)?;
        copy_params_by_name(&mut head.params, &ck.to_params())?;
        Ok(head)
    }
}

/// `‖P̂ − P‖²` over the two coordinates.
pub fn coordinate_loss(pred: [f64; 2], truth: [f64; 2]) -> f64 {
    (pred[0] - truth[0]).powi(2) + (pred[1] - truth[1]).powi(2)
}

pub fn coordinate_loss_graph(g: &mut Graph<'_>, pred: Var, truth: [f64; 2]) -> Var {
    let t = g.constant(Mat::from_shape_vec((1, 2), truth.to_vec()).expect("shape"));
    let d = g.sub(pred, t);
    let sq = g.square(d);
    g.sum_all(sq)
}

/// One regression example: current state, the anchor paired with it and
/// the normalised target.
#[derive(Clone, Copy, Debug)]
pub struct CoordExample<'a> {
    pub anchor: &'a TokenizedState,
    pub state: &'a TokenizedState,
    pub target: [f64; 2],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContinuousLog {
    pub epochs: Vec<ContinuousEpoch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Fits the head with the student frozen, or jointly when `unfreeze` is set.
pub fn finetune_continuous(
    student: &mut CorrNet,
    head: &mut ContinuousHead,
    examples: &[CoordExample<'_>],
    opt: &OptimizerConfig,
    unfreeze: bool,
    seed: u64,
) -> Result<ContinuousLog> {
    if head.dim != student.config.tokenizer.dim {
        return Err(GazeError::Config(format!(
            "head expects dim {}, student has {}",
            head.dim, student.config.tokenizer.dim
        )));
    }
    let mut log = ContinuousLog::default();
    let mut on_epoch = |stats: &nn::train::EpochStats, _: &ParamSet| {
        log::info!("continuous epoch {}: loss {:.5}", stats.epoch, stats.mean_loss);
        log.epochs.push(ContinuousEpoch {
            epoch: stats.epoch,
            lr: stats.lr,
            loss: stats.mean_loss,
        });
        Ok(())
    };
    if !unfreeze {
        let latents = par::try_map_indexed(examples.len(), |k| {
            student.forward(examples[k].anchor, examples[k].state).map(|o| o.latent)
        })?;
        let model = head.clone();
        let mut params = std::mem::take(&mut head.params);
        let r = nn::train::run(
            "continuous",
            &mut params,
            opt,
            examples.len(),
            seed,
            |ps, idx, _| {
                let mut g = Graph::new(ps);
                let x = g.constant(latents[idx].clone());
                let y = model.forward_graph(&mut g, x);
                let l = coordinate_loss_graph(&mut g, y, examples[idx].target);
                Ok((g.scalar(l), g.backward(l)))
            },
            &mut on_epoch,
        );
        head.params = params;
        r?;
    } else {
        let mut merged = student.params.clone();
        let ids = ContinuousHead::register(&mut merged, head.dim, head.hidden, seed)?;
        let joint_head = ContinuousHead {
            dim: head.dim,
            hidden: head.hidden,
            params: ParamSet::new(),
            ids,
        };
        copy_params_by_name(&mut merged, &{
            let mut both = student.params.clone();
            for (n, m) in head.params.iter() {
                both.add(n, m.clone());
            }
            both
        })?;
        let model = student.clone();
        nn::train::run(
            "continuous",
            &mut merged,
            opt,
            examples.len(),
            seed,
            |ps, idx, rng| {
                let ex = examples[idx];
                let mut g = Graph::new(ps);
                let f = model.forward_graph(&mut g, ex.anchor, ex.state, Some(rng))?;
                let y = joint_head.forward_graph(&mut g, f.latent);
                let l = coordinate_loss_graph(&mut g, y, ex.target);
                Ok((g.scalar(l), g.backward(l)))
            },
            &mut on_epoch,
        )?;
        copy_params_by_name(&mut student.params, &merged)?;
        copy_params_by_name(&mut head.params, &merged)?;
    }
    Ok(log)
}
