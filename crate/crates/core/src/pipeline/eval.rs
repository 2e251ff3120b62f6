use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::anchors::{AnchorSelector, Cell, RegionPartition};
use crate::corrnet::{argmax, CorrNet};
use crate::error::{GazeError, Result};
use crate::geom::continuous::ContinuousHead;
use crate::geom::{accuracy, mae, ScreenGeometry};
use crate::par;
use crate::tokenizer::TokenizedState;

/// How an incoming state is paired with an anchor.
#[derive(Clone, Debug)]
pub enum Router {
    /// Learned anchor selection, as at inference time.
    Selector(AnchorSelector),
    /// Ground-truth primary region; needs the true cell.
    Oracle(RegionPartition),
    /// Always the same anchor.
    Fixed(usize),
}

impl Router {
    pub fn route(&self, state: &TokenizedState, truth: Option<Cell>) -> Result<usize> {
        match self {
            Router::Selector(s) => s.select(state),
            Router::Oracle(p) => truth
                .map(|c| p.primary_region(c))
                .ok_or_else(|| GazeError::Validation("oracle routing needs the true cell".into())),
            Router::Fixed(r) => Ok(*r),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub region: usize,
    pub cell: [usize; 2],
    pub logits: Vec<f64>,
    /// Centre of the predicted cell on the screen.
    pub screen_px: [f64; 2],
    pub direction: [f64; 3],
    /// Continuous-head output in normalised screen coordinates.
    pub coords: Option<[f64; 2]>,
    pub coords_px: Option<[f64; 2]>,
}

/// A full-grid network plus the anchors and router it needs at inference.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub net: CorrNet,
    pub router: Router,
    pub anchors: Vec<TokenizedState>,
    pub grid: usize,
    pub screen: ScreenGeometry,
    pub head: Option<ContinuousHead>,
}

impl Predictor {
    pub fn new(net: CorrNet, router: Router, anchors: Vec<TokenizedState>, grid: usize, screen: ScreenGeometry) -> Result<Self> {
        if net.classes() != grid * grid {
            return Err(GazeError::Config(format!(
                "network has {} classes, a {grid}x{grid} grid needs {}",
                net.classes(),
                grid * grid
            )));
        }
        if anchors.is_empty() {
            return Err(GazeError::Config("predictor needs at least one anchor".into()));
        }
        Ok(Self {
            net,
            router,
            anchors,
            grid,
            screen,
            head: None,
        })
    }

    pub fn with_head(mut self, head: ContinuousHead) -> Self {
        self.head = Some(head);
        self
    }

    pub fn predict(&self, state: &TokenizedState, truth: Option<Cell>) -> Result<Prediction> {
        let region = self.router.route(state, truth)?;
        let anchor = self.anchors.get(region).ok_or_else(|| {
            GazeError::Validation(format!("router chose region {region}, {} anchors", self.anchors.len()))
        })?;
        let out = self.net.forward(anchor, state)?;
        let class = argmax(&out.logits);
        let (row, col) = (class / self.grid, class % self.grid);
        let screen_px = self.screen.cell_center(self.grid, row, col);
        let (coords, coords_px) = match &self.head {
            Some(h) => {
                let c = h.predict_from_latent(&out.latent);
                let clamped = [c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0)];
                let px = [
                    clamped[0] * f64::from(self.screen.w_px),
                    clamped[1] * f64::from(self.screen.h_px),
                ];
                (Some(c), Some(px))
            }
            None => (None, None),
        };
        Ok(Prediction {
            region,
            cell: [row, col],
            logits: out.logits,
            screen_px,
            direction: self.screen.cell_direction(self.grid, row, col),
            coords,
            coords_px,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub region: usize,
    pub n_samples: usize,
    pub mae_deg: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousReport {
    pub mae_deg: f64,
    pub mean_pixel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae_deg: f64,
    pub accuracy: f64,
    pub accuracy_definition: String,
    pub n_samples: usize,
    /// Fraction of samples routed to their ground-truth primary region.
    pub routing_accuracy: f64,
    pub per_region: Vec<RegionReport>,
    pub continuous: Option<ContinuousReport>,
}

/// Scores `predictor` on the samples `indices` of `ds`; the per-region
/// breakdown groups samples by their ground-truth primary region.
pub fn evaluate(predictor: &Predictor, ds: &Dataset, indices: &[usize], partition: &RegionPartition) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(GazeError::Validation("no samples to evaluate".into()));
    }
    let preds = par::try_map_indexed(indices.len(), |k| {
        let i = indices[k];
        predictor.predict(&ds.states[i], Some(ds.cell(i)))
    })?;
    let truth_cells: Vec<[usize; 2]> = indices.iter().map(|&i| [ds.labels[i].row, ds.labels[i].col]).collect();
    let truth_dirs: Vec<[f64; 3]> = indices.iter().map(|&i| ds.labels[i].direction).collect();
    let pred_cells: Vec<[usize; 2]> = preds.iter().map(|p| p.cell).collect();
    let pred_dirs: Vec<[f64; 3]> = preds.iter().map(|p| p.direction).collect();
    let regions: Vec<usize> = indices.iter().map(|&i| partition.primary_region(ds.cell(i))).collect();
    let routed: Vec<usize> = preds.iter().map(|p| p.region).collect();
    let routing_accuracy = if partition.len() == predictor.anchors.len() {
        accuracy(&routed, &regions)?
    } else {
        f64::NAN
    };

    let mut per_region = Vec::new();
    for r in 0..partition.len() {
        let ks: Vec<usize> = (0..indices.len()).filter(|&k| regions[k] == r).collect();
        if ks.is_empty() {
            continue;
        }
        let pick = |v: &[[f64; 3]]| ks.iter().map(|&k| v[k]).collect::<Vec<_>>();
        let pc: Vec<_> = ks.iter().map(|&k| pred_cells[k]).collect();
        let tc: Vec<_> = ks.iter().map(|&k| truth_cells[k]).collect();
        per_region.push(RegionReport {
            region: r,
            n_samples: ks.len(),
            mae_deg: mae(&pick(&pred_dirs), &pick(&truth_dirs))?,
            accuracy: accuracy(&pc, &tc)?,
        });
    }

    let continuous = if predictor.head.is_some() {
        let mut dirs = Vec::with_capacity(preds.len());
        let mut err = 0.0;
        for (p, &i) in preds.iter().zip(indices) {
            let px = p.coords_px.expect("head present");
            let t = ds.labels[i].screen_px;
            err += ((px[0] - t[0]).powi(2) + (px[1] - t[1]).powi(2)).sqrt();
            dirs.push(predictor.screen.screen_to_gaze_vector(px)?);
        }
        Some(ContinuousReport {
            mae_deg: mae(&dirs, &truth_dirs)?,
            mean_pixel_error: err / preds.len() as f64,
        })
    } else {
        None
    };

    Ok(EvalReport {
        mae_deg: mae(&pred_dirs, &truth_dirs)?,
        accuracy: accuracy(&pred_cells, &truth_cells)?,
        accuracy_definition: "exact grid-cell match".into(),
        n_samples: indices.len(),
        routing_accuracy,
        per_region,
        continuous,
    })
}
