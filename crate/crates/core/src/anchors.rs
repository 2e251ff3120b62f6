//! Gaze-grid partitioning, anchor registration and the anchor selector.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, CheckpointWriter};
use crate::corrnet::{argmax, EpochRecord, TrainingLog};
use crate::data::GazeLabel;
use crate::error::{GazeError, Result};
use crate::nn::{self, Graph, Mat, OptimizerConfig, ParamId, ParamSet};
use crate::rng::stream_rng;
use crate::tokenizer::{TokenizedState, TokenizerConfig, VOXEL_DESCRIPTOR};

pub type Cell = (usize, usize);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    /// Cells in row-major order; an expert's class `k` is `cells[k]`.
    pub cells: Vec<Cell>,
    pub anchor: Cell,
}

impl Region {
    fn rect(rows: (usize, usize), cols: (usize, usize), anchor: Cell) -> Self {
        let cells = (rows.0..=rows.1)
            .flat_map(|r| (cols.0..=cols.1).map(move |c| (r, c)))
            .collect();
        Self { cells, anchor }
    }

    pub fn contains(&self, cell: Cell) -> bool {
        self.local_index(cell).is_some()
    }

    pub fn local_index(&self, cell: Cell) -> Option<usize> {
        self.cells.iter().position(|&c| c == cell)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionPartition {
    pub grid: usize,
    pub regions: Vec<Region>,
    /// Routing region of every cell, indexed `row * grid + col`.
    pub primary: Vec<usize>,
}

/// Band `b` of `nb` over indices `0..grid`; neighbouring bands share their
/// boundary index when the split is not exact.
fn band(grid: usize, nb: usize, b: usize) -> (usize, usize) {
    let last = (grid - 1) as f64;
    let start = (b as f64 * last / nb as f64).round() as usize;
    let end = ((b + 1) as f64 * last / nb as f64).round() as usize;
    (start, end)
}

/// Midpoint of a band; half-integer midpoints round away from the grid centre.
fn band_anchor(grid: usize, (s, e): (usize, usize)) -> usize {
    let twice = s + e;
    if twice % 2 == 0 {
        return twice / 2;
    }
    let lo = twice / 2;
    if 2 * lo < grid - 1 {
        lo
    } else {
        lo + 1
    }
}

pub fn partition_grid(grid: usize, n: usize) -> Result<RegionPartition> {
    if grid < 3 {
        return Err(GazeError::Config(format!("grid size {grid} is below 3")));
    }
    let (nr, nc, centre) = match n {
        1 => (1, 1, false),
        2 => (1, 2, false),
        3 => (1, 3, false),
        4 => (2, 2, false),
        5 => (2, 2, true),
        6 => (2, 3, false),
        7 => (2, 3, true),
        8 => (2, 4, false),
        9 => (3, 3, false),
        _ => {
            return Err(GazeError::Config(format!(
                "unsupported anchor count {n}; expected 1..=9"
            )))
        }
    };
    let mut regions = Vec::with_capacity(n);
    for br in 0..nr {
        let rows = band(grid, nr, br);
        for bc in 0..nc {
            let cols = band(grid, nc, bc);
            let anchor = (band_anchor(grid, rows), band_anchor(grid, cols));
            regions.push(Region::rect(rows, cols, anchor));
        }
    }
    if centre {
        let c = (grid - 1) / 2;
        let h = (grid - 1) / 4;
        regions.push(Region::rect((c - h, c + h), (c - h, c + h), (c, c)));
    }
    let primary: Vec<usize> = (0..grid * grid)
        .map(|i| nearest_anchor(&regions, (i / grid, i % grid)))
        .collect();
    // A region also owns every cell routed to it.
    for (i, &k) in primary.iter().enumerate() {
        let cell = (i / grid, i % grid);
        if !regions[k].contains(cell) {
            regions[k].cells.push(cell);
            regions[k].cells.sort_unstable();
        }
    }
    Ok(RegionPartition {
        grid,
        regions,
        primary,
    })
}

fn nearest_anchor(regions: &[Region], (r, c): Cell) -> usize {
    let d2 = |a: Cell| {
        let dr = a.0 as i64 - r as i64;
        let dc = a.1 as i64 - c as i64;
        dr * dr + dc * dc
    };
    let mut best = 0;
    for (k, reg) in regions.iter().enumerate() {
        if d2(reg.anchor) < d2(regions[best].anchor) {
            best = k;
        }
    }
    best
}

impl RegionPartition {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn primary_region(&self, cell: Cell) -> usize {
        self.primary[cell.0 * self.grid + cell.1]
    }

    pub fn num_cells(&self) -> usize {
        self.grid * self.grid
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorEntry {
    pub label: GazeLabel,
    pub state: TokenizedState,
}

/// One registered anchor state per region.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorRegistry {
    pub partition: RegionPartition,
    entries: Vec<Option<AnchorEntry>>,
}

impl AnchorRegistry {
    pub fn new(partition: RegionPartition) -> Self {
        let n = partition.len();
        Self {
            partition,
            entries: vec![None; n],
        }
    }

    /// Registers (or replaces) the anchor of `region`.
    pub fn register(&mut self, region: usize, label: GazeLabel, state: TokenizedState) -> Result<()> {
        let reg = self.partition.regions.get(region).ok_or_else(|| {
            GazeError::Validation(format!(
                "region {region} out of range ({} regions)",
                self.partition.len()
            ))
        })?;
        if (label.row, label.col) != reg.anchor {
            return Err(GazeError::Validation(format!(
                "sample cell ({}, {}) is not region {region}'s anchor cell {:?}",
                label.row, label.col, reg.anchor
            )));
        }
        self.entries[region] = Some(AnchorEntry { label, state });
        Ok(())
    }

    pub fn get(&self, region: usize) -> Option<&AnchorEntry> {
        self.entries.get(region).and_then(|e| e.as_ref())
    }

    pub fn state(&self, region: usize) -> Result<&TokenizedState> {
        self.get(region)
            .map(|e| &e.state)
            .ok_or_else(|| GazeError::Validation(format!("region {region} has no anchor")))
    }

    pub fn is_complete(&self) -> bool {
        self.entries.iter().all(Option::is_some)
    }

    /// All anchor states in region order; fails if any region is empty.
    pub fn states(&self) -> Result<Vec<TokenizedState>> {
        (0..self.partition.len()).map(|r| self.state(r).cloned()).collect()
    }

    /// Registers, for each region, the first sample (in the given order)
    /// whose label is the region's anchor cell.
    pub fn from_samples<'a>(
        partition: RegionPartition,
        samples: impl IntoIterator<Item = (&'a GazeLabel, &'a TokenizedState)>,
    ) -> Result<Self> {
        let mut reg = Self::new(partition);
        for (label, state) in samples {
            for r in 0..reg.partition.len() {
                if reg.entries[r].is_none() && reg.partition.regions[r].anchor == (label.row, label.col) {
                    reg.register(r, label.clone(), state.clone())?;
                }
            }
        }
        if let Some(missing) = (0..reg.partition.len()).find(|&r| reg.entries[r].is_none()) {
            return Err(GazeError::Validation(format!(
                "no sample at anchor cell {:?} for region {missing}",
                reg.partition.regions[missing].anchor
            )));
        }
        Ok(reg)
    }

    /// Writes `path` (JSON header with the region layout and anchor labels)
    /// and its tensor blob.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut names = Vec::new();
        let mut mats: Vec<&Mat> = Vec::new();
        let mut meta = Vec::new();
        for r in 0..self.partition.len() {
            let e = self.get(r).ok_or_else(|| {
                GazeError::Validation(format!("region {r} has no anchor to save"))
            })?;
            names.push(format!("anchor{r}.patches"));
            mats.push(&e.state.patches);
            names.push(format!("anchor{r}.points"));
            mats.push(&e.state.points);
            names.push(format!("anchor{r}.descriptors"));
            mats.push(&e.state.descriptors);
            meta.push(serde_json::json!({ "label": e.label, "bounds": e.state.bounds }));
        }
        let tensors: Vec<(&str, &Mat)> = names.iter().map(String::as_str).zip(mats).collect();
        CheckpointWriter {
            kind: "anchor-registry",
            seed: 0,
            epoch: 0,
            config: serde_json::to_value(&self.partition).expect("partition serializes"),
            extra: serde_json::Value::Array(meta),
        }
        .write(path, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        ck.expect_kind("anchor-registry")?;
        let partition: RegionPartition = ck.config()?;
        let meta = ck
            .header
            .extra
            .as_array()
            .ok_or_else(|| GazeError::Validation("registry metadata missing".into()))?;
        let mut reg = Self::new(partition);
        for r in 0..reg.partition.len() {
            let m = meta
                .get(r)
                .ok_or_else(|| GazeError::Validation(format!("registry lacks region {r}")))?;
            let label: GazeLabel = serde_json::from_value(m["label"].clone())
                .map_err(|e| GazeError::Validation(format!("anchor {r} label: {e}")))?;
            let bounds: Vec<usize> = serde_json::from_value(m["bounds"].clone())
                .map_err(|e| GazeError::Validation(format!("anchor {r} bounds: {e}")))?;
            let state = TokenizedState {
                patches: ck.tensor(&format!("anchor{r}.patches"))?.clone(),
                points: ck.tensor(&format!("anchor{r}.points"))?.clone(),
                descriptors: ck.tensor(&format!("anchor{r}.descriptors"))?.clone(),
                bounds,
            };
            reg.register(r, label, state)?;
        }
        Ok(reg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub embed_dim: usize,
    pub hidden: usize,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SelectorIds {
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    desc_w: ParamId,
    desc_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Mean-pooled token embedding followed by a two-layer MLP over regions.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSelector {
    pub config: SelectorConfig,
    pub regions: usize,
    pub params: ParamSet,
    ids: SelectorIds,
}

impl AnchorSelector {
    pub fn new(config: SelectorConfig, tok: &TokenizerConfig, regions: usize, seed: u64) -> Result<Self> {
        if regions == 0 || config.embed_dim == 0 || config.hidden == 0 {
            return Err(GazeError::Config("selector sizes must be positive".into()));
        }
        let mut rng = stream_rng(seed, 0x73_656c);
        let mut ps = ParamSet::new();
        let e = config.embed_dim;
        let pp = tok.patch * tok.patch;
        let ids = SelectorIds {
            patch_w: ps.add_linear("sel.patch_w", pp, e, &mut rng),
            patch_b: ps.add_zeros("sel.patch_b", 1, e),
            pos: ps.add_normal("sel.pos", tok.num_patches(), e, 0.5, &mut rng),
            desc_w: ps.add_linear("sel.desc_w", VOXEL_DESCRIPTOR, e, &mut rng),
            desc_b: ps.add_zeros("sel.desc_b", 1, e),
            w1: ps.add_linear("sel.w1", e, config.hidden, &mut rng),
            b1: ps.add_zeros("sel.b1", 1, config.hidden),
            w2: ps.add_linear("sel.w2", config.hidden, regions, &mut rng),
            b2: ps.add_zeros("sel.b2", 1, regions),
        };
        Ok(Self {
            config,
            regions,
            params: ps,
            ids,
        })
    }

    fn logits_graph(&self, g: &mut Graph<'_>, state: &TokenizedState) -> Result<nn::Var> {
        if state.patches.nrows() != self.params.get(self.ids.pos).nrows() {
            return Err(GazeError::Config(format!(
                "selector expects {} patches, state has {}",
                self.params.get(self.ids.pos).nrows(),
                state.patches.nrows()
            )));
        }
        let x = g.constant(state.patches.clone());
        let w = g.param(self.ids.patch_w);
        let b = g.param(self.ids.patch_b);
        let pos = g.param(self.ids.pos);
        let h = g.matmul(x, w);
        let h = g.add(h, b);
        let h = g.add(h, pos);
        let mut tokens = g.gelu(h);
        if state.num_voxels() > 0 {
            let d = g.constant(state.descriptors.clone());
            let hd = nn::linear(g, d, self.ids.desc_w, self.ids.desc_b);
            let hd = g.gelu(hd);
            tokens = g.concat_rows(&[tokens, hd]);
        }
        let pooled = g.mean_rows(tokens);
        let h = nn::linear(g, pooled, self.ids.w1, self.ids.b1);
        let h = g.gelu(h);
        Ok(nn::linear(g, h, self.ids.w2, self.ids.b2))
    }

    pub fn logits(&self, state: &TokenizedState) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let l = self.logits_graph(&mut g, state)?;
        let out = g.value(l).row(0).to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(GazeError::numeric("selector", 0, "non-finite logits"));
        }
        Ok(out)
    }

    pub fn select(&self, state: &TokenizedState) -> Result<usize> {
        Ok(select_from_logits(&self.logits(state)?))
    }

    pub fn accuracy(&self, states: &[TokenizedState], items: &[(usize, usize)]) -> Result<f64> {
        if items.is_empty() {
            return Ok(f64::NAN);
        }
        let hits = crate::par::try_map_indexed(items.len(), |k| {
            let (s, region) = items[k];
            Ok::<_, GazeError>(usize::from(self.select(&states[s])? == region))
        })?;
        Ok(hits.iter().sum::<usize>() as f64 / items.len() as f64)
    }

    /// Cross-entropy training on `(state index, primary region)` pairs.
    pub fn train(
        &mut self,
        states: &[TokenizedState],
        train: &[(usize, usize)],
        val: &[(usize, usize)],
        opt: &OptimizerConfig,
        seed: u64,
    ) -> Result<TrainingLog> {
        if let Some(&(_, r)) = train.iter().chain(val).find(|(_, r)| *r >= self.regions) {
            return Err(GazeError::Validation(format!(
                "region label {r} outside {} regions",
                self.regions
            )));
        }
        let mut log = TrainingLog::default();
        let model = self.clone();
        let mut params = std::mem::take(&mut self.params);
        nn::train::run(
            "selector",
            &mut params,
            opt,
            train.len(),
            seed,
            |ps, idx, _rng: &mut ChaCha8Rng| {
                let (s, r) = train[idx];
                let mut g = Graph::new(ps);
                let l = model.logits_graph(&mut g, &states[s])?;
                let loss = nn::cross_entropy(&mut g, l, r);
                Ok((g.scalar(loss), g.backward(loss)))
            },
            |stats, ps| {
                let mut probe = model.clone();
                probe.params = ps.clone();
                log.epochs.push(EpochRecord {
                    epoch: stats.epoch,
                    lr: stats.lr,
                    loss: stats.mean_loss,
                    val_accuracy: probe.accuracy(states, val)?,
                });
                Ok(())
            },
        )?;
        self.params = params;
        Ok(log)
    }

    pub fn save(&self, path: &Path, tok: &TokenizerConfig, seed: u64, epoch: usize) -> Result<()> {
        CheckpointWriter {
            kind: "selector",
            seed,
            epoch,
            config: serde_json::json!({
                "selector": self.config,
                "regions": self.regions,
                "tokenizer": tok,
            }),
            extra: serde_json::Value::Null,
        }
        .write_params(path, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        ck.expect_kind("selector")?;
        let cfg = &ck.header.config;
        let parse = |k: &str| cfg[k].clone();
        let config: SelectorConfig = serde_json::from_value(parse("selector"))
            .map_err(|e| GazeError::Validation(format!("selector config: {e}")))?;
        let regions: usize = serde_json::from_value(parse("regions"))
            .map_err(|e| GazeError::Validation(format!("selector regions: {e}")))?;
        let tok: TokenizerConfig = serde_json::from_value(parse("tokenizer"))
            .map_err(|e| GazeError::Validation(format!("selector tokenizer: {e}")))?;
        let mut sel = Self::new(config, &tok, regions, ck.header.seed)?;
        crate::corrnet::copy_params_by_name(&mut sel.params, &ck.to_params())?;
        Ok(sel)
    }
}

/// Argmax over region logits; exact ties go to the lower index.
pub fn select_from_logits(logits: &[f64]) -> usize {
    argmax(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn label(row: usize, col: usize) -> GazeLabel {
        GazeLabel {
            row,
            col,
            screen_px: [0.0, 0.0],
            direction: [0.0, 0.0, 1.0],
        }
    }

    fn state(v: f64) -> TokenizedState {
        TokenizedState {
            patches: Mat::from_elem((4, 4), v),
            points: Mat::zeros((0, 4)),
            bounds: vec![0],
            descriptors: Mat::zeros((0, 4)),
        }
    }

    #[test]
    fn five_regions_on_eleven() {
        let p = partition_grid(11, 5).unwrap();
        let mut sizes: Vec<usize> = p.regions.iter().map(|r| r.cells.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![25, 36, 36, 36, 36]);
        // enumerated layout
        let rect = |r0: usize, r1: usize, c0: usize, c1: usize| -> BTreeSet<Cell> {
            (r0..=r1).flat_map(|r| (c0..=c1).map(move |c| (r, c))).collect()
        };
        let expected = [
            (rect(0, 5, 0, 5), (2, 2)),
            (rect(0, 5, 5, 10), (2, 8)),
            (rect(5, 10, 0, 5), (8, 2)),
            (rect(5, 10, 5, 10), (8, 8)),
            (rect(3, 7, 3, 7), (5, 5)),
        ];
        for (reg, (cells, anchor)) in p.regions.iter().zip(expected) {
            assert_eq!(reg.cells.iter().copied().collect::<BTreeSet<_>>(), cells);
            assert_eq!(reg.anchor, anchor);
        }
        let union: BTreeSet<Cell> = p.regions.iter().flat_map(|r| r.cells.iter().copied()).collect();
        assert_eq!(union.len(), 121);
    }

    #[test]
    fn single_region_covers_everything() {
        let p = partition_grid(11, 1).unwrap();
        assert_eq!(p.regions[0].cells.len(), 121);
        assert_eq!(p.regions[0].anchor, (5, 5));
        assert!(p.primary.iter().all(|&r| r == 0));
    }

    #[test]
    fn primary_region_is_nearest_and_contains_cell() {
        for g in 3..=15 {
            for n in 1..=9 {
                let p = partition_grid(g, n).unwrap();
                assert_eq!(p.len(), n);
                for r in 0..g {
                    for c in 0..g {
                        let k = p.primary_region((r, c));
                        let d = |a: Cell| (a.0 as f64 - r as f64).hypot(a.1 as f64 - c as f64);
                        let best = p.regions.iter().map(|x| d(x.anchor)).fold(f64::INFINITY, f64::min);
                        assert_eq!(d(p.regions[k].anchor), best);
                        let first = p.regions.iter().position(|x| d(x.anchor) == best).unwrap();
                        assert_eq!(k, first);
                        assert!(p.regions[k].contains((r, c)), "g={g} n={n} cell=({r},{c})");
                    }
                }
            }
        }
    }

    #[test]
    fn unsupported_counts_rejected() {
        assert!(matches!(partition_grid(11, 0), Err(GazeError::Config(_))));
        assert!(matches!(partition_grid(11, 10), Err(GazeError::Config(_))));
        assert!(matches!(partition_grid(2, 1), Err(GazeError::Config(_))));
    }

    #[test]
    fn registry_round_trip_and_replacement() {
        let p = partition_grid(11, 5).unwrap();
        let mut reg = AnchorRegistry::new(p);
        assert!(matches!(
            reg.register(0, label(0, 0), state(0.1)),
            Err(GazeError::Validation(_))
        ));
        reg.register(2, label(8, 2), state(0.2)).unwrap();
        assert_eq!(reg.state(2).unwrap(), &state(0.2));
        reg.register(2, label(8, 2), state(0.7)).unwrap();
        assert_eq!(reg.state(2).unwrap(), &state(0.7));
        assert!(!reg.is_complete());
    }

    #[test]
    fn registry_saves_and_loads() {
        let p = partition_grid(5, 4).unwrap();
        let labels: Vec<GazeLabel> = p.regions.iter().map(|r| label(r.anchor.0, r.anchor.1)).collect();
        let mut states: Vec<TokenizedState> = (0..4).map(|k| state(k as f64 / 4.0)).collect();
        states[1] = TokenizedState {
            patches: Mat::from_elem((4, 4), 0.5),
            points: ndarray::array![[0.1, 0.2, 0.3, 1.0], [0.0, -0.5, 0.25, -1.0]],
            bounds: vec![0, 2],
            descriptors: ndarray::array![[0.5, 0.5, 0.5, 0.1]],
        };
        let reg = AnchorRegistry::from_samples(p, labels.iter().zip(states.iter())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.json");
        reg.save(&path).unwrap();
        assert_eq!(AnchorRegistry::load(&path).unwrap(), reg);
    }

    #[test]
    fn argmax_and_ties() {
        assert_eq!(select_from_logits(&[0.1, 0.9, 0.1, 0.1, 0.1]), 1);
        assert_eq!(select_from_logits(&[0.3, 0.7, 0.7, 0.1]), 1);
    }

    proptest::proptest! {
        #[test]
        fn selection_invariant_to_monotone_maps(v in proptest::collection::vec(-5.0f64..5.0, 1..9)) {
            let mapped: Vec<f64> = v.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            proptest::prop_assert_eq!(select_from_logits(&v), select_from_logits(&mapped));
        }
    }
}
