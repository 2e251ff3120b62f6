//! Frame patches and top-K event voxels as one token sequence.
//!
//! A state (frame + event window) is first reduced to a [`TokenizedState`]:
//! the flattened frame patches and, for each retained voxel, its member
//! events as voxel-local point features. Those raw inputs are what anchors
//! store. Embedding them into `d`-dimensional tokens uses the learned
//! [`TokenizerParams`] of whichever network consumes them.

use std::collections::HashMap;

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EventStream, Frame};
use crate::error::{GazeError, Result};
use crate::nn::{Graph, Mat, ParamId, ParamSet, Var};

/// Point features per event: local x, y, t offsets in `[-1, 1]` and polarity.
pub const POINT_FEATURES: usize = 4;
/// Voxel descriptor: normalized centre coordinates and log-count.
pub const VOXEL_DESCRIPTOR: usize = 4;
/// Additive attention bias applied to padded keys.
pub const MASKED_BIAS: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    pub cell_w: usize,
    pub cell_h: usize,
    pub cell_t_us: u64,
    pub top_k: usize,
}

impl VoxelGridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cell_w == 0 || self.cell_h == 0 || self.cell_t_us == 0 {
            return Err(GazeError::Config("voxel extents must be positive".into()));
        }
        if self.top_k == 0 {
            return Err(GazeError::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub frame_width: usize,
    pub frame_height: usize,
    pub patch: usize,
    pub voxel: VoxelGridSpec,
    pub dim: usize,
    /// Shift and scale each frame to zero mean and unit variance before
    /// patching.
    #[serde(default = "default_true")]
    pub standardize_frames: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            frame_width: 64,
            frame_height: 64,
            patch: 8,
            voxel: VoxelGridSpec {
                cell_w: 8,
                cell_h: 8,
                cell_t_us: 25_000,
                top_k: 32,
            },
            dim: 128,
            standardize_frames: true,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.frame_width.is_multiple_of(self.patch) || !self.frame_height.is_multiple_of(self.patch)
        {
            return Err(GazeError::Config(format!(
                "frame {}x{} is not divisible into {}-pixel patches",
                self.frame_width, self.frame_height, self.patch
            )));
        }
        if self.dim == 0 {
            return Err(GazeError::Config("token dimension must be positive".into()));
        }
        self.voxel.validate()
    }

    pub fn grid_w(&self) -> usize {
        self.frame_width / self.patch
    }

    pub fn grid_h(&self) -> usize {
        self.frame_height / self.patch
    }

    /// Frame tokens per state.
    pub fn num_patches(&self) -> usize {
        self.grid_w() * self.grid_h()
    }

    /// Tokens per state after padding the event part to `top_k`.
    pub fn state_len(&self) -> usize {
        self.num_patches() + self.voxel.top_k
    }

    /// Length of a fused anchor + current sequence.
    pub fn sequence_len(&self) -> usize {
        2 * self.state_len()
    }
}

/// A non-empty cell of the event volume.
#[derive(Clone, Debug, PartialEq)]
pub struct EventVoxel {
    /// Linear cell index `(ct * ny + cy) * nx + cx`.
    pub cell: usize,
    /// Cell centre normalized to `[0, 1]^3` as (x, y, t).
    pub coords: [f64; 3],
    pub count: usize,
    /// Member events as voxel-local point features, in stream order.
    pub points: Vec<[f64; POINT_FEATURES]>,
}

/// Keeps the `top_k` voxels with the most events; ties go to the lower cell index.
pub fn voxelize(events: &EventStream, spec: &VoxelGridSpec) -> Result<Vec<EventVoxel>> {
    spec.validate()?;
    let nx = events.width.div_ceil(spec.cell_w);
    let ny = events.height.div_ceil(spec.cell_h);
    let span = events.t_end.saturating_sub(events.t_start).max(1);
    let nt = span.div_ceil(spec.cell_t_us) as usize;

    let mut cells: HashMap<usize, Vec<[f64; POINT_FEATURES]>> = HashMap::new();
    for e in &events.events {
        let (x, y) = (usize::from(e.x), usize::from(e.y));
        if x >= events.width || y >= events.height || e.t < events.t_start || e.t >= events.t_end {
            return Err(GazeError::DataIntegrity(format!(
                "event ({x}, {y}, {}) outside the declared sensor volume",
                e.t
            )));
        }
        let rel_t = e.t - events.t_start;
        let (cx, cy, ct) = (x / spec.cell_w, y / spec.cell_h, (rel_t / spec.cell_t_us) as usize);
        let cell = (ct * ny + cy) * nx + cx;
        let local = |v: f64, origin: f64, extent: f64| 2.0 * (v - origin) / extent - 1.0;
        let point = [
            local(x as f64 + 0.5, (cx * spec.cell_w) as f64, spec.cell_w as f64),
            local(y as f64 + 0.5, (cy * spec.cell_h) as f64, spec.cell_h as f64),
            local(
                rel_t as f64 + 0.5,
                (ct as u64 * spec.cell_t_us) as f64,
                spec.cell_t_us as f64,
            ),
            e.polarity.as_f64(),
        ];
        cells.entry(cell).or_default().push(point);
    }

    let mut ranked: Vec<(usize, Vec<[f64; POINT_FEATURES]>)> = cells.into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
    ranked.truncate(spec.top_k);
    Ok(ranked
        .into_iter()
        .map(|(cell, points)| {
            let cx = cell % nx;
            let cy = (cell / nx) % ny;
            let ct = cell / (nx * ny);
            EventVoxel {
                cell,
                coords: [
                    (cx as f64 + 0.5) / nx as f64,
                    (cy as f64 + 0.5) / ny as f64,
                    (ct as f64 + 0.5) / nt as f64,
                ],
                count: points.len(),
                points,
            }
        })
        .collect())
}

/// Flattens a frame into `P × p²` patch rows in raster order.
pub fn patch_matrix(frame: &Frame, patch: usize) -> Result<Mat> {
    let (h, w) = frame.intensity.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(GazeError::Config(format!(
            "frame {w}x{h} is not divisible into {patch}-pixel patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Mat::zeros((gh * gw, patch * patch));
    for pr in 0..gh {
        for pc in 0..gw {
            let block = frame
                .intensity
                .slice(s![pr * patch..(pr + 1) * patch, pc * patch..(pc + 1) * patch]);
            let mut row = out.row_mut(pr * gw + pc);
            for (dst, src) in row.iter_mut().zip(block.iter()) {
                *dst = *src;
            }
        }
    }
    Ok(out)
}

/// Zero mean, unit variance over all entries; a constant input is only
/// centred.
pub fn standardize(m: &mut Mat) {
    let n = m.len().max(1) as f64;
    let mean = m.sum() / n;
    let var = m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    let inv = if sd > 1e-9 { 1.0 / sd } else { 1.0 };
    m.mapv_inplace(|v| (v - mean) * inv);
}

/// Model-independent inputs for one eye state.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedState {
    /// `P × p²` patch pixels.
    pub patches: Mat,
    /// All retained voxels' point features stacked, `N × 4`.
    pub points: Mat,
    /// Row offsets of each voxel in `points` (`voxels + 1` entries).
    pub bounds: Vec<usize>,
    /// `voxels × 4` descriptor rows (centre coordinates, log-count).
    pub descriptors: Mat,
}

impl TokenizedState {
    pub fn new(frame: &Frame, events: &EventStream, cfg: &TokenizerConfig) -> Result<Self> {
        cfg.validate()?;
        if frame.width() != cfg.frame_width || frame.height() != cfg.frame_height {
            return Err(GazeError::Config(format!(
                "frame is {}x{}, tokenizer expects {}x{}",
                frame.width(),
                frame.height(),
                cfg.frame_width,
                cfg.frame_height
            )));
        }
        let mut patches = patch_matrix(frame, cfg.patch)?;
        if cfg.standardize_frames {
            standardize(&mut patches);
        }
        let voxels = voxelize(events, &cfg.voxel)?;
        Ok(Self::from_voxels(patches, &voxels))
    }

    pub fn from_voxels(patches: Mat, voxels: &[EventVoxel]) -> Self {
        let total: usize = voxels.iter().map(|v| v.points.len()).sum();
        let mut points = Mat::zeros((total, POINT_FEATURES));
        let mut descriptors = Mat::zeros((voxels.len(), VOXEL_DESCRIPTOR));
        let mut bounds = vec![0];
        let mut r = 0;
        for (k, v) in voxels.iter().enumerate() {
            for p in &v.points {
                for (c, &x) in p.iter().enumerate() {
                    points[[r, c]] = x;
                }
                r += 1;
            }
            bounds.push(r);
            descriptors[[k, 0]] = v.coords[0];
            descriptors[[k, 1]] = v.coords[1];
            descriptors[[k, 2]] = v.coords[2];
            descriptors[[k, 3]] = (1.0 + v.count as f64).ln() / 8.0;
        }
        Self {
            patches,
            points,
            bounds,
            descriptors,
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.bounds.len() - 1
    }
}

/// Which state and modality a token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenTag {
    pub role: StateRole,
    pub modality: Modality,
    pub padding: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StateRole {
    Anchor,
    Current,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Frame,
    Event,
}

/// Learned embedding parameters, registered inside a model's [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerParams {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos: ParamId,
    pub point_w: ParamId,
    pub point_b: ParamId,
    pub voxel_w: ParamId,
    pub voxel_b: ParamId,
    pub null_token: ParamId,
    pub modality: ParamId,
    pub role: ParamId,
}

impl TokenizerParams {
    pub fn init<R: Rng + ?Sized>(ps: &mut ParamSet, cfg: &TokenizerConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let pp = cfg.patch * cfg.patch;
        Self {
            patch_w: ps.add_linear("tok.patch_w", pp, d, rng),
            patch_b: ps.add_zeros("tok.patch_b", 1, d),
            pos: ps.add_normal("tok.pos", cfg.num_patches(), d, 0.5, rng),
            point_w: ps.add_linear("tok.point_w", POINT_FEATURES, d, rng),
            point_b: ps.add_zeros("tok.point_b", 1, d),
            voxel_w: ps.add_linear("tok.voxel_w", VOXEL_DESCRIPTOR, d, rng),
            voxel_b: ps.add_zeros("tok.voxel_b", 1, d),
            null_token: ps.add_normal("tok.null", 1, d, 0.1, rng),
            modality: ps.add_normal("tok.modality", 2, d, 0.1, rng),
            role: ps.add_normal("tok.role", 2, d, 0.1, rng),
        }
    }

    /// `patches · W + b + pos`, one token per patch.
    pub fn patch_embed(&self, g: &mut Graph<'_>, patches: &Mat) -> Var {
        let x = g.constant(patches.clone());
        let w = g.param(self.patch_w);
        let b = g.param(self.patch_b);
        let pos = g.param(self.pos);
        let h = g.matmul(x, w);
        let h = g.add(h, b);
        g.add(h, pos)
    }

    /// Per-event embedding followed by a max over each voxel's events.
    pub fn voxel_features(&self, g: &mut Graph<'_>, state: &TokenizedState) -> Option<Var> {
        if state.num_voxels() == 0 {
            return None;
        }
        let pts = g.constant(state.points.clone());
        let w = g.param(self.point_w);
        let b = g.param(self.point_b);
        let h = g.matmul(pts, w);
        let h = g.add(h, b);
        let h = g.gelu(h);
        Some(g.segment_max(h, &state.bounds))
    }

    /// Event tokens: pooled point features plus a descriptor embedding.
    pub fn event_tokens(&self, g: &mut Graph<'_>, state: &TokenizedState) -> Option<Var> {
        let feats = self.voxel_features(g, state)?;
        let desc = g.constant(state.descriptors.clone());
        let w = g.param(self.voxel_w);
        let b = g.param(self.voxel_b);
        let h = g.matmul(desc, w);
        let h = g.add(h, b);
        Some(g.add(feats, h))
    }

    /// `(P + K) × d` tokens for one state; missing voxels become null tokens.
    pub fn state_tokens(
        &self,
        g: &mut Graph<'_>,
        state: &TokenizedState,
        top_k: usize,
    ) -> Result<(Var, usize)> {
        let k = state.num_voxels();
        if k > top_k {
            return Err(GazeError::Config(format!(
                "state carries {k} voxels but top_k is {top_k}"
            )));
        }
        let frame = self.patch_embed(g, &state.patches);
        let mut parts = vec![frame];
        if let Some(ev) = self.event_tokens(g, state) {
            parts.push(ev);
        }
        if k < top_k {
            let ones = g.constant(Mat::ones((top_k - k, 1)));
            let null = g.param(self.null_token);
            parts.push(g.matmul(ones, null));
        }
        Ok((g.concat_rows(&parts), k))
    }

    /// Fuses `[anchor frame | anchor events | current frame | current events]`
    /// and adds modality and state-role embeddings.
    pub fn fuse_states(
        &self,
        g: &mut Graph<'_>,
        anchor: &TokenizedState,
        current: &TokenizedState,
        cfg: &TokenizerConfig,
    ) -> Result<FusedSequence> {
        if anchor.patches.dim() != current.patches.dim() {
            return Err(GazeError::Config(format!(
                "anchor patches {:?} vs current patches {:?}",
                anchor.patches.dim(),
                current.patches.dim()
            )));
        }
        let p = cfg.num_patches();
        if anchor.patches.nrows() != p {
            return Err(GazeError::Config(format!(
                "state has {} patches, tokenizer expects {p}",
                anchor.patches.nrows()
            )));
        }
        let k = cfg.voxel.top_k;
        let (a, ka) = self.state_tokens(g, anchor, k)?;
        let (c, kc) = self.state_tokens(g, current, k)?;
        let tokens = g.concat_rows(&[a, c]);

        let tags = sequence_tags(p, k, ka, kc);
        let n = tags.len();
        let mut mod_onehot = Mat::zeros((n, 2));
        let mut role_onehot = Mat::zeros((n, 2));
        let mut key_bias = Mat::zeros((1, n));
        for (i, t) in tags.iter().enumerate() {
            mod_onehot[[i, t.modality as usize]] = 1.0;
            role_onehot[[i, t.role as usize]] = 1.0;
            if t.padding {
                key_bias[[0, i]] = MASKED_BIAS;
            }
        }
        let mo = g.constant(mod_onehot);
        let me = g.param(self.modality);
        let mod_emb = g.matmul(mo, me);
        let ro = g.constant(role_onehot);
        let re = g.param(self.role);
        let role_emb = g.matmul(ro, re);
        let tokens = g.add(tokens, mod_emb);
        let tokens = g.add(tokens, role_emb);
        Ok(FusedSequence {
            tokens,
            tags,
            key_bias,
        })
    }
}

/// Tags for a fused sequence given the real voxel counts of each state.
pub fn sequence_tags(patches: usize, top_k: usize, anchor_voxels: usize, current_voxels: usize) -> Vec<TokenTag> {
    let mut tags = Vec::with_capacity(2 * (patches + top_k));
    for (role, voxels) in [(StateRole::Anchor, anchor_voxels), (StateRole::Current, current_voxels)] {
        for _ in 0..patches {
            tags.push(TokenTag {
                role,
                modality: Modality::Frame,
                padding: false,
            });
        }
        for j in 0..top_k {
            tags.push(TokenTag {
                role,
                modality: Modality::Event,
                padding: j >= voxels,
            });
        }
    }
    tags
}

/// A fused sequence inside a graph.
#[derive(Clone, Debug)]
pub struct FusedSequence {
    pub tokens: Var,
    pub tags: Vec<TokenTag>,
    /// `1 × L` additive attention bias masking padded keys.
    pub key_bias: Mat,
}

/// A fused sequence evaluated outside of any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Mat,
    pub tags: Vec<TokenTag>,
}

impl TokenSequence {
    pub fn evaluate(
        ps: &ParamSet,
        params: &TokenizerParams,
        anchor: &TokenizedState,
        current: &TokenizedState,
        cfg: &TokenizerConfig,
    ) -> Result<Self> {
        let mut g = Graph::new(ps);
        let fused = params.fuse_states(&mut g, anchor, current, cfg)?;
        Ok(Self {
            tokens: g.value(fused.tokens).clone(),
            tags: fused.tags,
        })
    }
}

/// Point-set descriptor `a_i` for one voxel's events, outside of any graph.
pub fn encode_voxel_features(
    points: &[[f64; POINT_FEATURES]],
    ps: &ParamSet,
    params: &TokenizerParams,
) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(GazeError::Validation("voxel has no events".into()));
    }
    let pts = Array2::from_shape_fn((points.len(), POINT_FEATURES), |(r, c)| points[r][c]);
    let state = TokenizedState {
        patches: Mat::zeros((0, 0)),
        points: pts,
        bounds: vec![0, points.len()],
        descriptors: Mat::zeros((1, VOXEL_DESCRIPTOR)),
    };
    let mut g = Graph::new(ps);
    let v = params.voxel_features(&mut g, &state).expect("one voxel");
    Ok(g.value(v).row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Event, Polarity};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_events(n: usize, seed: u64, w: usize, h: usize, span: u64) -> EventStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ev: Vec<Event> = (0..n)
            .map(|_| {
                // clustered draws so counts vary between cells
                let x = (rng.random_range(0.0f64..1.0).powi(2) * w as f64) as u16;
                let y = rng.random_range(0..h) as u16;
                let p = if rng.random_bool(0.5) {
                    Polarity::Positive
                } else {
                    Polarity::Negative
                };
                Event::new(x, y, rng.random_range(0..span), p)
            })
            .collect();
        ev.sort_by_key(|e| e.t);
        EventStream::new(ev, w, h, 0, span).unwrap()
    }

    fn spec(k: usize) -> VoxelGridSpec {
        VoxelGridSpec {
            cell_w: 8,
            cell_h: 8,
            cell_t_us: 10_000,
            top_k: k,
        }
    }

    #[test]
    fn saturation_returns_every_nonempty_voxel() {
        let s = random_events(50, 1, 32, 32, 30_000);
        let all = voxelize(&s, &spec(10_000)).unwrap();
        let total: usize = all.iter().map(|v| v.count).sum();
        assert_eq!(total, 50);
        let mut cells: Vec<_> = all.iter().map(|v| v.cell).collect();
        cells.sort_unstable();
        cells.dedup();
        assert_eq!(cells.len(), all.len());
    }

    #[test]
    fn single_event_voxel() {
        let s = EventStream::new(vec![Event::new(9, 3, 15_000, Polarity::Negative)], 32, 16, 0, 40_000)
            .unwrap();
        let v = voxelize(&s, &spec(4)).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].count, 1);
        // cell (1, 0, 1) of a 4 x 2 x 4 grid
        assert_eq!(v[0].coords, [1.5 / 4.0, 0.5 / 2.0, 1.5 / 4.0]);
        assert_eq!(v[0].points[0][3], -1.0);
    }

    #[test]
    fn empty_stream_gives_no_voxels() {
        let s = EventStream::empty(16, 16, 0, 1000);
        assert!(voxelize(&s, &spec(8)).unwrap().is_empty());
    }

    #[test]
    fn standardized_patches_have_unit_moments() {
        let mut m = Mat::from_shape_fn((4, 16), |(r, c)| 0.2 + 0.05 * (r * 16 + c) as f64);
        standardize(&mut m);
        let n = m.len() as f64;
        assert!((m.sum() / n).abs() < 1e-12);
        assert!((m.iter().map(|v| v * v).sum::<f64>() / n - 1.0).abs() < 1e-12);
        let mut flat = Mat::from_elem((2, 2), 0.7);
        standardize(&mut flat);
        assert!(flat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_count_and_divisibility() {
        let f = Frame::new(Mat::zeros((64, 64)), 0).unwrap();
        assert_eq!(patch_matrix(&f, 8).unwrap().nrows(), 64);
        let g = Frame::new(Mat::zeros((60, 64)), 0).unwrap();
        assert!(matches!(patch_matrix(&g, 8), Err(GazeError::Config(_))));
    }

    fn tiny_cfg() -> TokenizerConfig {
        TokenizerConfig {
            frame_width: 16,
            frame_height: 16,
            patch: 8,
            voxel: VoxelGridSpec {
                cell_w: 8,
                cell_h: 8,
                cell_t_us: 10_000,
                top_k: 3,
            },
            dim: 6,
            standardize_frames: true,
        }
    }

    #[test]
    fn zero_frame_embeds_to_positions() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let tp = TokenizerParams::init(&mut ps, &cfg, &mut rng);
        let mut g = Graph::new(&ps);
        let v = tp.patch_embed(&mut g, &Mat::zeros((4, 64)));
        assert_eq!(g.value(v), ps.get(tp.pos));
    }

    #[test]
    fn patch_embed_matches_direct_evaluation() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let tp = TokenizerParams::init(&mut ps, &cfg, &mut rng);
        *ps.get_mut(tp.patch_b) = Mat::from_shape_fn((1, 6), |(_, c)| c as f64 * 0.1);
        let img = Mat::from_shape_fn((16, 16), |(r, c)| ((r * 31 + c * 17) % 23) as f64 / 23.0);
        let frame = Frame::new(img.clone(), 0).unwrap();
        let mut g = Graph::new(&ps);
        let v = tp.patch_embed(&mut g, &patch_matrix(&frame, 8).unwrap());
        let out = g.value(v);
        let (w, b, pos) = (ps.get(tp.patch_w), ps.get(tp.patch_b), ps.get(tp.pos));
        for pr in 0..2 {
            for pc in 0..2 {
                let t = pr * 2 + pc;
                for j in 0..6 {
                    let mut acc = b[[0, j]] + pos[[t, j]];
                    for y in 0..8 {
                        for x in 0..8 {
                            acc += img[[pr * 8 + y, pc * 8 + x]] * w[[y * 8 + x, j]];
                        }
                    }
                    assert!((out[[t, j]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_event_feature_is_its_embedding() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let tp = TokenizerParams::init(&mut ps, &cfg, &mut rng);
        let p = [0.25, -0.5, 0.75, 1.0];
        let a = encode_voxel_features(&[p], &ps, &tp).unwrap();
        let (w, b) = (ps.get(tp.point_w), ps.get(tp.point_b));
        for j in 0..6 {
            let z: f64 = b[[0, j]] + (0..4).map(|i| p[i] * w[[i, j]]).sum::<f64>();
            let gelu = 0.5 * z * (1.0 + (0.797_884_560_802_865_4 * (z + 0.044_715 * z.powi(3))).tanh());
            assert!((a[j] - gelu).abs() < 1e-12);
        }
    }

    #[test]
    fn two_event_feature_is_coordinatewise_max() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::new();
        let tp = TokenizerParams::init(&mut ps, &cfg, &mut rng);
        let p = [0.1, 0.2, -0.3, 1.0];
        let q = [-0.7, 0.9, 0.4, -1.0];
        let a = encode_voxel_features(&[p], &ps, &tp).unwrap();
        let b = encode_voxel_features(&[q], &ps, &tp).unwrap();
        let both = encode_voxel_features(&[p, q], &ps, &tp).unwrap();
        for j in 0..6 {
            assert_eq!(both[j], a[j].max(b[j]));
        }
    }

    #[test]
    fn voxel_features_permutation_invariant() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        let tp = TokenizerParams::init(&mut ps, &cfg, &mut rng);
        let mut pts: Vec<[f64; 4]> = (0..40)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    if rng.random_bool(0.5) { 1.0 } else { -1.0 },
                ]
            })
            .collect();
        let a = encode_voxel_features(&pts, &ps, &tp).unwrap();
        pts.shuffle(&mut rng);
        let b = encode_voxel_features(&pts, &ps, &tp).unwrap();
        assert_eq!(a, b);
    }

    fn tiny_state(seed: u64, cfg: &TokenizerConfig, n: usize) -> TokenizedState {
        let img = Mat::from_shape_fn((16, 16), |(r, c)| ((r + c + seed as usize) % 7) as f64 / 7.0);
        let frame = Frame::new(img, 0).unwrap();
        TokenizedState::new(&frame, &random_events(n, seed, 16, 16, 30_000), cfg).unwrap()
    }

    #[test]
    fn fused_length_and_tags() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let tp = TokenizerParams::init(&mut ps, &cfg, &mut rng);
        let a = tiny_state(1, &cfg, 200);
        let c = tiny_state(2, &cfg, 1);
        let seq = TokenSequence::evaluate(&ps, &tp, &a, &c, &cfg).unwrap();
        assert_eq!(seq.tokens.nrows(), cfg.sequence_len());
        assert_eq!(seq.tags.len(), 2 * (4 + 3));
        assert_eq!(seq.tags.iter().filter(|t| t.padding).count(), 2);
        assert!(seq.tokens.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identical_states_differ_only_by_role() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let tp = TokenizerParams::init(&mut ps, &cfg, &mut rng);
        let s = tiny_state(5, &cfg, 100);
        let seq = TokenSequence::evaluate(&ps, &tp, &s, &s, &cfg).unwrap();
        let half = cfg.state_len();
        let role = ps.get(tp.role);
        let expected = &role.row(1) - &role.row(0);
        for i in 0..half {
            let diff = &seq.tokens.row(half + i) - &seq.tokens.row(i);
            for (a, b) in diff.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn swapping_states_swaps_base_tokens() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamSet::new();
        let tp = TokenizerParams::init(&mut ps, &cfg, &mut rng);
        let (a, c) = (tiny_state(1, &cfg, 80), tiny_state(2, &cfg, 90));
        let ac = TokenSequence::evaluate(&ps, &tp, &a, &c, &cfg).unwrap();
        let ca = TokenSequence::evaluate(&ps, &tp, &c, &a, &cfg).unwrap();
        let half = cfg.state_len();
        let role = ps.get(tp.role);
        let shift = &role.row(1) - &role.row(0);
        for i in 0..half {
            // anchor half of `ca` is the current half of `ac`, minus the role offset
            let d = &ac.tokens.row(half + i) - &ca.tokens.row(i);
            assert!(d.iter().zip(shift.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        }
        assert_eq!(ca.tags[0].role, StateRole::Anchor);
    }

    #[test]
    fn mismatched_states_rejected() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamSet::new();
        let tp = TokenizerParams::init(&mut ps, &cfg, &mut rng);
        let a = tiny_state(1, &cfg, 10);
        let mut c = a.clone();
        c.patches = Mat::zeros((9, 64));
        let mut g = Graph::new(&ps);
        assert!(tp.fuse_states(&mut g, &a, &c, &cfg).is_err());
    }

    #[test]
    fn patch_embed_is_linear_in_frame() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut ps = ParamSet::new();
        let tp = TokenizerParams::init(&mut ps, &cfg, &mut rng);
        let f1 = Mat::from_shape_fn((4, 64), |(r, c)| ((r * 13 + c) % 11) as f64 / 11.0);
        let f2 = Mat::from_shape_fn((4, 64), |(r, c)| ((r * 7 + c * 3) % 5) as f64 / 5.0);
        let (a, b) = (0.3, -1.7);
        let embed = |x: &Mat| {
            let mut g = Graph::new(&ps);
            let v = tp.patch_embed(&mut g, x);
            g.value(v) - ps.get(tp.pos) - ps.get(tp.patch_b)
        };
        let lhs = embed(&(&f1 * a + &f2 * b));
        let rhs = embed(&f1) * a + embed(&f2) * b;
        for (x, y) in lhs.iter().zip(rhs.iter()) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
        }
    }
}
