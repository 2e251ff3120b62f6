use std::path::Path;

use crate::anchors::Cell;
use crate::data::{load_manifest, DatasetManifest, GazeLabel, Split};
use crate::error::Result;
use crate::par;
use crate::tokenizer::{TokenizedState, TokenizerConfig};

/// A manifest with every sample tokenized.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub labels: Vec<GazeLabel>,
    pub states: Vec<TokenizedState>,
}

impl Dataset {
    pub fn load(manifest_path: &Path, tok: &TokenizerConfig) -> Result<Self> {
        Self::from_manifest(load_manifest(manifest_path)?, tok)
    }

    pub fn from_manifest(manifest: DatasetManifest, tok: &TokenizerConfig) -> Result<Self> {
        let loaded = par::try_map_indexed(manifest.samples.len(), |k| {
            let s = manifest.load_sample(k)?;
            let state = TokenizedState::new(&s.frame, &s.events, tok)?;
            Ok::<_, crate::GazeError>((s.label, state))
        })?;
        let (labels, states) = loaded.into_iter().unzip();
        Ok(Self {
            manifest,
            labels,
            states,
        })
    }

    pub fn grid(&self) -> usize {
        self.manifest.grid
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn cell(&self, k: usize) -> Cell {
        (self.labels[k].row, self.labels[k].col)
    }

    pub fn cells(&self) -> Vec<Cell> {
        (0..self.len()).map(|k| self.cell(k)).collect()
    }

    pub fn split(&self, split: Split) -> Vec<usize> {
        self.manifest.indices(split)
    }

    /// Training samples in manifest order, as `(label, state)` pairs.
    pub fn train_pairs(&self) -> impl Iterator<Item = (&GazeLabel, &TokenizedState)> {
        self.split(Split::Train)
            .into_iter()
            .map(move |k| (&self.labels[k], &self.states[k]))
    }
}
