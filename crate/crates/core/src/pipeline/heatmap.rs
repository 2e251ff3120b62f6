//! Attention-mass maps over the current frame's patches.

use std::path::Path;

use ndarray::Array2;

use crate::data::io::write_pgm;
use crate::error::{GazeError, Result};
use crate::nn::Mat;
use crate::tokenizer::TokenizerConfig;

/// Attention received by each current-frame patch token (column sums of the
/// `L × L` map), divided by the maximum and spread over the patch's pixels.
/// The result has the frame's dimensions and values in `[0, 1]`.
pub fn attention_heatmap(attention: &Mat, tok: &TokenizerConfig) -> Result<Array2<f64>> {
    let l = tok.sequence_len();
    if attention.dim() != (l, l) {
        return Err(GazeError::Validation(format!(
            "attention map is {:?}, expected {l}x{l}",
            attention.dim()
        )));
    }
    let first = tok.state_len();
    let mass: Vec<f64> = (first..first + tok.num_patches())
        .map(|j| attention.column(j).sum())
        .collect();
    let peak = mass.iter().cloned().fold(0.0, f64::max);
    let gw = tok.grid_w();
    let p = tok.patch;
    Ok(Array2::from_shape_fn((tok.frame_height, tok.frame_width), |(y, x)| {
        let m = mass[(y / p) * gw + x / p];
        if peak > 0.0 {
            m / peak
        } else {
            0.0
        }
    }))
}

/// Writes [`attention_heatmap`] as an 8-bit grayscale image.
pub fn dump_attention_heatmap(attention: &Mat, tok: &TokenizerConfig, path: &Path) -> Result<()> {
    super::artifacts::ensure_parent(path)?;
    write_pgm(path, &attention_heatmap(attention, tok)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::io::read_pgm;
    use crate::tokenizer::VoxelGridSpec;

    fn tok() -> TokenizerConfig {
        TokenizerConfig {
            frame_width: 16,
            frame_height: 8,
            patch: 4,
            voxel: VoxelGridSpec {
                cell_w: 4,
                cell_h: 4,
                cell_t_us: 1000,
                top_k: 3,
            },
            dim: 4,
            standardize_frames: true,
        }
    }

    #[test]
    fn uniform_attention_gives_constant_image() {
        let t = tok();
        let l = t.sequence_len();
        let a = Mat::from_elem((l, l), 1.0 / l as f64);
        let img = attention_heatmap(&a, &t).unwrap();
        assert_eq!(img.dim(), (8, 16));
        assert!(img.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn one_hot_attention_lights_one_patch() {
        let t = tok();
        let l = t.sequence_len();
        // patch 5 of the current frame: grid row 1, column 1
        let k = t.state_len() + 5;
        let mut a = Mat::zeros((l, l));
        a.column_mut(k).fill(1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.pgm");
        dump_attention_heatmap(&a, &t, &path).unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!(img.dim(), (8, 16));
        for ((y, x), &v) in img.indexed_iter() {
            let inside = (4..8).contains(&y) && (4..8).contains(&x);
            assert_eq!(v, if inside { 1.0 } else { 0.0 }, "({y}, {x})");
        }
    }

    #[test]
    fn wrong_shape_is_rejected() {
        assert!(attention_heatmap(&Mat::zeros((3, 3)), &tok()).is_err());
    }
}
