//! Screen geometry, gaze direction vectors and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{GazeError, Result};

pub mod continuous;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenGeometry {
    pub w_px: u32,
    pub h_px: u32,
    pub fov_h_deg: f64,
    pub fov_v_deg: f64,
}

impl Default for ScreenGeometry {
    fn default() -> Self {
        Self {
            w_px: 1920,
            h_px: 1080,
            fov_h_deg: 64.0,
            fov_v_deg: 96.0,
        }
    }
}

impl ScreenGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.w_px == 0 || self.h_px == 0 {
            return Err(GazeError::Config("screen dimensions must be positive".into()));
        }
        for fov in [self.fov_h_deg, self.fov_v_deg] {
            if !(fov > 0.0 && fov < 180.0) {
                return Err(GazeError::Config(format!(
                    "field of view {fov} outside (0, 180) degrees"
                )));
            }
        }
        Ok(())
    }

    /// Eye-to-screen distance in pixel units, from the horizontal field of view.
    pub fn screen_distance(&self) -> f64 {
        (f64::from(self.w_px) / 2.0) / (self.fov_h_deg.to_radians() / 2.0).tan()
    }

    /// Distance implied by the vertical field of view.
    pub fn vertical_distance(&self) -> f64 {
        (f64::from(self.h_px) / 2.0) / (self.fov_v_deg.to_radians() / 2.0).tan()
    }

    /// Relative disagreement between the two distance estimates.
    pub fn fov_inconsistency(&self) -> f64 {
        let (h, v) = (self.screen_distance(), self.vertical_distance());
        (h - v).abs() / h
    }

    /// Logs a warning if the two fields of view disagree by more than 5%.
    pub fn warn_if_inconsistent(&self) {
        let r = self.fov_inconsistency();
        if r > 0.05 {
            log::warn!(
                "screen fov {}x{} deg is inconsistent with {}x{} px ({:.0}% apart); using horizontal fov",
                self.fov_h_deg,
                self.fov_v_deg,
                self.w_px,
                self.h_px,
                r * 100.0
            );
        }
    }

    /// Screen pixel coordinates of the centre of grid cell `(row, col)`.
    pub fn cell_center(&self, grid: usize, row: usize, col: usize) -> [f64; 2] {
        let g = grid as f64;
        [
            (col as f64 + 0.5) * f64::from(self.w_px) / g,
            (row as f64 + 0.5) * f64::from(self.h_px) / g,
        ]
    }

    /// Pinhole mapping from a screen point to a unit gaze vector in the eye frame.
    pub fn screen_to_gaze_vector(&self, px: [f64; 2]) -> Result<[f64; 3]> {
        let (w, h) = (f64::from(self.w_px), f64::from(self.h_px));
        if !(0.0..=w).contains(&px[0]) || !(0.0..=h).contains(&px[1]) {
            return Err(GazeError::Validation(format!(
                "screen point ({}, {}) outside {}x{} display",
                px[0], px[1], self.w_px, self.h_px
            )));
        }
        let v = [px[0] - w / 2.0, px[1] - h / 2.0, self.screen_distance()];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        Ok([v[0] / n, v[1] / n, v[2] / n])
    }

    pub fn cell_direction(&self, grid: usize, row: usize, col: usize) -> [f64; 3] {
        self.screen_to_gaze_vector(self.cell_center(grid, row, col))
            .expect("cell centres lie on the screen")
    }
}

fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Angle between two vectors in degrees.
pub fn angle_deg(p: &[f64; 3], t: &[f64; 3]) -> Result<f64> {
    let (np, nt) = (norm(p), norm(t));
    if np == 0.0 || nt == 0.0 {
        return Err(GazeError::Validation("zero-norm gaze vector".into()));
    }
    let cos = (p[0] * t[0] + p[1] * t[1] + p[2] * t[2]) / (np * nt);
    Ok(cos.clamp(-1.0, 1.0).acos().to_degrees())
}

/// Mean angular error in degrees.
pub fn mae(predictions: &[[f64; 3]], truths: &[[f64; 3]]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(GazeError::Validation(format!(
            "{} predictions vs {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, t) in predictions.iter().zip(truths) {
        total += angle_deg(p, t)?;
    }
    Ok(total / predictions.len() as f64)
}

/// Fraction of exact matches.
pub fn accuracy<T: PartialEq>(predicted: &[T], truth: &[T]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(GazeError::Validation(format!(
            "{} predictions vs {} truths",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / predicted.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rotate_x(v: [f64; 3], deg: f64) -> [f64; 3] {
        let (s, c) = deg.to_radians().sin_cos();
        [v[0], c * v[1] - s * v[2], s * v[1] + c * v[2]]
    }

    #[test]
    fn center_maps_to_optical_axis() {
        let g = ScreenGeometry::default();
        let v = g.screen_to_gaze_vector([960.0, 540.0]).unwrap();
        assert_eq!(v, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn horizontal_edge_is_half_fov() {
        let g = ScreenGeometry::default();
        let v = g.screen_to_gaze_vector([1920.0, 540.0]).unwrap();
        let angle = angle_deg(&v, &[0.0, 0.0, 1.0]).unwrap();
        assert!((angle - 32.0).abs() < 1e-6, "{angle}");
    }

    #[test]
    fn out_of_bounds_rejected() {
        let g = ScreenGeometry::default();
        assert!(g.screen_to_gaze_vector([-1.0, 10.0]).is_err());
        assert!(g.screen_to_gaze_vector([10.0, 1081.0]).is_err());
    }

    #[test]
    fn default_geometry_is_flagged_inconsistent() {
        assert!(ScreenGeometry::default().fov_inconsistency() > 0.05);
    }

    #[test]
    fn mae_identical_and_orthogonal() {
        let a = [[1.0, 0.0, 0.0], [0.0, 0.3, 0.9]];
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        let p = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let t = [[0.0, 1.0, 0.0], [0.0, 0.0, 2.0]];
        assert!((mae(&p, &t).unwrap() - 90.0).abs() < 1e-12);
    }

    #[test]
    fn mae_scale_invariant() {
        let p = [[0.2, 0.1, 0.97], [0.4, -0.3, 0.8]];
        let t = [[0.0, 0.0, 1.0], [0.1, 0.1, 0.9]];
        let scaled: Vec<_> = p.iter().map(|v| [v[0] * 7.3, v[1] * 7.3, v[2] * 7.3]).collect();
        let (a, b) = (mae(&p, &t).unwrap(), mae(&scaled, &t).unwrap());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mae_of_constructed_rotations() {
        let base = [0.0, 0.0, 1.0];
        let p: Vec<_> = [10.0, 20.0, 30.0].iter().map(|&d| rotate_x(base, d)).collect();
        let t = vec![base; 3];
        assert!((mae(&p, &t).unwrap() - 20.0).abs() < 1e-6);
    }

    #[test]
    fn mae_rejects_zero_and_mismatch() {
        assert!(mae(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]).is_err());
        assert!(mae(&[[1.0, 0.0, 0.0]], &[]).is_err());
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2, 3], &[0, 0, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
    }

    proptest! {
        #[test]
        fn gaze_vectors_are_unit(x in 0.0f64..1920.0, y in 0.0f64..1080.0) {
            let v = ScreenGeometry::default().screen_to_gaze_vector([x, y]).unwrap();
            prop_assert!((norm(&v) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn gaze_x_is_monotone(x in 0.0f64..1900.0, dx in 0.01f64..20.0, y in 0.0f64..1080.0) {
            let g = ScreenGeometry::default();
            let a = g.screen_to_gaze_vector([x, y]).unwrap();
            let b = g.screen_to_gaze_vector([x + dx, y]).unwrap();
            prop_assert!(b[0] > a[0]);
        }

        #[test]
        fn mae_permutation_invariant(seed in 0u64..100) {
            use rand::{Rng, SeedableRng, seq::SliceRandom};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut pairs: Vec<([f64; 3], [f64; 3])> = (0..10).map(|_| {
                let mut v = || [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)];
                (v(), v())
            }).collect();
            let (p, t): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let a = mae(&p, &t).unwrap();
            pairs.shuffle(&mut rng);
            let (p, t): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            prop_assert!((a - mae(&p, &t).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn accuracy_in_unit_interval(v in proptest::collection::vec((0u8..4, 0u8..4), 1..50)) {
            let (a, b): (Vec<_>, Vec<_>) = v.into_iter().unzip();
            let acc = accuracy(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
        }
    }
}
