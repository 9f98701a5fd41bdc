//! Piecewise cubic functions of the bending-plane azimuth.
//!
//! The circle is split into three 120 degree intervals and each carries an
//! independent cubic in the offset from the interval start. No continuity is
//! imposed between pieces.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::kinematics::wrap_angle;
use crate::{Error, Result};

pub const PIECES: usize = 3;
pub const PIECE_WIDTH: f64 = 2.0 * PI / PIECES as f64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseCubic {
    /// `coeffs[k] = [c0, c1, c2, c3]`, evaluated as `c0 + c1 s + c2 s^2 + c3 s^3`
    /// with `s` the offset in radians from the start of piece `k`.
    pub coeffs: [[f64; 4]; PIECES],
}

impl Default for PiecewiseCubic {
    fn default() -> Self {
        Self::constant(0.0)
    }
}

impl PiecewiseCubic {
    pub fn constant(v: f64) -> Self {
        PiecewiseCubic {
            coeffs: [[v, 0.0, 0.0, 0.0]; PIECES],
        }
    }

    /// Piece index and local offset of a (wrapped) angle.
    pub fn locate(phi: f64) -> (usize, f64) {
        let w = wrap_angle(phi);
        let k = ((w / PIECE_WIDTH) as usize).min(PIECES - 1);
        (k, w - k as f64 * PIECE_WIDTH)
    }

    pub fn eval(&self, phi: f64) -> f64 {
        let (k, s) = Self::locate(phi);
        let c = &self.coeffs[k];
        c[0] + s * (c[1] + s * (c[2] + s * c[3]))
    }

    /// Least-squares fit of each piece to the samples `(phi, value)` falling in it.
    pub fn fit(samples: &[(f64, f64)]) -> Result<Self> {
        let mut coeffs = [[0.0; 4]; PIECES];
        for (k, out) in coeffs.iter_mut().enumerate() {
            let pts: Vec<(f64, f64)> = samples
                .iter()
                .map(|&(phi, v)| (Self::locate(phi), v))
                .filter(|((kk, _), _)| *kk == k)
                .map(|((_, s), v)| (s, v))
                .collect();
            if pts.len() < 4 {
                return Err(Error::RankDeficient(format!(
                    "piece {k} has {} samples, 4 required for a cubic",
                    pts.len()
                )));
            }
            let a = DMatrix::from_fn(pts.len(), 4, |r, c| pts[r].0.powi(c as i32));
            let b = DVector::from_iterator(pts.len(), pts.iter().map(|p| p.1));
            let svd = a.svd(true, true);
            let smax = svd.singular_values.max();
            let smin = svd.singular_values.min();
            if !(smin > 1e-12 * smax) {
                return Err(Error::RankDeficient(format!(
                    "piece {k}: sample angles do not determine a cubic"
                )));
            }
            let x = svd
                .solve(&b, 0.0)
                .map_err(|e| Error::NumericalFailure(e.to_string()))?;
            out.copy_from_slice(x.as_slice());
        }
        Ok(PiecewiseCubic { coeffs })
    }

    /// Largest jump between neighbouring pieces at their shared boundary.
    pub fn max_boundary_jump(&self) -> f64 {
        (0..PIECES)
            .map(|k| {
                let c = &self.coeffs[k];
                let s = PIECE_WIDTH;
                let end = c[0] + s * (c[1] + s * (c[2] + s * c[3]));
                (end - self.coeffs[(k + 1) % PIECES][0]).abs()
            })
            .fold(0.0, f64::max)
    }
}
