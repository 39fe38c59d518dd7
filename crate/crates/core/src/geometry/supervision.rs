use super::{sampson_distance, sampson_distance_grad, FundamentalMatrix, Homography, Match};
use crate::error::{Error, Result};

/// Epipolar-style supervision for one image pair.
///
/// Pose-supervised pairs use the Sampson distance directly. Homography pairs
/// (planar scenes, where every compatible F is degenerate) use a symmetric
/// transfer error scaled by 1/4, which agrees with the Sampson distance to
/// first order for near-identity motion: a 2D residual `e` costs `|e|^2 / 2`
/// in both.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Supervision {
    Fundamental(FundamentalMatrix),
    Homography { forward: Homography, inverse: Homography },
}

impl Supervision {
    pub fn from_homography(h: Homography) -> Result<Self> {
        let inverse = h
            .inverse()
            .ok_or_else(|| Error::EstimationFailure("supervision homography is singular".into()))?;
        Ok(Supervision::Homography { forward: h, inverse })
    }

    /// Geometric error in squared pixels.
    pub fn distance(&self, m: &Match) -> Result<f64> {
        match self {
            Supervision::Fundamental(f) => sampson_distance(m, f),
            Supervision::Homography { forward, inverse } => {
                let (u, v) = forward.transfer(m.xa, m.ya);
                let (p, q) = inverse.transfer(m.xb, m.yb);
                let d = ((u - m.xb).powi(2) + (v - m.yb).powi(2) + (p - m.xa).powi(2)
                    + (q - m.ya).powi(2))
                    / 4.0;
                if d.is_finite() {
                    Ok(d)
                } else {
                    Err(Error::UndefinedDistance)
                }
            }
        }
    }

    /// Distance and gradient with respect to `(xa, ya, xb, yb)`.
    pub fn distance_grad(&self, m: &Match) -> Result<(f64, [f64; 4])> {
        match self {
            Supervision::Fundamental(f) => sampson_distance_grad(m, f),
            Supervision::Homography { forward, inverse } => {
                let ((u, v), jf) = forward.transfer_jacobian(m.xa, m.ya);
                let ((p, q), ji) = inverse.transfer_jacobian(m.xb, m.yb);
                let d1 = (u - m.xb, v - m.yb);
                let d2 = (p - m.xa, q - m.ya);
                let d = (d1.0 * d1.0 + d1.1 * d1.1 + d2.0 * d2.0 + d2.1 * d2.1) / 4.0;
                if !d.is_finite() {
                    return Err(Error::UndefinedDistance);
                }
                let g = [
                    (2.0 * (jf[0][0] * d1.0 + jf[1][0] * d1.1) - 2.0 * d2.0) / 4.0,
                    (2.0 * (jf[0][1] * d1.0 + jf[1][1] * d1.1) - 2.0 * d2.1) / 4.0,
                    (2.0 * (ji[0][0] * d2.0 + ji[1][0] * d2.1) - 2.0 * d1.0) / 4.0,
                    (2.0 * (ji[0][1] * d2.0 + ji[1][1] * d2.1) - 2.0 * d1.1) / 4.0,
                ];
                Ok((d, g))
            }
        }
    }
}
