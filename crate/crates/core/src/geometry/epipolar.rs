use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::Match;
use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-6;
const DENOM_EPS: f64 = 1e-12;

/// Relative pose of camera B with respect to camera A, plus both intrinsics.
///
/// A 3D point `X` in camera-A coordinates projects to `K_a X` in image A and
/// to `K_b (R X + t)` in image B.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativePose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    intrinsics_a: Matrix3<f64>,
    intrinsics_b: Matrix3<f64>,
}

impl RelativePose {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        intrinsics_a: Matrix3<f64>,
        intrinsics_b: Matrix3<f64>,
    ) -> Result<Self> {
        let rtr = rotation.transpose() * rotation;
        if (rtr - Matrix3::identity()).amax() > ORTHO_TOL
            || (rotation.determinant() - 1.0).abs() > ORTHO_TOL
        {
            return Err(Error::DegeneratePose(
                "rotation is not orthonormal with determinant +1".into(),
            ));
        }
        for (name, k) in [("K_a", &intrinsics_a), ("K_b", &intrinsics_b)] {
            let upper = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0;
            if !upper || k[(2, 2)] != 1.0 || k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
                return Err(Error::DegeneratePose(format!(
                    "{name} must be upper-triangular with positive focal entries and bottom row (0,0,1)"
                )));
            }
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::DegeneratePose("translation is not finite".into()));
        }
        Ok(Self {
            rotation,
            translation,
            intrinsics_a,
            intrinsics_b,
        })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn intrinsics_a(&self) -> &Matrix3<f64> {
        &self.intrinsics_a
    }

    pub fn intrinsics_b(&self) -> &Matrix3<f64> {
        &self.intrinsics_b
    }

    /// Projects a camera-A 3D point into both images.
    pub fn project(&self, point: &Vector3<f64>) -> Option<Match> {
        let pa = self.intrinsics_a * point;
        let pb = self.intrinsics_b * (self.rotation * point + self.translation);
        if pa.z <= 0.0 || pb.z <= 0.0 {
            return None;
        }
        Some(Match::new(pa.x / pa.z, pa.y / pa.z, pb.x / pb.z, pb.y / pb.z))
    }
}

/// JSON pose record: row-major 3x3 matrices and a 3-vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    #[serde(rename = "K_a")]
    pub k_a: [f64; 9],
    #[serde(rename = "K_b")]
    pub k_b: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl PoseRecord {
    pub fn to_pose(&self) -> Result<RelativePose> {
        RelativePose::new(
            Matrix3::from_row_slice(&self.r),
            Vector3::from_column_slice(&self.t),
            Matrix3::from_row_slice(&self.k_a),
            Matrix3::from_row_slice(&self.k_b),
        )
    }

    pub fn from_pose(pose: &RelativePose) -> Self {
        let rows = |m: &Matrix3<f64>| {
            let mut out = [0.0; 9];
            for r in 0..3 {
                for c in 0..3 {
                    out[r * 3 + c] = m[(r, c)];
                }
            }
            out
        };
        Self {
            k_a: rows(&pose.intrinsics_a),
            k_b: rows(&pose.intrinsics_b),
            r: rows(&pose.rotation),
            t: [pose.translation.x, pose.translation.y, pose.translation.z],
        }
    }
}

/// Rank-2 fundamental matrix in pixel coordinates, stored with unit
/// Frobenius norm. `p_b^T F p_a = 0` for corresponding points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix {
    matrix: Matrix3<f64>,
}

impl FundamentalMatrix {
    /// Projects `m` onto the rank-2 manifold and normalizes it.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::DegeneratePose("fundamental matrix is not finite".into()));
        }
        let mut svd = m.svd(true, true);
        // nalgebra sorts singular values in decreasing order.
        svd.singular_values[2] = 0.0;
        let rank2 = svd
            .recompose()
            .map_err(|e| Error::DegeneratePose(e.to_string()))?;
        let norm = rank2.norm();
        if norm == 0.0 {
            return Err(Error::DegeneratePose("fundamental matrix is zero".into()));
        }
        Ok(Self {
            matrix: rank2 / norm,
        })
    }

    /// Wraps a matrix without projection or normalization.
    pub fn from_raw(matrix: Matrix3<f64>) -> Self {
        Self { matrix }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn transpose(&self) -> Self {
        Self {
            matrix: self.matrix.transpose(),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            matrix: self.matrix * s,
        }
    }
}

fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// `F = K_b^-T [t]x R K_a^-1`, projected to rank 2 and unit Frobenius norm.
pub fn fundamental_from_pose(pose: &RelativePose) -> Result<FundamentalMatrix> {
    if pose.translation.norm() == 0.0 {
        return Err(Error::DegeneratePose(
            "zero translation leaves epipolar geometry undefined".into(),
        ));
    }
    let ka_inv = pose
        .intrinsics_a
        .try_inverse()
        .ok_or_else(|| Error::DegeneratePose("K_a not invertible".into()))?;
    let kb_inv = pose
        .intrinsics_b
        .try_inverse()
        .ok_or_else(|| Error::DegeneratePose("K_b not invertible".into()))?;
    let essential = skew(&pose.translation) * pose.rotation;
    FundamentalMatrix::new(kb_inv.transpose() * essential * ka_inv)
}

struct SampsonTerms {
    algebraic: f64,
    fa: Vector3<f64>,
    ftb: Vector3<f64>,
    denom: f64,
}

fn sampson_terms(m: &Match, f: &FundamentalMatrix) -> Result<SampsonTerms> {
    let pa = Vector3::new(m.xa, m.ya, 1.0);
    let pb = Vector3::new(m.xb, m.yb, 1.0);
    let fa = f.matrix * pa;
    let ftb = f.matrix.transpose() * pb;
    let terms = [fa.x * fa.x, fa.y * fa.y, ftb.x * ftb.x, ftb.y * ftb.y];
    if terms.iter().all(|t| *t < DENOM_EPS) {
        return Err(Error::UndefinedDistance);
    }
    Ok(SampsonTerms {
        algebraic: pb.dot(&fa),
        fa,
        ftb,
        denom: terms.iter().sum(),
    })
}

/// First-order geometric error of `m` with respect to `f`, in squared pixels.
pub fn sampson_distance(m: &Match, f: &FundamentalMatrix) -> Result<f64> {
    let t = sampson_terms(m, f)?;
    Ok(t.algebraic * t.algebraic / t.denom)
}

/// Sampson distance together with its gradient with respect to
/// `(xa, ya, xb, yb)`.
pub fn sampson_distance_grad(m: &Match, f: &FundamentalMatrix) -> Result<(f64, [f64; 4])> {
    let t = sampson_terms(m, f)?;
    let fm = &f.matrix;
    let e = t.algebraic;
    let d = t.denom;
    let de = [t.ftb.x, t.ftb.y, t.fa.x, t.fa.y];
    let dd = [
        2.0 * (t.fa.x * fm[(0, 0)] + t.fa.y * fm[(1, 0)]),
        2.0 * (t.fa.x * fm[(0, 1)] + t.fa.y * fm[(1, 1)]),
        2.0 * (t.ftb.x * fm[(0, 0)] + t.ftb.y * fm[(0, 1)]),
        2.0 * (t.ftb.x * fm[(1, 0)] + t.ftb.y * fm[(1, 1)]),
    ];
    let mut g = [0.0; 4];
    for k in 0..4 {
        g[k] = 2.0 * e * de[k] / d - e * e * dd[k] / (d * d);
    }
    Ok((e * e / d, g))
}

/// Elementwise Sampson distances; `None` marks an undefined element.
pub fn sampson_batch(matches: &[Match], f: &FundamentalMatrix) -> Vec<Option<f64>> {
    matches
        .iter()
        .map(|m| sampson_distance(m, f).ok())
        .collect()
}
