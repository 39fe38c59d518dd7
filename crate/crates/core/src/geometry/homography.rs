use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::Match;
use crate::error::{Error, Result};

/// Planar projective transform from image A to image B.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 9]", into = "[f64; 9]")]
pub struct Homography {
    matrix: Matrix3<f64>,
}

impl TryFrom<[f64; 9]> for Homography {
    type Error = Error;

    fn try_from(v: [f64; 9]) -> Result<Self> {
        Homography::new(Matrix3::from_row_slice(&v))
    }
}

impl From<Homography> for [f64; 9] {
    fn from(h: Homography) -> Self {
        h.to_row_major()
    }
}

impl Homography {
    /// Normalizes `matrix` so that entry (3,3) is one when it is nonzero and
    /// rejects non-invertible input.
    pub fn new(matrix: Matrix3<f64>) -> Result<Self> {
        let h = Self::normalized(matrix);
        if !h.is_invertible() {
            return Err(Error::EstimationFailure("homography is not invertible".into()));
        }
        Ok(h)
    }

    fn normalized(matrix: Matrix3<f64>) -> Self {
        let s = matrix[(2, 2)];
        let matrix = if s.abs() > 1e-12 { matrix / s } else { matrix };
        Self { matrix }
    }

    /// Normalizes without the invertibility check; used for estimates.
    pub fn new_unchecked(matrix: Matrix3<f64>) -> Self {
        Self::normalized(matrix)
    }

    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            matrix: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    pub fn scaling(sx: f64, sy: f64) -> Self {
        Self {
            matrix: Matrix3::new(sx, 0.0, 0.0, 0.0, sy, 0.0, 0.0, 0.0, 1.0),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.matrix[(r, c)];
            }
        }
        out
    }

    pub fn is_invertible(&self) -> bool {
        if !self.matrix.iter().all(|v| v.is_finite()) {
            return false;
        }
        let sv = self.matrix.singular_values();
        sv[0].is_finite() && sv[2] > 1e-12 * sv[0]
    }

    pub fn inverse(&self) -> Option<Self> {
        if !self.is_invertible() {
            return None;
        }
        self.matrix.try_inverse().map(Self::normalized)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Self {
        Self::normalized(self.matrix * other.matrix)
    }

    /// Maps a point with homogeneous normalization. The result is non-finite
    /// when the point maps to infinity.
    pub fn transfer(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.matrix * Vector3::new(x, y, 1.0);
        (p.x / p.z, p.y / p.z)
    }

    /// Transfer plus its 2x2 Jacobian `[[du/dx, du/dy], [dv/dx, dv/dy]]`.
    pub fn transfer_jacobian(&self, x: f64, y: f64) -> ((f64, f64), [[f64; 2]; 2]) {
        let h = &self.matrix;
        let p = h * Vector3::new(x, y, 1.0);
        let w2 = p.z * p.z;
        let j = [
            [
                (h[(0, 0)] * p.z - p.x * h[(2, 0)]) / w2,
                (h[(0, 1)] * p.z - p.x * h[(2, 1)]) / w2,
            ],
            [
                (h[(1, 0)] * p.z - p.y * h[(2, 0)]) / w2,
                (h[(1, 1)] * p.z - p.y * h[(2, 1)]) / w2,
            ],
        ];
        ((p.x / p.z, p.y / p.z), j)
    }

    /// Forward transfer error `|H p_a - p_b|` of a match.
    pub fn transfer_error(&self, m: &Match) -> f64 {
        let (x, y) = self.transfer(m.xa, m.ya);
        let d = ((x - m.xb).powi(2) + (y - m.yb).powi(2)).sqrt();
        if d.is_finite() {
            d
        } else {
            f64::INFINITY
        }
    }
}

/// Correspondences on a regular grid of image A whose images under `h` land
/// inside image B. Both images share `image_size`; the grid and the inside
/// test use the continuous extent `[0, W] x [0, H]`.
pub fn gt_correspondences_from_homography(
    h: &Homography,
    grid_step: usize,
    image_size: (usize, usize),
) -> Vec<Match> {
    let step = grid_step.max(1);
    let (w, hgt) = (image_size.0 as f64, image_size.1 as f64);
    let mut out = Vec::new();
    for y in (0..=image_size.1).step_by(step) {
        for x in (0..=image_size.0).step_by(step) {
            let (xa, ya) = (x as f64, y as f64);
            let (xb, yb) = h.transfer(xa, ya);
            if xb.is_finite() && yb.is_finite() && (0.0..=w).contains(&xb) && (0.0..=hgt).contains(&yb)
            {
                out.push(Match::new(xa, ya, xb, yb));
            }
        }
    }
    out
}

/// Mean distance between the four image corners mapped by the estimate and
/// by the ground truth. Returns infinity for a non-invertible estimate.
pub fn corner_error(h_est: &Homography, h_gt: &Homography, image_size: (usize, usize)) -> f64 {
    if !h_est.is_invertible() {
        return f64::INFINITY;
    }
    let (w, h) = (image_size.0 as f64 - 1.0, image_size.1 as f64 - 1.0);
    let corners = [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)];
    let mut total = 0.0;
    for (x, y) in corners {
        let (ex, ey) = h_est.transfer(x, y);
        let (gx, gy) = h_gt.transfer(x, y);
        total += ((ex - gx).powi(2) + (ey - gy).powi(2)).sqrt();
    }
    let mean = total / 4.0;
    if mean.is_finite() {
        mean
    } else {
        f64::INFINITY
    }
}

fn normalizing_transform(points: impl Iterator<Item = (f64, f64)> + Clone) -> Matrix3<f64> {
    let n = points.clone().count().max(1) as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    let (cx, cy) = (sx / n, sy / n);
    let mean_dist = points
        .map(|(x, y)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_dist > 1e-12 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Normalized DLT least-squares fit over all given matches (at least 4).
pub fn fit_homography(matches: &[Match]) -> Result<Homography> {
    if matches.len() < 4 {
        return Err(Error::EstimationFailure(format!(
            "need at least 4 matches, got {}",
            matches.len()
        )));
    }
    let ta = normalizing_transform(matches.iter().map(|m| (m.xa, m.ya)));
    let tb = normalizing_transform(matches.iter().map(|m| (m.xb, m.yb)));
    let rows = (2 * matches.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, m) in matches.iter().enumerate() {
        let pa = ta * Vector3::new(m.xa, m.ya, 1.0);
        let pb = tb * Vector3::new(m.xb, m.yb, 1.0);
        let (x, y) = (pa.x, pa.y);
        let (u, v) = (pb.x, pb.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::EstimationFailure("SVD failed".into()))?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &s)| if s < best.1 { (i, s) } else { best });
    let row = v_t.row(min_idx);
    let hn = Matrix3::new(row[0], row[1], row[2], row[3], row[4], row[5], row[6], row[7], row[8]);
    let tb_inv = tb
        .try_inverse()
        .ok_or_else(|| Error::EstimationFailure("degenerate normalization".into()))?;
    let h = Homography::new_unchecked(tb_inv * hn * ta);
    if !h.is_invertible() {
        return Err(Error::EstimationFailure("fitted homography is singular".into()));
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_homography(rng: &mut ChaCha8Rng) -> Homography {
        Homography::new(Matrix3::new(
            1.0 + rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-0.1..0.1),
            1.0 + rng.gen_range(-0.1..0.1),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-2e-4..2e-4),
            rng.gen_range(-2e-4..2e-4),
            1.0,
        ))
        .unwrap()
    }

    #[test]
    fn identity_grid() {
        let m = gt_correspondences_from_homography(&Homography::identity(), 5, (10, 10));
        assert_eq!(m.len(), 9);
        assert_eq!(m[0], Match::new(0.0, 0.0, 0.0, 0.0));
        assert_eq!(m[1], Match::new(5.0, 0.0, 5.0, 0.0));
        assert!(m.iter().all(|m| m.xa == m.xb && m.ya == m.yb));
    }

    #[test]
    fn translated_grid_drops_points_outside() {
        let m = gt_correspondences_from_homography(&Homography::translation(3.0, 0.0), 5, (10, 10));
        assert_eq!(m[0], Match::new(0.0, 0.0, 3.0, 0.0));
        assert_eq!(m[1], Match::new(5.0, 0.0, 8.0, 0.0));
        assert!(m.iter().all(|m| m.xb <= 10.0));
        assert_eq!(m.len(), 6);
    }

    #[test]
    fn random_projective_grid_transfers_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let h = random_homography(&mut rng);
            for m in gt_correspondences_from_homography(&h, 7, (120, 80)) {
                // Re-apply through an independent matrix-vector product.
                let p = h.matrix() * Vector3::new(m.xa, m.ya, 1.0);
                assert!((p.x / p.z - m.xb).abs() < 1e-9);
                assert!((p.y / p.z - m.yb).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn corner_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = random_homography(&mut rng);
        assert_eq!(corner_error(&gt, &gt, (100, 80)), 0.0);
        let shifted = Homography::translation(2.0, 0.0).compose(&gt);
        assert!((corner_error(&shifted, &gt, (100, 80)) - 2.0).abs() < 1e-9);
        let singular = Homography::new_unchecked(Matrix3::zeros());
        assert_eq!(corner_error(&singular, &gt, (100, 80)), f64::INFINITY);
    }

    #[test]
    fn corner_error_matches_per_corner_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a = random_homography(&mut rng);
            let b = random_homography(&mut rng);
            let (w, h) = (64.0f64, 48.0f64);
            let mut sum = 0.0;
            for (x, y) in [(0.0, 0.0), (w - 1.0, 0.0), (0.0, h - 1.0), (w - 1.0, h - 1.0)] {
                let pa = a.matrix() * Vector3::new(x, y, 1.0);
                let pb = b.matrix() * Vector3::new(x, y, 1.0);
                sum += ((pa.x / pa.z - pb.x / pb.z).powi(2) + (pa.y / pa.z - pb.y / pb.z).powi(2)).sqrt();
            }
            assert!((corner_error(&a, &b, (64, 48)) - sum / 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dlt_recovers_exact_homography() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_homography(&mut rng);
        let matches = gt_correspondences_from_homography(&h, 20, (200, 120));
        let est = fit_homography(&matches).unwrap();
        assert!(corner_error(&est, &h, (200, 120)) < 1e-8);
        let four: Vec<_> = [0usize, 5, 30, 40].iter().map(|&i| matches[i]).collect();
        let est4 = fit_homography(&four).unwrap();
        assert!(corner_error(&est4, &h, (200, 120)) < 1e-6);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_homography(&mut rng);
        let (x, y) = (37.0, 81.0);
        let (_, j) = h.transfer_jacobian(x, y);
        let e = 1e-5;
        let (u1, v1) = h.transfer(x + e, y);
        let (u0, v0) = h.transfer(x - e, y);
        assert!(((u1 - u0) / (2.0 * e) - j[0][0]).abs() < 1e-7);
        assert!(((v1 - v0) / (2.0 * e) - j[1][0]).abs() < 1e-7);
        let (u1, v1) = h.transfer(x, y + e);
        let (u0, v0) = h.transfer(x, y - e);
        assert!(((u1 - u0) / (2.0 * e) - j[0][1]).abs() < 1e-7);
        assert!(((v1 - v0) / (2.0 * e) - j[1][1]).abs() < 1e-7);
    }

    #[test]
    fn json_is_row_major_array() {
        let h = Homography::translation(3.0, -1.0);
        let s = serde_json::to_string(&h).unwrap();
        assert_eq!(s, "[1.0,0.0,3.0,0.0,1.0,-1.0,0.0,0.0,1.0]");
        let back: Homography = serde_json::from_str(&s).unwrap();
        assert_eq!(back, h);
        assert!(serde_json::from_str::<Homography>("[0,0,0,0,0,0,0,0,0]").is_err());
    }
}
