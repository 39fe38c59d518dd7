use super::{gt_correspondences_from_homography, Homography, Match};

/// Per-pixel correspondence map from image A into image B. Pixels without a
/// valid correspondence hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCorrespondence {
    pub width: usize,
    pub height: usize,
    pub targets: Vec<Option<(f64, f64)>>,
}

impl DenseCorrespondence {
    pub fn from_homography(h: &Homography, width: usize, height: usize) -> Self {
        let mut targets = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = h.transfer(x as f64, y as f64);
                let inside = u.is_finite()
                    && v.is_finite()
                    && (0.0..=(width - 1) as f64).contains(&u)
                    && (0.0..=(height - 1) as f64).contains(&v);
                targets.push(inside.then_some((u, v)));
            }
        }
        Self {
            width,
            height,
            targets,
        }
    }

    /// Nearest-pixel lookup.
    pub fn lookup(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let (xi, yi) = (x.round(), y.round());
        if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
            return None;
        }
        self.targets[yi as usize * self.width + xi as usize]
    }
}

/// Ground truth used for evaluation and the oracle matcher.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    Homography(Homography),
    Dense(DenseCorrespondence),
}

impl GroundTruth {
    /// Where a point of image A lands in image B, if known.
    pub fn transfer(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        match self {
            GroundTruth::Homography(h) => {
                let (u, v) = h.transfer(x, y);
                (u.is_finite() && v.is_finite()).then_some((u, v))
            }
            GroundTruth::Dense(d) => d.lookup(x, y),
        }
    }

    /// Euclidean transfer error `|gt(p_a) - p_b|`; infinite when unknown.
    pub fn transfer_error(&self, m: &Match) -> f64 {
        match self.transfer(m.xa, m.ya) {
            Some((u, v)) => ((u - m.xb).powi(2) + (v - m.yb).powi(2)).sqrt(),
            None => f64::INFINITY,
        }
    }

    /// Grid correspondences (see [`gt_correspondences_from_homography`]).
    pub fn correspondences(&self, grid_step: usize, image_size: (usize, usize)) -> Vec<Match> {
        match self {
            GroundTruth::Homography(h) => gt_correspondences_from_homography(h, grid_step, image_size),
            GroundTruth::Dense(d) => {
                let step = grid_step.max(1);
                let mut out = Vec::new();
                for y in (0..d.height).step_by(step) {
                    for x in (0..d.width).step_by(step) {
                        if let Some((u, v)) = d.targets[y * d.width + x] {
                            out.push(Match::new(x as f64, y as f64, u, v));
                        }
                    }
                }
                out
            }
        }
    }

    /// Correspondences for every pixel of A whose target is a valid pixel
    /// position of B (`[0, W-1] x [0, H-1]`).
    pub fn pixel_correspondences(&self, image_size: (usize, usize)) -> Vec<Match> {
        let (w, h) = ((image_size.0 - 1) as f64, (image_size.1 - 1) as f64);
        let mut out = Vec::new();
        for y in 0..image_size.1 {
            for x in 0..image_size.0 {
                if let Some((u, v)) = self.transfer(x as f64, y as f64) {
                    if (0.0..=w).contains(&u) && (0.0..=h).contains(&v) {
                        out.push(Match::new(x as f64, y as f64, u, v));
                    }
                }
            }
        }
        out
    }

    pub fn homography(&self) -> Option<&Homography> {
        match self {
            GroundTruth::Homography(h) => Some(h),
            GroundTruth::Dense(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_from_homography_agrees_on_pixels() {
        let h = Homography::translation(2.0, 1.0);
        let d = DenseCorrespondence::from_homography(&h, 8, 6);
        let gt = GroundTruth::Dense(d);
        assert_eq!(gt.transfer(1.0, 1.0), Some((3.0, 2.0)));
        assert_eq!(gt.transfer(7.0, 1.0), None);
        assert_eq!(gt.transfer(-1.0, 0.0), None);
        let pix = GroundTruth::Homography(h).pixel_correspondences((8, 6));
        assert_eq!(pix.len(), 6 * 5);
        assert_eq!(gt.correspondences(1, (8, 6)).len(), pix.len());
    }
}
