//! Epipolar and homography mathematics.
//!
//! Coordinates are pixels with the origin at the top-left of the image,
//! x pointing right and y pointing down; integer coordinates index pixel
//! centers.

mod epipolar;
mod ground_truth;
mod homography;
mod ransac;
mod supervision;

pub use epipolar::{
    fundamental_from_pose, sampson_batch, sampson_distance, sampson_distance_grad,
    FundamentalMatrix, PoseRecord, RelativePose,
};
pub use ground_truth::{DenseCorrespondence, GroundTruth};
pub use homography::{corner_error, fit_homography, gt_correspondences_from_homography, Homography};
pub use ransac::{estimate_homography_ransac, RansacConfig, RansacResult};
pub use supervision::Supervision;

use serde::{Deserialize, Serialize};

/// A point correspondence between image A and image B.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Match {
    pub xa: f64,
    pub ya: f64,
    pub xb: f64,
    pub yb: f64,
}

impl Match {
    pub const fn new(xa: f64, ya: f64, xb: f64, yb: f64) -> Self {
        Self { xa, ya, xb, yb }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.xa, self.ya, self.xb, self.yb]
    }

    pub fn a(&self) -> (f64, f64) {
        (self.xa, self.ya)
    }

    pub fn b(&self) -> (f64, f64) {
        (self.xb, self.yb)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Componentwise sum with a 4-vector offset `(dxa, dya, dxb, dyb)`.
    pub fn offset(&self, delta: [f64; 4]) -> Self {
        Self::new(
            self.xa + delta[0],
            self.ya + delta[1],
            self.xb + delta[2],
            self.yb + delta[3],
        )
    }

    /// Swaps the roles of the two images.
    pub fn swapped(&self) -> Self {
        Self::new(self.xb, self.yb, self.xa, self.ya)
    }
}
