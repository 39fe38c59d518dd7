use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb};
use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::geometry::{Homography, PoseRecord};
use crate::image::Image;

const ASPECT: f64 = 1.5;

/// A preprocessed image and the map from original to new pixel
/// coordinates, `x' = scale * (x + 0.5) - 0.5` (the crop only removes the
/// right or bottom edge).
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub image: Image,
    pub crop: (usize, usize),
    pub scale: (f64, f64),
}

impl Preprocessed {
    /// Original-to-new pixel transform as a 3x3 matrix.
    pub fn transform(&self) -> Matrix3<f64> {
        let (sx, sy) = self.scale;
        Matrix3::new(sx, 0.0, 0.5 * sx - 0.5, 0.0, sy, 0.5 * sy - 0.5, 0.0, 0.0, 1.0)
    }

    pub fn map_point(&self, x: f64, y: f64) -> (f64, f64) {
        (self.scale.0 * (x + 0.5) - 0.5, self.scale.1 * (y + 0.5) - 0.5)
    }
}

/// Crops the right or bottom edge to a 3:2 aspect ratio, then resizes to
/// `target` with a triangle filter. Conforming images pass through
/// unchanged.
pub fn preprocess(image: &Image, target: (usize, usize)) -> Result<Preprocessed> {
    let (w, h) = (image.width, image.height);
    if w == 0 || h == 0 || target.0 == 0 || target.1 == 0 {
        return Err(Error::Shape("empty image or target size".into()));
    }
    let crop = if (w as f64) > ASPECT * h as f64 {
        (((h as f64) * ASPECT).round() as usize, h)
    } else {
        (w, ((w as f64) / ASPECT).round() as usize)
    };
    let scale = (target.0 as f64 / crop.0 as f64, target.1 as f64 / crop.1 as f64);
    if crop == (w, h) && (w, h) == target {
        return Ok(Preprocessed {
            image: image.clone(),
            crop,
            scale,
        });
    }
    let mut buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::new(crop.0 as u32, crop.1 as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        *px = Rgb([0, 1, 2].map(|c| image.get(c, x as usize, y as usize)));
    }
    let resized = imageops::resize(&buf, target.0 as u32, target.1 as u32, FilterType::Triangle);
    let mut out = Image::new(target.0, target.1);
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, x as usize, y as usize, px.0[c].clamp(0.0, 1.0));
        }
    }
    Ok(Preprocessed {
        image: out,
        crop,
        scale,
    })
}

/// Homography between the preprocessed frames of A and B.
pub fn remap_homography(h: &Homography, a: &Preprocessed, b: &Preprocessed) -> Result<Homography> {
    let ta_inv = a
        .transform()
        .try_inverse()
        .ok_or_else(|| Error::Shape("degenerate preprocessing scale".into()))?;
    Homography::new(b.transform() * h.matrix() * ta_inv)
}

/// Pose with intrinsics moved into the preprocessed frames.
pub fn remap_pose(pose: &PoseRecord, a: &Preprocessed, b: &Preprocessed) -> PoseRecord {
    let apply = |t: Matrix3<f64>, k: &[f64; 9]| {
        let m = t * Matrix3::from_row_slice(k);
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = m[(r, c)];
            }
        }
        out
    };
    PoseRecord {
        k_a: apply(a.transform(), &pose.k_a),
        k_b: apply(b.transform(), &pose.k_b),
        r: pose.r,
        t: pose.t,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_scene;
    use crate::geometry::{fundamental_from_pose, gt_correspondences_from_homography, sampson_distance, Match};

    #[test]
    fn crop_and_scale_factors() {
        let p = preprocess(&Image::new(1500, 1000), (480, 320)).unwrap();
        assert_eq!(p.crop, (1500, 1000));
        assert!((p.scale.0 - 0.32).abs() < 1e-12 && (p.scale.1 - 0.32).abs() < 1e-12);
        let p = preprocess(&Image::new(1600, 1000), (480, 320)).unwrap();
        assert_eq!(p.crop, (1500, 1000));
        let p = preprocess(&Image::new(900, 1000), (480, 320)).unwrap();
        assert_eq!(p.crop, (900, 600));
        assert_eq!((p.image.width, p.image.height), (480, 320));
    }

    #[test]
    fn conforming_images_are_untouched() {
        let img = generate_scene(96, 64, 1);
        let p = preprocess(&img, (96, 64)).unwrap();
        assert_eq!(p.image, img);
        assert_eq!(preprocess(&p.image, (96, 64)).unwrap(), p);
    }

    #[test]
    fn homography_remap_composes_crop_and_scale() {
        let h = Homography::new(Matrix3::new(1.02, 0.01, 5.0, -0.02, 0.98, 3.0, 1e-5, 2e-5, 1.0)).unwrap();
        let a = preprocess(&Image::new(300, 200), (150, 100)).unwrap();
        let b = preprocess(&Image::new(320, 200), (96, 64)).unwrap();
        let h2 = remap_homography(&h, &a, &b).unwrap();
        for m in gt_correspondences_from_homography(&h, 20, (300, 200)) {
            let (xa, ya) = a.map_point(m.xa, m.ya);
            let (xb, yb) = b.map_point(m.xb, m.yb);
            let (u, v) = h2.transfer(xa, ya);
            assert!((u - xb).abs() < 1e-9 && (v - yb).abs() < 1e-9);
        }
    }

    #[test]
    fn pose_remap_keeps_epipolar_constraint() {
        let (c, s) = (0.1f64.cos(), 0.1f64.sin());
        let rec = PoseRecord {
            k_a: [500.0, 0.0, 320.0, 0.0, 500.0, 240.0, 0.0, 0.0, 1.0],
            k_b: [450.0, 0.0, 300.0, 0.0, 450.0, 250.0, 0.0, 0.0, 1.0],
            r: [1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c],
            t: [0.3, 0.1, 1.0],
        };
        let pose = rec.to_pose().unwrap();
        let a = preprocess(&Image::new(640, 480), (480, 320)).unwrap();
        let b = preprocess(&Image::new(700, 480), (480, 320)).unwrap();
        let f2 = fundamental_from_pose(&remap_pose(&rec, &a, &b).to_pose().unwrap()).unwrap();
        for i in 0..20 {
            let pt = nalgebra::Vector3::new(i as f64 * 0.1 - 1.0, 0.5 - i as f64 * 0.05, 4.0 + i as f64 * 0.2);
            if let Some(m) = pose.project(&pt) {
                let (xa, ya) = a.map_point(m.xa, m.ya);
                let (xb, yb) = b.map_point(m.xb, m.yb);
                assert!(sampson_distance(&Match::new(xa, ya, xb, yb), &f2).unwrap() < 1e-8);
            }
        }
    }
}
