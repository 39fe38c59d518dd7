use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{PairSupervision, TrainingPair};
use crate::error::{Error, Result};
use crate::geometry::{fit_homography, Homography, Match};
use crate::image::Image;

const MAX_WARP_ATTEMPTS: usize = 10;

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Adds one octave of bilinear value noise with cell size `cell` to channel
/// `c`.
fn add_value_noise(img: &mut Image, c: usize, cell: f64, amplitude: f64, rng: &mut impl Rng) {
    let gw = (img.width as f64 / cell).ceil() as usize + 2;
    let gh = (img.height as f64 / cell).ceil() as usize + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for y in 0..img.height {
        let fy = y as f64 / cell;
        let (gy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..img.width {
            let fx = x as f64 / cell;
            let (gx, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let g = |i: usize, j: usize| grid[j * gw + i];
            let top = g(gx, gy) * (1.0 - tx) + g(gx + 1, gy) * tx;
            let bot = g(gx, gy + 1) * (1.0 - tx) + g(gx + 1, gy + 1) * tx;
            let v = img.get(c, x, y) as f64 + amplitude * (top * (1.0 - ty) + bot * ty);
            img.set(c, x, y, v as f32);
        }
    }
}

fn blend(img: &mut Image, x: usize, y: usize, color: [f64; 3], alpha: f64) {
    for (c, &col) in color.iter().enumerate() {
        let v = img.get(c, x, y) as f64 * (1.0 - alpha) + col * alpha;
        img.set(c, x, y, v as f32);
    }
}

/// Procedural textured scene: multi-scale colored value noise overlaid with
/// random rectangles, discs and strokes.
pub fn generate_scene(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::filled(width, height, 0.5);
    for c in 0..3 {
        for (cell, amp) in [(48.0, 0.25), (16.0, 0.15), (6.0, 0.1), (2.5, 0.06)] {
            add_value_noise(&mut img, c, cell, amp, &mut rng);
        }
    }
    let n_shapes = (width * height / 700).max(8);
    let (wf, hf) = (width as f64, height as f64);
    for _ in 0..n_shapes {
        let color = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let alpha = rng.gen_range(0.5..1.0);
        let cx = rng.gen_range(0.0..wf);
        let cy = rng.gen_range(0.0..hf);
        let size = rng.gen_range(3.0..(wf.min(hf) / 5.0).max(4.0));
        match rng.gen_range(0..3) {
            0 => {
                let (hw, hh) = (size * rng.gen_range(0.3..1.0), size * rng.gen_range(0.3..1.0));
                for y in (cy - hh).max(0.0) as usize..((cy + hh).min(hf - 1.0)) as usize + 1 {
                    for x in (cx - hw).max(0.0) as usize..((cx + hw).min(wf - 1.0)) as usize + 1 {
                        blend(&mut img, x, y, color, alpha);
                    }
                }
            }
            1 => {
                let r = size * 0.7;
                for y in (cy - r).max(0.0) as usize..((cy + r).min(hf - 1.0)) as usize + 1 {
                    for x in (cx - r).max(0.0) as usize..((cx + r).min(wf - 1.0)) as usize + 1 {
                        if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r {
                            blend(&mut img, x, y, color, alpha);
                        }
                    }
                }
            }
            _ => {
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let len = size * 2.0;
                let steps = (len * 2.0) as usize + 1;
                for i in 0..steps {
                    let t = i as f64 / steps as f64 - 0.5;
                    let (px, py) = (cx + t * len * angle.cos(), cy + t * len * angle.sin());
                    for (dx, dy) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)] {
                        let (x, y) = ((px + dx).round(), (py + dy).round());
                        if x >= 0.0 && y >= 0.0 && x < wf && y < hf {
                            blend(&mut img, x as usize, y as usize, color, alpha);
                        }
                    }
                }
            }
        }
    }
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img.quantized()
}

/// Image corners in drawing order (clockwise in image coordinates).
fn corners(width: usize, height: usize) -> [(f64, f64); 4] {
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)]
}

/// True when the quad keeps the orientation of the image rectangle and is
/// strictly convex.
fn is_valid_quad(q: &[(f64, f64); 4]) -> bool {
    (0..4).all(|i| {
        let (a, b, c) = (q[i], q[(i + 1) % 4], q[(i + 2) % 4]);
        let cross = (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0);
        cross > 1e-6
    })
}

/// Random homography moving each image corner by up to
/// `magnitude * (W, H)`.
pub fn random_homography(
    width: usize,
    height: usize,
    magnitude: f64,
    rng: &mut impl Rng,
) -> Result<Homography> {
    if magnitude <= 0.0 {
        return Ok(Homography::identity());
    }
    let src = corners(width, height);
    let (mx, my) = (magnitude * width as f64, magnitude * height as f64);
    for _ in 0..MAX_WARP_ATTEMPTS {
        let dst = src.map(|(x, y)| (x + rng.gen_range(-mx..=mx), y + rng.gen_range(-my..=my)));
        if !is_valid_quad(&dst) {
            continue;
        }
        let ms: Vec<Match> = src.iter().zip(&dst).map(|(s, d)| Match::new(s.0, s.1, d.0, d.1)).collect();
        match fit_homography(&ms) {
            Ok(h) if h.is_invertible() => return Ok(h),
            _ => continue,
        }
    }
    Err(Error::DegenerateWarp {
        attempts: MAX_WARP_ATTEMPTS,
    })
}

/// Resamples `src` so that output pixel `p` shows `src(h^-1 p)`.
pub fn warp_image(src: &Image, h: &Homography) -> Result<Image> {
    let inv = h
        .inverse()
        .ok_or_else(|| Error::EstimationFailure("warp homography is singular".into()))?;
    let mut out = Image::new(src.width, src.height);
    for y in 0..src.height {
        for x in 0..src.width {
            let (u, v) = inv.transfer(x as f64, y as f64);
            for c in 0..3 {
                out.set(c, x, y, src.sample_bilinear(c, u, v));
            }
        }
    }
    Ok(out)
}

/// Warps `base` by a random homography and applies brightness/contrast
/// jitter to the result; the pair is supervised by the exact homography.
pub fn synth_pair(
    base: &Image,
    warp_magnitude: f64,
    photometric_jitter: f64,
    seed: u64,
) -> Result<TrainingPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = random_homography(base.width, base.height, warp_magnitude, &mut rng)?;
    let mut image_b = warp_image(base, &h)?;
    if photometric_jitter > 0.0 {
        let contrast = 1.0 + rng.gen_range(-photometric_jitter..=photometric_jitter);
        let brightness = rng.gen_range(-photometric_jitter..=photometric_jitter) / 2.0;
        for v in &mut image_b.data {
            *v = (((*v as f64 - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0)) as f32;
        }
    }
    Ok(TrainingPair {
        id: format!("synth_{seed:016x}"),
        image_a: base.quantized(),
        image_b: image_b.quantized(),
        supervision: PairSupervision::Homography(h),
        overlap_tag: None,
    })
}
