//! Synthetic road scenes with dark elliptical potholes.

use std::f64::consts::PI;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::Mask;

/// Rotated ellipse in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the rotated x direction.
    pub a: f64,
    pub b: f64,
    /// Rotation in radians.
    pub theta: f64,
}

impl Ellipse {
    /// Normalised radius of the point; `<= 1` is inside.
    pub fn radius(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v
    }

    /// Membership of the pixel whose centre is `(x + 0.5, y + 0.5)`.
    pub fn contains_pixel(&self, y: usize, x: usize) -> bool {
        self.radius(x as f64 + 0.5, y as f64 + 0.5) <= 1.0
    }
}

/// One generated scene.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub id: String,
    pub ellipses: Vec<Ellipse>,
    pub mask: Mask,
    /// Planar RGB in `[0, 1]`.
    pub rgb: Vec<f64>,
    pub disparity: Vec<f64>,
}

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

fn scene(rng: &mut ChaCha8Rng, size: usize, id: String) -> SynthScene {
    let s = size as f64;
    let waves: Vec<Wave> = (0..4)
        .map(|_| Wave {
            kx: rng.random_range(0.5..3.0) * 2.0 * PI / s,
            ky: rng.random_range(0.5..3.0) * 2.0 * PI / s,
            phase: rng.random_range(0.0..2.0 * PI),
            amp: rng.random_range(0.02..0.06),
        })
        .collect();
    let base = rng.random_range(0.45..0.6);
    let (gx, gy) = (rng.random_range(-0.1..0.1), rng.random_range(0.0..0.15));
    let tint = [rng.random_range(0.95..1.05), 1.0, rng.random_range(0.9..1.0)];

    let count = rng.random_range(0..=3);
    let ellipses: Vec<Ellipse> = (0..count)
        .map(|_| {
            let a = rng.random_range(s / 14.0..s / 5.0);
            let b = rng.random_range(0.5..1.0) * a;
            Ellipse {
                cx: rng.random_range(0.15 * s..0.85 * s),
                cy: rng.random_range(0.2 * s..0.9 * s),
                a,
                b,
                theta: rng.random_range(0.0..PI),
            }
        })
        .collect();

    let n = size * size;
    let mut rgb = vec![0.0; 3 * n];
    let mut disparity = vec![0.0; n];
    let mut labels = vec![0u8; n];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let noise: f64 = waves.iter().map(|w| w.amp * (w.kx * fx + w.ky * fy + w.phase).sin()).sum();
            let grain = rng.random_range(-0.03..0.03);
            let mut road = base + gx * (fx / s - 0.5) + gy * (fy / s) + noise + grain;
            // road plane: disparity grows towards the bottom of the frame
            let mut disp = 0.3 + 0.4 * fy / s + 0.5 * grain;
            let depth = ellipses.iter().map(|e| e.radius(fx, fy)).fold(f64::INFINITY, f64::min);
            if depth <= 1.0 {
                labels[y * size + x] = 1;
                road = road * 0.45 + 0.05 * (1.0 - depth);
                disp += 0.2 + 0.1 * (1.0 - depth);
            }
            let i = y * size + x;
            for c in 0..3 {
                rgb[c * n + i] = (road * tint[c]).clamp(0.0, 1.0);
            }
            disparity[i] = disp.clamp(0.0, 1.0);
        }
    }
    SynthScene {
        id,
        ellipses,
        mask: Mask::new(size, size, labels).expect("square mask"),
        rgb,
        disparity,
    }
}

fn quantise(v: f64) -> u8 {
    (v * 255.0).round() as u8
}

/// Writes `n` scenes of `size x size` pixels under `out/{images,masks,disparity}`.
///
/// Output is a pure function of `(n, size, seed)`.
pub fn synth_generate(n: usize, size: usize, seed: u64, out: &Path) -> Result<Vec<SynthScene>> {
    if size == 0 || !size.is_multiple_of(8) {
        return Err(Error::Argument(format!("size must be a positive multiple of 8, got {size}")));
    }
    if n == 0 {
        return Err(Error::Argument("n must be at least 1".into()));
    }
    for dir in ["images", "masks", "disparity"] {
        std::fs::create_dir_all(out.join(dir))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = (n - 1).to_string().len().max(4);
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n {
        let sc = scene(&mut rng, size, format!("{i:0width$}"));
        let px = size * size;
        let (w, h) = (size as u32, size as u32);
        let rgb = RgbImage::from_fn(w, h, |x, y| {
            let j = y as usize * size + x as usize;
            Rgb([quantise(sc.rgb[j]), quantise(sc.rgb[px + j]), quantise(sc.rgb[2 * px + j])])
        });
        let disp = GrayImage::from_fn(w, h, |x, y| Luma([quantise(sc.disparity[y as usize * size + x as usize])]));
        let mask = GrayImage::from_fn(w, h, |x, y| Luma([sc.mask.get(y as usize, x as usize) * 255]));
        let name = format!("{}.png", sc.id);
        let save_err = |e: image::ImageError| Error::Format(format!("writing {name}: {e}"));
        rgb.save(out.join("images").join(&name)).map_err(save_err)?;
        disp.save(out.join("disparity").join(&name)).map_err(save_err)?;
        mask.save(out.join("masks").join(&name)).map_err(save_err)?;
        scenes.push(sc);
    }
    Ok(scenes)
}
