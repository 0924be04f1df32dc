//! Seeded synthetic crack images: value-noise pavement texture crossed by
//! one to three dark polyline cracks.

use std::f32::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::io::{encode_image, encode_mask};
use super::{Mask, Sample};
use crate::error::{Error, Result};
use crate::keyval::{render_section, Document};
use crate::tensor::Tensor;

pub const MIN_SIZE: usize = 64;
pub const MIN_CRACK_FRACTION: f64 = 0.001;
pub const MAX_CRACK_FRACTION: f64 = 0.10;
const MAX_ATTEMPTS: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        render_section(
            "synthetic",
            &[
                ("seed", self.seed.to_string()),
                ("count", self.count.to_string()),
                ("size", self.size.to_string()),
            ],
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Document::parse(text)?;
        let m = Manifest {
            seed: doc.get_or("synthetic", "seed", 0)?,
            count: doc.get_or("synthetic", "count", 0)?,
            size: doc.get_or("synthetic", "size", 0)?,
        };
        doc.finish()?;
        Ok(m)
    }
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinearly interpolated lattice noise in `[0, 1)` with the given cell size.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f32> {
    let gw = w / cell + 2;
    let gh = h / cell + 2;
    let grid: Vec<f32> = (0..gw * gh).map(|_| rng.random::<f32>()).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f32 / cell as f32;
        let (iy, ty) = (fy as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f32 / cell as f32;
            let (ix, tx) = (fx as usize, smooth(fx.fract()));
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(iy, ix) * (1.0 - tx) + g(iy, ix + 1) * tx;
            let bottom = g(iy + 1, ix) * (1.0 - tx) + g(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (cx * cx + cy * cy).sqrt()
}

/// Marks every pixel whose center lies within `radius` of the polyline.
fn rasterize(mask: &mut [u8], size: usize, points: &[(f32, f32)], radius: f32) {
    for seg in points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let lo = |u: f32, v: f32| ((u.min(v) - radius - 1.0).floor().max(0.0) as usize).min(size);
        let hi = |u: f32, v: f32| ((u.max(v) + radius + 1.0).ceil().max(0.0) as usize).min(size);
        for y in lo(a.1, b.1)..hi(a.1, b.1) {
            for x in lo(a.0, b.0)..hi(a.0, b.0) {
                if segment_distance((x as f32 + 0.5, y as f32 + 0.5), a, b) <= radius {
                    mask[y * size + x] = 1;
                }
            }
        }
    }
}

fn crack_mask(rng: &mut ChaCha8Rng, size: usize) -> Vec<u8> {
    let s = size as f32;
    let mut mask = vec![0u8; size * size];
    for _ in 0..rng.random_range(1..=3) {
        let width = rng.random_range(1..=5) as f32;
        let segments = rng.random_range(4..=9);
        let step = s * rng.random_range(0.5..1.0) / segments as f32;
        let mut p = (rng.random_range(0.1..0.9) * s, rng.random_range(0.1..0.9) * s);
        let mut angle = rng.random_range(0.0..TAU);
        let mut points = vec![p];
        for _ in 0..segments {
            angle += rng.random_range(-0.7..0.7);
            p = (p.0 + step * angle.cos(), p.1 + step * angle.sin());
            points.push(p);
        }
        rasterize(&mut mask, size, &points, width / 2.0);
    }
    mask
}

/// Generates sample `index` of a run. Pure function of `(size, seed, index)`.
pub fn synth_sample(size: usize, seed: u64, index: u64) -> Result<Sample> {
    if size < MIN_SIZE {
        return Err(Error::Data(format!("synthetic size must be >= {MIN_SIZE}, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);

    let level = rng.random_range(0.45..0.7f32);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.03..0.03f32));
    let coarse = value_noise(&mut rng, size, size, 24);
    let fine = value_noise(&mut rng, size, size, 5);
    let grain: Vec<f32> = (0..size * size).map(|_| rng.random_range(-0.04..0.04f32)).collect();

    let mut mask = crack_mask(&mut rng, size);
    let mut attempts = 1;
    let frac = |m: &[u8]| m.iter().filter(|&&v| v == 1).count() as f64 / m.len() as f64;
    while !(MIN_CRACK_FRACTION..=MAX_CRACK_FRACTION).contains(&frac(&mask)) {
        if attempts == MAX_ATTEMPTS {
            return Err(Error::Data(format!("no crack layout within bounds for index {index}")));
        }
        mask = crack_mask(&mut rng, size);
        attempts += 1;
    }
    let dark = rng.random_range(0.08..0.22f32);

    let image = Tensor::from_fn([1, 3, size, size], |[_, c, y, x]| {
        let i = y * size + x;
        let v = if mask[i] == 1 {
            dark + 0.5 * grain[i]
        } else {
            level + tint[c] + 0.22 * (coarse[i] - 0.5) + 0.1 * (fine[i] - 0.5) + grain[i]
        };
        v.clamp(0.0, 1.0)
    });
    Sample::new(image, Mask::new(size, size, mask)?)
}

/// Writes `count` image/mask pairs and `manifest.txt` into `out_dir`.
pub fn gen_synthetic(count: usize, size: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if count == 0 {
        return Err(Error::Data("synthetic count must be >= 1".into()));
    }
    if size < MIN_SIZE {
        return Err(Error::Data(format!("synthetic size must be >= {MIN_SIZE}, got {size}")));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for i in 0..count {
        let s = synth_sample(size, seed, i as u64)?;
        let img = out_dir.join(format!("image_{i:04}.png"));
        fs::write(&img, encode_image(&s.image)).map_err(|e| Error::io(&img, e))?;
        let mask = out_dir.join(format!("mask_{i:04}.png"));
        fs::write(&mask, encode_mask(&s.mask)).map_err(|e| Error::io(&mask, e))?;
    }
    let manifest = Manifest { seed, count, size };
    let path = out_dir.join("manifest.txt");
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
