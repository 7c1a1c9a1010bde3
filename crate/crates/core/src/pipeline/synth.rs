//! Seeded synthetic microscopy-like dataset with exact ground truth.

use std::f64::consts::PI;
use std::path::Path;

use image::imageops;
use image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::imageio::write_png_gray;
use crate::error::{invalid, Result};
use crate::raster::{BinaryMask, GrayImage};

/// Shape families cycled over the generated classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Ellipse,
    Blob,
    Filament,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 3] = [ShapeFamily::Ellipse, ShapeFamily::Blob, ShapeFamily::Filament];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Ellipse => "ellipse",
            ShapeFamily::Blob => "blob",
            ShapeFamily::Filament => "filament",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
    /// Allowed object area as a fraction of the image.
    pub min_fraction: f64,
    pub max_fraction: f64,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            per_class: 20,
            size: 64,
            seed: 0,
            min_fraction: 0.05,
            max_fraction: 0.60,
            blur_sigma: 0.8,
            noise_sigma: 0.04,
        }
    }
}

/// Class directory name: the family, suffixed with a round number after the
/// first cycle.
pub fn class_name(index: usize) -> String {
    let family = ShapeFamily::ALL[index % 3].name();
    match index / 3 {
        0 => family.to_string(),
        k => format!("{family}{}", k + 1),
    }
}

fn draw_shape(family: ShapeFamily, n: usize, rng: &mut ChaCha8Rng) -> BinaryMask {
    let s = n as f64;
    match family {
        ShapeFamily::Ellipse => {
            let (cx, cy) = (rng.random_range(0.3..0.7) * s, rng.random_range(0.3..0.7) * s);
            let a = rng.random_range(0.12..0.38) * s;
            let b = rng.random_range(0.10..0.30) * s;
            let t: f64 = rng.random_range(0.0..PI);
            let (c, si) = (t.cos(), t.sin());
            BinaryMask::from_fn(n, n, |x, y| {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let (u, v) = (dx * c + dy * si, -dx * si + dy * c);
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            })
        }
        ShapeFamily::Blob => {
            let (cx, cy) = (rng.random_range(0.35..0.65) * s, rng.random_range(0.35..0.65) * s);
            let lobes = rng.random_range(3..=5);
            let core = rng.random_range(0.08..0.15) * s;
            let mut circles = vec![(cx, cy, core)];
            for k in 0..lobes {
                let ang = 2.0 * PI * k as f64 / lobes as f64 + rng.random_range(-0.4..0.4);
                let d = rng.random_range(0.8..1.4) * core;
                let r = rng.random_range(0.5..0.9) * core;
                circles.push((cx + d * ang.cos(), cy + d * ang.sin(), r));
            }
            BinaryMask::from_fn(n, n, |x, y| {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                circles.iter().any(|&(ox, oy, r)| (px - ox).powi(2) + (py - oy).powi(2) <= r * r)
            })
        }
        ShapeFamily::Filament => {
            // a thick quadratic Bezier curve
            let pt = |rng: &mut ChaCha8Rng| (rng.random_range(0.1..0.9) * s, rng.random_range(0.1..0.9) * s);
            let (p0, p1, p2) = (pt(rng), pt(rng), pt(rng));
            let half = rng.random_range(0.035..0.07) * s;
            let samples: Vec<(f64, f64)> = (0..=200)
                .map(|i| {
                    let t = i as f64 / 200.0;
                    let u = 1.0 - t;
                    (
                        u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0,
                        u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1,
                    )
                })
                .collect();
            BinaryMask::from_fn(n, n, |x, y| {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                samples.iter().any(|&(qx, qy)| (px - qx).powi(2) + (py - qy).powi(2) <= half * half)
            })
        }
    }
}

/// Draws until the object area falls inside the configured band.
fn shape_in_band(family: ShapeFamily, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> BinaryMask {
    let total = (cfg.size * cfg.size) as f64;
    loop {
        let m = draw_shape(family, cfg.size, rng);
        let f = m.area() as f64 / total;
        if f >= cfg.min_fraction && f <= cfg.max_fraction {
            return m;
        }
    }
}

/// Object brighter than the background, blurred, with additive Gaussian
/// noise, clamped to [0, 1].
fn render(mask: &BinaryMask, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> GrayImage<f64> {
    let n = cfg.size;
    let bg = rng.random_range(0.15..0.35);
    let fg = bg + rng.random_range(0.3..0.5);
    let clean: Vec<f32> = mask.data().iter().map(|&m| if m { fg } else { bg } as f32).collect();
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(n as u32, n as u32, clean).expect("dims");
    let blurred = if cfg.blur_sigma > 0.0 {
        imageops::blur(&buf, cfg.blur_sigma as f32)
    } else {
        buf
    };
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("finite sigma");
    let data = blurred
        .into_raw()
        .into_iter()
        .map(|v| (f64::from(v) + noise.sample(rng)).clamp(0.0, 1.0))
        .collect();
    GrayImage::new(n, n, data).expect("clamped")
}

/// One generated pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub class: String,
    pub stem: String,
    pub image: GrayImage<f64>,
    pub gt: BinaryMask,
}

pub fn validate(cfg: &SynthConfig) -> Result<()> {
    if cfg.size == 0 || !cfg.size.is_multiple_of(16) {
        return Err(invalid(format!("synthetic image size {} must be a positive multiple of 16", cfg.size)));
    }
    if !(0.0 <= cfg.min_fraction && cfg.min_fraction < cfg.max_fraction && cfg.max_fraction <= 1.0) {
        return Err(invalid("area band must satisfy 0 <= min < max <= 1"));
    }
    Ok(())
}

/// All pairs in class order; each class has its own generator derived from
/// the seed, so classes are independent of one another.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthPair>> {
    validate(cfg)?;
    let mut out = Vec::with_capacity(cfg.classes * cfg.per_class);
    for c in 0..cfg.classes {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(c as u64);
        let family = ShapeFamily::ALL[c % 3];
        for i in 0..cfg.per_class {
            let gt = shape_in_band(family, cfg, &mut rng);
            let image = render(&gt, cfg, &mut rng);
            out.push(SynthPair {
                class: class_name(c),
                stem: format!("img_{i:03}"),
                image,
                gt,
            });
        }
    }
    Ok(out)
}

/// Writes `<root>/<class>/{images,gt}/<stem>.png`.
pub fn synth_dataset(root: impl AsRef<Path>, cfg: &SynthConfig) -> Result<Vec<SynthPair>> {
    let root = root.as_ref();
    let pairs = generate(cfg)?;
    for p in &pairs {
        let dir = root.join(&p.class);
        let (w, h) = p.image.dims();
        write_png_gray(dir.join("images").join(format!("{}.png", p.stem)), w, h, &p.image.to_u8())?;
        write_png_gray(dir.join("gt").join(format!("{}.png", p.stem)), w, h, &p.gt.to_levels())?;
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_band_and_determinism() {
        let cfg = SynthConfig {
            per_class: 6,
            seed: 11,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        assert_eq!(a.len(), 18);
        for p in &a {
            let f = p.gt.area() as f64 / 4096.0;
            assert!((0.05..=0.60).contains(&f), "{} fraction {f}", p.stem);
        }
        assert_eq!(a, generate(&cfg).unwrap());
        assert_ne!(a, generate(&SynthConfig { seed: 12, ..cfg }).unwrap());
        assert_eq!(a[0].class, "ellipse");
        assert_eq!(a[17].class, "filament");
    }

    #[test]
    fn class_names_cycle() {
        assert_eq!(class_name(1), "blob");
        assert_eq!(class_name(3), "ellipse2");
        assert_eq!(class_name(20), "filament7");
    }

    #[test]
    fn rejects_bad_size() {
        assert!(generate(&SynthConfig { size: 40, ..Default::default() }).is_err());
    }
}
