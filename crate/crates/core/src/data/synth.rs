//! Synthetic class × context images.
//!
//! A class is a foreground shape family (outline and fill pattern); a context
//! is a background texture with its own palette. Backgrounds are drawn the
//! same way for every class, so pixels carry no class–context association:
//! the association only appears once a split holds out different contexts
//! for different classes.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::pnm::{write_ppm, RgbImage};
use super::BBox;
use crate::error::{Error, Result};
use crate::rng::{streams, SeedRng};

const OUTLINES: usize = 8;
const FILLS: usize = 3;
/// Number of distinguishable shape families.
pub const MAX_CLASSES: usize = OUTLINES * FILLS;
const TEXTURES: usize = 6;
const CONTEXT_TAG: u64 = 0xC0_7E47;
/// Supersampling factor per axis for antialiased edges.
const SUB: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub contexts_per_class: usize,
    pub images_per_context: usize,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { num_classes: 4, contexts_per_class: 6, images_per_context: 50, image_size: (64, 64), seed: 0 }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("synthetic config", msg));
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return bad(format!("num_classes must be in 2..={MAX_CLASSES}, got {}", self.num_classes));
        }
        if self.contexts_per_class == 0 || self.images_per_context == 0 {
            return bad("contexts_per_class and images_per_context must be positive".into());
        }
        if self.image_size.0 < 16 || self.image_size.1 < 16 {
            return bad(format!("image size {:?} is below 16x16", self.image_size));
        }
        Ok(())
    }

    pub fn num_images(&self) -> usize {
        self.num_classes * self.contexts_per_class * self.images_per_context
    }
}

pub fn class_name(class: usize) -> String {
    format!("shape{class:02}")
}

pub fn context_name(context: usize) -> String {
    format!("texture{context:02}")
}

/// Renders every image and writes `manifest.csv` under `out_dir`. Returns
/// the manifest path.
pub fn generate_synthetic(cfg: &SyntheticConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut manifest = String::from("path,class,context,x0,y0,x1,y1\n");
    for class in 0..cfg.num_classes {
        for context in 0..cfg.contexts_per_class {
            for idx in 0..cfg.images_per_context {
                let (img, b) = render_sample(cfg, class, context, idx);
                let rel = format!("images/{}_{}_{idx:04}.ppm", class_name(class), context_name(context));
                write_ppm(&out_dir.join(&rel), &img)?;
                let _ = writeln!(
                    manifest,
                    "{rel},{},{},{},{},{},{}",
                    class_name(class),
                    context_name(context),
                    b.x0,
                    b.y0,
                    b.x1,
                    b.y1
                );
            }
        }
    }
    let path = out_dir.join("manifest.csv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Renders one image. The result depends only on the config seed, image
/// size and `(class, context, idx)`.
pub fn render_sample(cfg: &SyntheticConfig, class: usize, context: usize, idx: usize) -> (RgbImage, BBox) {
    let (h, w) = cfg.image_size;
    let bg = Background::new(cfg.seed, context, h.min(w));
    let mut rng = SeedRng::derive(cfg.seed, &[streams::SYNTH, class as u64, context as u64, idx as u64]);
    let phase = [rng.uniform(0.0, TAU), rng.uniform(0.0, TAU), rng.uniform(0.0, w as f64), rng.uniform(0.0, h as f64)];
    let shade = rng.uniform(-0.06, 0.06);

    let side = h.min(w) as f64;
    let radius = rng.uniform(0.28, 0.42) * side;
    // the cross reaches a little beyond the unit circle
    let margin = 1.06 * radius;
    let cx = rng.uniform(margin, w as f64 - margin);
    let cy = rng.uniform(margin, h as f64 - margin);
    let shape = Shape { outline: class % OUTLINES, fill: (class / OUTLINES) % FILLS, angle: rng.uniform(0.0, TAU) };
    let fg = foreground_color(&mut rng, luminance(bg.mean()));

    let mut img = RgbImage::new(w, h);
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for y in 0..h {
        for x in 0..w {
            let mut covered = 0usize;
            let mut in_mask = false;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let px = x as f64 + (sx as f64 + 0.5) / SUB as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SUB as f64;
                    let (u, v) = ((px - cx) / radius, (py - cy) / radius);
                    let (mask, paint) = shape.sample(u, v);
                    in_mask |= mask;
                    covered += paint as usize;
                }
            }
            if in_mask {
                (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1));
            }
            let alpha = covered as f64 / (SUB * SUB) as f64;
            let noise = rng.uniform(-0.03, 0.03);
            let back = bg.color(x as f64, y as f64, &phase);
            let rgb = std::array::from_fn(|c| {
                let b = back[c] + shade + noise;
                to_byte(b * (1.0 - alpha) + fg[c] * alpha)
            });
            img.put(x, y, rgb);
        }
    }
    (img, BBox { x0, y0, x1, y1 })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// A random colour whose luminance differs visibly from the background's.
fn foreground_color(rng: &mut SeedRng, bg_lum: f64) -> [f64; 3] {
    let mut best = [0.0; 3];
    let mut best_gap = -1.0;
    for _ in 0..16 {
        let c = [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)];
        let gap = (luminance(c) - bg_lum).abs();
        if gap >= 0.3 {
            return c;
        }
        if gap > best_gap {
            (best, best_gap) = (c, gap);
        }
    }
    best
}

struct Shape {
    outline: usize,
    fill: usize,
    angle: f64,
}

impl Shape {
    /// Whether `(u, v)` (in units of the circumradius) lies in the object's
    /// silhouette, and whether it is painted with the foreground colour.
    fn sample(&self, u: f64, v: f64) -> (bool, bool) {
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * u + s * v, -s * u + c * v);
        let mask = self.inside(u, v, 1.0);
        let paint = mask
            && match self.fill {
                0 => true,
                1 => ((v + 2.0) / 0.3).floor() as i64 % 2 == 0,
                _ => !self.inside(u, v, 0.55),
            };
        (mask, paint)
    }

    fn inside(&self, u: f64, v: f64, scale: f64) -> bool {
        let rho = u.hypot(v);
        let theta = v.atan2(u).rem_euclid(TAU);
        let polygon = |n: f64| {
            let sector = TAU / n;
            (PI / n).cos() / ((theta % sector) - PI / n).cos()
        };
        let star = |n: f64| {
            let t = (theta % (TAU / n)) / (TAU / n);
            1.0 - 0.55 * (1.0 - (2.0 * t - 1.0).abs())
        };
        let limit = match self.outline {
            0 => 1.0,
            1 => polygon(3.0),
            2 => polygon(4.0),
            3 => polygon(5.0),
            4 => polygon(6.0),
            5 => star(4.0),
            6 => star(5.0),
            _ => {
                let (a, b) = (u.abs() / scale, v.abs() / scale);
                return (a <= 0.33 && b <= 1.0) || (b <= 0.33 && a <= 1.0);
            }
        };
        rho <= scale * limit
    }
}

struct Background {
    texture: usize,
    palette: [[f64; 3]; 2],
    period: f64,
    center: (f64, f64),
}

impl Background {
    fn new(seed: u64, context: usize, side: usize) -> Self {
        let mut rng = SeedRng::derive(seed, &[streams::SYNTH, CONTEXT_TAG, context as u64]);
        let mut color = || [rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)];
        let palette = [color(), color()];
        let period = rng.uniform(0.08, 0.2) * side as f64;
        let center = (rng.uniform(0.0, side as f64), rng.uniform(0.0, side as f64));
        Self { texture: context % TEXTURES, palette, period, center }
    }

    fn mean(&self) -> [f64; 3] {
        std::array::from_fn(|c| 0.5 * (self.palette[0][c] + self.palette[1][c]))
    }

    fn color(&self, x: f64, y: f64, phase: &[f64; 4]) -> [f64; 3] {
        let p = self.period;
        let wave = |t: f64| 0.5 + 0.5 * (TAU * t / p).sin();
        let m = match self.texture {
            0 => wave(x + phase[2]).round(),
            1 => wave(y + phase[3]).round(),
            2 => (((x + phase[2]) / p).floor() + ((y + phase[3]) / p).floor()).rem_euclid(2.0),
            3 => wave(x + y + phase[2]).round(),
            4 => wave((x - self.center.0).hypot(y - self.center.1) + phase[2]),
            _ => 0.5 + 0.25 * ((TAU * x / (1.7 * p) + phase[0]).sin() + (TAU * y / (1.3 * p) + phase[1]).sin()),
        };
        std::array::from_fn(|c| self.palette[0][c] * (1.0 - m) + self.palette[1][c] * m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig { num_classes: 3, contexts_per_class: 2, images_per_context: 2, image_size: (32, 40), seed: 5 }
    }

    #[test]
    fn images_are_deterministic_and_seed_dependent() {
        let cfg = small();
        assert_eq!(render_sample(&cfg, 1, 1, 0), render_sample(&cfg, 1, 1, 0));
        assert_ne!(render_sample(&cfg, 1, 1, 0).0, render_sample(&cfg, 1, 1, 1).0);
        let other = SyntheticConfig { seed: 6, ..cfg.clone() };
        assert_ne!(render_sample(&cfg, 1, 1, 0).0, render_sample(&other, 1, 1, 0).0);
    }

    #[test]
    fn sample_does_not_depend_on_dataset_extent() {
        // adding classes or images must not perturb existing ones
        let cfg = small();
        let bigger = SyntheticConfig { num_classes: 5, images_per_context: 7, ..cfg.clone() };
        assert_eq!(render_sample(&cfg, 2, 1, 1), render_sample(&bigger, 2, 1, 1));
    }

    #[test]
    fn bbox_is_inside_the_image_and_large() {
        let cfg = SyntheticConfig { num_classes: MAX_CLASSES, contexts_per_class: 1, images_per_context: 1, ..small() };
        for class in 0..MAX_CLASSES {
            for idx in 0..4 {
                let (img, b) = render_sample(&cfg, class, 0, idx);
                assert!(b.x0 < b.x1 && b.x1 <= img.width && b.y0 < b.y1 && b.y1 <= img.height);
                assert!(b.area() * 10 >= img.width * img.height, "class {class}: {b:?}");
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(SyntheticConfig::default().validate().is_ok());
        assert!(SyntheticConfig { num_classes: 1, ..small() }.validate().is_err());
        assert!(SyntheticConfig { num_classes: MAX_CLASSES + 1, ..small() }.validate().is_err());
        assert!(SyntheticConfig { image_size: (8, 64), ..small() }.validate().is_err());
    }
}
