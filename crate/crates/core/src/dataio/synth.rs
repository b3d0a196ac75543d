//! Synthetic color/shape dataset.
//!
//! Each image holds one target shape (captioned `"<color> <shape>"`) plus a
//! few smaller distractor shapes of other colors on a flat noisy background.
//! Every image is rendered from a seed derived from the global seed and its
//! id, so the output tree is a pure function of the config.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::manifest::{write_manifest, ManifestRecord, Split};
use crate::dataio::pnm::{save_mask, save_ppm};
use crate::dataio::{Mask, RgbImage};
use crate::error::{Error, Result};
use crate::seed;

const MAX_PLACEMENT_ATTEMPTS: usize = 100;
const PLACEMENT_GAP: usize = 2;
const TRAIN_PERCENT: u64 = 80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "circle" => Some(ShapeKind::Circle),
            "square" => Some(ShapeKind::Square),
            "triangle" => Some(ShapeKind::Triangle),
            _ => None,
        }
    }

    /// Distance from the center to the farthest shape pixel, in units of the size radius.
    fn extent(&self) -> f64 {
        match self {
            ShapeKind::Circle => 1.0,
            // half side sqrt(pi)/2, corner at sqrt(2) of that
            ShapeKind::Square => 0.886_226_925_452_758 * std::f64::consts::SQRT_2,
            ShapeKind::Triangle => TRIANGLE_CIRCUMRADIUS,
        }
    }

    /// Whether the point (px, py) lies in a shape of size radius `r` centered at (cx, cy).
    fn contains(&self, cx: f64, cy: f64, r: f64, px: f64, py: f64) -> bool {
        let dx = px - cx;
        let dy = py - cy;
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => {
                let a = 0.886_226_925_452_758 * r;
                dx.abs() <= a && dy.abs() <= a
            }
            ShapeKind::Triangle => {
                // Upward equilateral triangle with circumradius R.
                let big_r = TRIANGLE_CIRCUMRADIUS * r;
                let bottom = big_r / 2.0;
                let half_base = big_r * 3f64.sqrt() / 2.0;
                if dy > bottom || dy < -big_r {
                    return false;
                }
                // width shrinks linearly from half_base at the bottom to 0 at the apex
                let t = (dy + big_r) / (bottom + big_r);
                dx.abs() <= half_base * t
            }
        }
    }
}

/// Circumradius multiplier giving the triangle the same area as a circle of radius 1.
const TRIANGLE_CIRCUMRADIUS: f64 = 1.555_185_022_281_564;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub rgb: [u8; 3],
}

impl NamedColor {
    pub fn new(name: &str, rgb: [u8; 3]) -> Self {
        Self { name: name.to_string(), rgb }
    }
}

pub fn default_colors() -> Vec<NamedColor> {
    vec![
        NamedColor::new("red", [220, 40, 40]),
        NamedColor::new("green", [40, 180, 60]),
        NamedColor::new("blue", [40, 70, 220]),
        NamedColor::new("yellow", [230, 210, 40]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<NamedColor>,
    pub background: [u8; 3],
    pub distractors: usize,
    /// Per-channel uniform noise amplitude.
    pub noise: u8,
    pub count_per_concept: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            shapes: vec![ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle],
            colors: default_colors(),
            background: [120, 120, 120],
            distractors: 1,
            noise: 6,
            count_per_concept: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concept {
    pub color: NamedColor,
    pub shape: ShapeKind,
}

impl Concept {
    pub fn caption(&self) -> String {
        format!("{} {}", self.color.name, self.shape.name())
    }
}

fn color_distance(a: [u8; 3], b: [u8; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

impl SynthConfig {
    /// Color-major list of every (color, shape) combination.
    pub fn concepts(&self) -> Vec<Concept> {
        self.colors
            .iter()
            .flat_map(|c| {
                self.shapes.iter().map(move |&s| Concept {
                    color: c.clone(),
                    shape: s,
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width.min(self.height) < 16 {
            return Err(Error::Config(format!(
                "synthetic image size {}x{} is below 16",
                self.width, self.height
            )));
        }
        if self.concepts().len() < 2 {
            return Err(Error::Config("synthetic data needs at least 2 concepts".into()));
        }
        let mut palette: Vec<[u8; 3]> = self.colors.iter().map(|c| c.rgb).collect();
        palette.push(self.background);
        let mut min_gap = f64::INFINITY;
        for i in 0..palette.len() {
            for j in i + 1..palette.len() {
                min_gap = min_gap.min(color_distance(palette[i], palette[j]));
            }
        }
        if self.noise as f64 >= min_gap / 4.0 {
            return Err(Error::Config(format!(
                "noise amplitude {} must be below a quarter of the smallest color gap ({min_gap:.1})",
                self.noise
            )));
        }
        if self.count_per_concept == 0 {
            return Err(Error::Config("count_per_concept must be positive".into()));
        }
        Ok(())
    }
}

/// One rendered sample.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub id: String,
    pub concept: Concept,
    pub image: RgbImage,
    pub mask: Mask,
    pub split: Split,
}

pub fn split_for(seed: u64, id: &str) -> Split {
    if seed::derive(seed.rotate_left(17), id) % 100 < TRAIN_PERCENT {
        Split::Train
    } else {
        Split::Eval
    }
}

/// Pixels a shape would cover, clipped to the image.
fn shape_pixels(shape: ShapeKind, cx: f64, cy: f64, r: f64, width: usize, height: usize) -> Vec<(usize, usize)> {
    let reach = shape.extent() * r + 1.0;
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let x1 = ((cx + reach).ceil() as usize).min(width - 1);
    let y1 = ((cy + reach).ceil() as usize).min(height - 1);
    let mut out = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            if shape.contains(cx, cy, r, x as f64 + 0.5, y as f64 + 0.5) {
                out.push((x, y));
            }
        }
    }
    out
}

/// Marks `pixels` and everything within `PLACEMENT_GAP` (Chebyshev) of them.
fn occupy(occupied: &mut Mask, pixels: &[(usize, usize)]) {
    let (w, h) = (occupied.width(), occupied.height());
    for &(x, y) in pixels {
        for yy in y.saturating_sub(PLACEMENT_GAP)..=(y + PLACEMENT_GAP).min(h - 1) {
            for xx in x.saturating_sub(PLACEMENT_GAP)..=(x + PLACEMENT_GAP).min(w - 1) {
                occupied.set(xx, yy, true);
            }
        }
    }
}

fn place(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    occupied: &Mask,
    shape: ShapeKind,
    r: f64,
    id: &str,
) -> Result<Vec<(usize, usize)>> {
    let margin = shape.extent() * r + 1.0;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    if 2.0 * margin >= w.min(h) {
        return Err(Error::Config(format!("shape of radius {r:.1} does not fit the image")));
    }
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let cx = rng.random_range(margin..w - margin);
        let cy = rng.random_range(margin..h - margin);
        let pixels = shape_pixels(shape, cx, cy, r, cfg.width, cfg.height);
        if pixels.iter().all(|&(x, y)| !occupied.get(x, y)) {
            return Ok(pixels);
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not place a shape in `{id}` after {MAX_PLACEMENT_ATTEMPTS} attempts"
    )))
}

/// Renders the `index`-th sample of `concept` without touching the filesystem.
pub fn render_sample(cfg: &SynthConfig, concept: &Concept, index: usize) -> Result<SynthSample> {
    let id = format!("{}-{}-{:03}", concept.color.name, concept.shape.name(), index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &id));
    let concepts = cfg.concepts();
    let side = cfg.width.min(cfg.height) as f64;

    let mut image = RgbImage::filled(cfg.width, cfg.height, cfg.background);
    let mut mask = Mask::new(cfg.width, cfg.height);
    let mut occupied = Mask::new(cfg.width, cfg.height);

    let r = rng.random_range(0.14..0.20) * side;
    let pixels = place(&mut rng, cfg, &occupied, concept.shape, r, &id)?;
    for &(x, y) in &pixels {
        image.set_pixel(x, y, concept.color.rgb);
        mask.set(x, y, true);
    }
    occupy(&mut occupied, &pixels);

    let mut others: Vec<&Concept> = concepts.iter().filter(|c| c.color != concept.color).collect();
    if others.is_empty() {
        others = concepts.iter().filter(|c| *c != concept).collect();
    }
    for _ in 0..cfg.distractors {
        let other = others[rng.random_range(0..others.len())];
        let r = rng.random_range(0.07..0.10) * side;
        let pixels = place(&mut rng, cfg, &occupied, other.shape, r, &id)?;
        for &(x, y) in &pixels {
            image.set_pixel(x, y, other.color.rgb);
        }
        occupy(&mut occupied, &pixels);
    }

    if cfg.noise > 0 {
        let a = cfg.noise as i16;
        let mut data = image.data().to_vec();
        for v in data.iter_mut() {
            *v = (*v as i16 + rng.random_range(-a..=a)).clamp(0, 255) as u8;
        }
        image = RgbImage::new(cfg.width, cfg.height, data)?;
    }

    Ok(SynthSample {
        split: split_for(cfg.seed, &id),
        id,
        concept: concept.clone(),
        image,
        mask,
    })
}

/// Writes `images/`, `masks/` and `manifest.jsonl` under `out_dir`.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<ManifestRecord>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("masks"))?;
    let mut records = Vec::new();
    for concept in cfg.concepts() {
        for k in 0..cfg.count_per_concept {
            let s = render_sample(cfg, &concept, k)?;
            let image_rel = format!("images/{}.ppm", s.id);
            let mask_rel = format!("masks/{}.pgm", s.id);
            save_ppm(&s.image, &out_dir.join(&image_rel))?;
            save_mask(&s.mask, &out_dir.join(&mask_rel))?;
            records.push(ManifestRecord {
                id: s.id,
                image: image_rel,
                caption: concept.caption(),
                category: concept.shape.name().to_string(),
                mask: Some(mask_rel),
                split: s.split,
            });
        }
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}
