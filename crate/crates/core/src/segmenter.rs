//! Promptable segmentation: a deterministic region-growing reference backend
//! and a client for external model processes.
//!
//! Region growing starts at each seed and admits 4-connected neighbours whose
//! RGB distance to the running mean of the region is within the tolerance.
//! Neighbours rejected earlier are re-tested whenever the mean has moved.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterClient;
use crate::dataio::{Mask, RgbImage};
use crate::error::{Error, Result};
use crate::prompting::{BBox, Point, PromptSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Reference,
    External,
}

impl std::str::FromStr for Backend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Backend::Reference),
            "external" => Ok(Backend::External),
            _ => Err(Error::Config(format!("unknown segmenter backend `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub backend: Backend,
    /// Euclidean RGB distance on the 0-255 scale.
    pub color_tolerance: f64,
    /// Program and arguments of the external adapter.
    pub command: Vec<String>,
    pub timeout_ms: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Reference,
            color_tolerance: 30.0,
            command: Vec::new(),
            timeout_ms: 30_000,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.color_tolerance >= 0.0 && self.color_tolerance.is_finite()) {
            return Err(Error::Config(format!(
                "color_tolerance must be finite and non-negative, got {}",
                self.color_tolerance
            )));
        }
        if self.backend == Backend::External {
            if self.command.is_empty() {
                return Err(Error::Config("external backend needs an adapter command".into()));
            }
            if self.timeout_ms == 0 {
                return Err(Error::Config("timeout_ms must be positive".into()));
            }
        }
        Ok(())
    }
}

fn rgb(image: &RgbImage, x: usize, y: usize) -> [f64; 3] {
    let p = image.pixel(x, y);
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

struct Region {
    sum: [f64; 3],
    n: f64,
}

impl Region {
    fn admits(&self, c: [f64; 3], tolerance: f64) -> bool {
        let d2: f64 = (0..3).map(|i| (c[i] - self.sum[i] / self.n).powi(2)).sum();
        d2.sqrt() <= tolerance
    }

    fn add(&mut self, c: [f64; 3]) {
        for (s, v) in self.sum.iter_mut().zip(c) {
            *s += v;
        }
        self.n += 1.0;
    }
}

/// Grows one region from `seed`, never leaving `clip` (inclusive) when given.
pub fn grow_region(image: &RgbImage, seed: Point, tolerance: f64, clip: Option<BBox>) -> Result<Mask> {
    let (w, h) = (image.width(), image.height());
    if seed.x >= w || seed.y >= h {
        return Err(Error::OutOfBounds { x: seed.x as i64, y: seed.y as i64, width: w, height: h });
    }
    let clip = clip.unwrap_or(BBox { x0: 0, y0: 0, x1: w - 1, y1: h - 1 });
    let inside = |x: usize, y: usize| x >= clip.x0 && x <= clip.x1 && y >= clip.y0 && y <= clip.y1;
    if !inside(seed.x, seed.y) {
        return Err(Error::InvalidArgument(format!("seed {seed:?} lies outside the clip box {clip:?}")));
    }

    const UNSEEN: u8 = 0;
    const IN: u8 = 1;
    const REJECTED: u8 = 2;
    let mut state = vec![UNSEEN; w * h];
    let mut mask = Mask::new(w, h);
    let mut region = Region { sum: rgb(image, seed.x, seed.y), n: 1.0 };
    state[seed.y * w + seed.x] = IN;
    mask.set(seed.x, seed.y, true);
    let mut queue = VecDeque::from([(seed.x, seed.y)]);
    let mut rejected: Vec<(usize, usize)> = Vec::new();

    loop {
        while let Some((x, y)) = queue.pop_front() {
            let neighbours = [
                (x.wrapping_sub(1), y),
                (x + 1, y),
                (x, y.wrapping_sub(1)),
                (x, y + 1),
            ];
            for (nx, ny) in neighbours {
                if nx >= w || ny >= h || !inside(nx, ny) || state[ny * w + nx] != UNSEEN {
                    continue;
                }
                let c = rgb(image, nx, ny);
                if region.admits(c, tolerance) {
                    region.add(c);
                    state[ny * w + nx] = IN;
                    mask.set(nx, ny, true);
                    queue.push_back((nx, ny));
                } else {
                    state[ny * w + nx] = REJECTED;
                    rejected.push((nx, ny));
                }
            }
        }
        // the mean may have drifted towards pixels turned away earlier
        let before = queue.len();
        rejected.retain(|&(x, y)| {
            let c = rgb(image, x, y);
            if region.admits(c, tolerance) {
                region.add(c);
                state[y * w + x] = IN;
                mask.set(x, y, true);
                queue.push_back((x, y));
                false
            } else {
                true
            }
        });
        if queue.len() == before {
            return Ok(mask);
        }
    }
}

/// Union of the regions grown from every point.
pub fn segment_points(image: &RgbImage, prompts: &PromptSet, cfg: &SegmenterConfig) -> Result<Mask> {
    if let PromptSet::BoundingBox(_) = prompts {
        return Err(Error::InvalidArgument("segment_points needs point prompts".into()));
    }
    cfg.validate()?;
    let (w, h) = (image.width(), image.height());
    for p in prompts.points() {
        if p.x >= w || p.y >= h {
            return Err(Error::OutOfBounds { x: p.x as i64, y: p.y as i64, width: w, height: h });
        }
    }
    let mut mask = Mask::new(w, h);
    for &p in prompts.points() {
        mask.union_with(&grow_region(image, p, cfg.color_tolerance, None)?)?;
    }
    Ok(mask)
}

/// Region grown from the box centre and clipped to the box.
pub fn segment_box(image: &RgbImage, prompts: &PromptSet, cfg: &SegmenterConfig) -> Result<Mask> {
    let PromptSet::BoundingBox(b) = prompts else {
        return Err(Error::InvalidArgument("segment_box needs a box prompt".into()));
    };
    cfg.validate()?;
    prompts.validate(image.width(), image.height())?;
    let centre = Point::new((b.x0 + b.x1) / 2, (b.y0 + b.y1) / 2);
    grow_region(image, centre, cfg.color_tolerance, Some(*b))
}

/// Reference backend for any prompt kind.
pub fn segment_reference(image: &RgbImage, prompts: &PromptSet, cfg: &SegmenterConfig) -> Result<Mask> {
    match prompts {
        PromptSet::BoundingBox(_) => segment_box(image, prompts, cfg),
        _ => segment_points(image, prompts, cfg),
    }
}

/// Segments through a freshly spawned adapter process.
pub fn segment_external(image: &RgbImage, prompts: &PromptSet, cfg: &SegmenterConfig) -> Result<Mask> {
    let mut client = AdapterClient::spawn(&cfg.command, cfg.timeout_ms)?;
    client.segment(image, prompts)
}

/// A configured backend; external backends keep their adapter process alive between calls.
pub enum Segmenter {
    Reference(SegmenterConfig),
    External(AdapterClient),
}

impl Segmenter {
    pub fn new(cfg: &SegmenterConfig) -> Result<Self> {
        cfg.validate()?;
        match cfg.backend {
            Backend::Reference => Ok(Segmenter::Reference(cfg.clone())),
            Backend::External => Ok(Segmenter::External(AdapterClient::spawn(&cfg.command, cfg.timeout_ms)?)),
        }
    }

    pub fn segment(&mut self, image: &RgbImage, prompts: &PromptSet) -> Result<Mask> {
        prompts.validate(image.width(), image.height())?;
        match self {
            Segmenter::Reference(cfg) => segment_reference(image, prompts, cfg),
            Segmenter::External(client) => client.segment(image, prompts),
        }
    }
}
