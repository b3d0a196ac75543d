//! Converting attention maps into segmentation prompts.
//!
//! "Red areas" are the pixels at or above `activation_fraction * max(A)`.
//! Several such regions become one point each (their snapped centroids). A
//! single region yields its peak plus a few points sampled near the peak. The
//! box prompt spans every red pixel.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::dataio::Mask;
use crate::error::{Error, Result};
use crate::gradcam::AttentionMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(format!("connectivity must be 4 or 8, got {v}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

impl Connectivity {
    fn offsets(&self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub activation_fraction: f64,
    pub connectivity: Connectivity,
    pub sample_count: usize,
    /// Chebyshev radius around the peak; `None` means `max(2, ceil(0.05 * max(H, W)))`.
    pub sample_radius: Option<usize>,
    /// Sampling seed; the pipeline derives it per sample from the global seed and the sample id.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            activation_fraction: 0.8,
            connectivity: Connectivity::Eight,
            sample_count: 3,
            sample_radius: None,
            seed: 0,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.activation_fraction > 0.0 && self.activation_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "activation_fraction must be in (0, 1], got {}",
                self.activation_fraction
            )));
        }
        if self.sample_count == 0 {
            return Err(Error::Config("sample_count must be at least 1".into()));
        }
        if self.sample_radius == Some(0) {
            return Err(Error::Config("sample_radius must be at least 1".into()));
        }
        Ok(())
    }

    pub fn radius_for(&self, height: usize, width: usize) -> usize {
        self.sample_radius
            .unwrap_or_else(|| ((0.05 * height.max(width) as f64).ceil() as usize).max(2))
    }
}

/// Pixel coordinate, x = column, y = row, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Point {
    pub x: usize,
    pub y: usize,
}

impl Point {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    fn from_rc((row, col): (usize, usize)) -> Self {
        Self { x: col, y: row }
    }
}

/// Inclusive box corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptSet {
    SinglePoint(Point),
    /// At least two distinct points.
    MultiplePoints(Vec<Point>),
    BoundingBox(BBox),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    SinglePoint,
    MultiplePoints,
    BoundingBox,
}

impl PromptSet {
    pub fn kind(&self) -> PromptKind {
        match self {
            PromptSet::SinglePoint(_) => PromptKind::SinglePoint,
            PromptSet::MultiplePoints(_) => PromptKind::MultiplePoints,
            PromptSet::BoundingBox(_) => PromptKind::BoundingBox,
        }
    }

    pub fn points(&self) -> &[Point] {
        match self {
            PromptSet::SinglePoint(p) => std::slice::from_ref(p),
            PromptSet::MultiplePoints(ps) => ps,
            PromptSet::BoundingBox(_) => &[],
        }
    }

    /// Checks the structural invariants and that every coordinate lies in a width x height image.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let check = |x: usize, y: usize| {
            if x >= width || y >= height {
                Err(Error::OutOfBounds { x: x as i64, y: y as i64, width, height })
            } else {
                Ok(())
            }
        };
        match self {
            PromptSet::SinglePoint(p) => check(p.x, p.y),
            PromptSet::MultiplePoints(ps) => {
                if ps.len() < 2 {
                    return Err(Error::InvalidArgument("multiple_points needs at least 2 points".into()));
                }
                let mut sorted = ps.clone();
                sorted.sort();
                sorted.dedup();
                if sorted.len() != ps.len() {
                    return Err(Error::InvalidArgument("multiple_points contains duplicates".into()));
                }
                ps.iter().try_for_each(|p| check(p.x, p.y))
            }
            PromptSet::BoundingBox(b) => {
                if b.x0 > b.x1 || b.y0 > b.y1 {
                    return Err(Error::InvalidArgument(format!("inverted box {b:?}")));
                }
                check(b.x0, b.y0)?;
                check(b.x1, b.y1)
            }
        }
    }

    pub fn to_json(&self) -> PromptJson {
        match self {
            PromptSet::BoundingBox(b) => PromptJson {
                v: 1,
                kind: PromptJsonKind::Box,
                points: None,
                bbox: Some([b.x0, b.y0, b.x1, b.y1]),
            },
            _ => PromptJson {
                v: 1,
                kind: PromptJsonKind::Points,
                points: Some(self.points().iter().map(|p| [p.x, p.y]).collect()),
                bbox: None,
            },
        }
    }

    pub fn from_json(j: &PromptJson) -> Result<Self> {
        if j.v != 1 {
            return Err(Error::ProtocolVersion(j.v));
        }
        match (j.kind, &j.points, &j.bbox) {
            (PromptJsonKind::Points, Some(pts), None) => match pts.as_slice() {
                [] => Err(Error::Protocol("points prompt without points".into())),
                [[x, y]] => Ok(PromptSet::SinglePoint(Point::new(*x, *y))),
                _ => Ok(PromptSet::MultiplePoints(pts.iter().map(|[x, y]| Point::new(*x, *y)).collect())),
            },
            (PromptJsonKind::Box, None, Some([x0, y0, x1, y1])) => Ok(PromptSet::BoundingBox(BBox {
                x0: *x0,
                y0: *y0,
                x1: *x1,
                y1: *y1,
            })),
            _ => Err(Error::Protocol("prompt kind does not match its fields".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptJsonKind {
    Points,
    Box,
}

/// Wire form: `{"v":1,"kind":"points","points":[[x,y],...]}` or
/// `{"v":1,"kind":"box","box":[x0,y0,x1,y1]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptJson {
    pub v: u64,
    pub kind: PromptJsonKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<[usize; 2]>>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[usize; 4]>,
}

/// Which prompt form the pipeline hands to the segmenter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Single,
    Multi,
    Box,
}

impl PromptMode {
    pub const ALL: [PromptMode; 3] = [PromptMode::Single, PromptMode::Multi, PromptMode::Box];

    pub fn name(&self) -> &'static str {
        match self {
            PromptMode::Single => "single",
            PromptMode::Multi => "multi",
            PromptMode::Box => "box",
        }
    }
}

impl std::str::FromStr for PromptMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(PromptMode::Single),
            "multi" => Ok(PromptMode::Multi),
            "box" => Ok(PromptMode::Box),
            _ => Err(Error::Config(format!("unknown prompt mode `{s}`"))),
        }
    }
}

/// A connected red region.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// (row, col) in row-major order.
    pub pixels: Vec<(usize, usize)>,
    /// Mean position snapped to the nearest member pixel.
    pub centroid: (usize, usize),
    pub peak: (usize, usize),
    pub peak_value: f64,
    /// (min_row, min_col, max_row, max_col).
    pub bbox: (usize, usize, usize, usize),
}

/// Pixels with `A >= fraction * max(A)`; empty when the map is zero.
pub fn binarize(map: &AttentionMap, fraction: f64) -> Mask {
    let (h, w) = (map.height(), map.width());
    let max = map.normalized.data().iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Mask::new(w, h);
    }
    let cut = fraction * max;
    Mask::from_fn(w, h, |x, y| map.at(y, x) >= cut)
}

/// Connected regions of `mask`, ordered by descending peak activation in `map`.
pub fn components(mask: &Mask, map: &AttentionMap, connectivity: Connectivity) -> Vec<Component> {
    let (w, h) = (mask.width(), mask.height());
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for (sx, sy) in mask.iter_set() {
        if seen[sy * w + sx] {
            continue;
        }
        seen[sy * w + sx] = true;
        queue.push_back((sy, sx));
        let mut pixels = Vec::new();
        while let Some((r, c)) = queue.pop_front() {
            pixels.push((r, c));
            for &(dr, dc) in connectivity.offsets() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if mask.get(nc, nr) && !seen[nr * w + nc] {
                    seen[nr * w + nc] = true;
                    queue.push_back((nr, nc));
                }
            }
        }
        pixels.sort_unstable();
        out.push(summarize(pixels, map));
    }
    out.sort_by(|a, b| b.peak_value.total_cmp(&a.peak_value).then(a.peak.cmp(&b.peak)));
    out
}

fn summarize(pixels: Vec<(usize, usize)>, map: &AttentionMap) -> Component {
    let n = pixels.len() as f64;
    let mean_r = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let mean_c = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let mut centroid = pixels[0];
    let mut best_d = f64::INFINITY;
    let mut peak = pixels[0];
    let mut peak_value = f64::NEG_INFINITY;
    let mut bbox = (usize::MAX, usize::MAX, 0, 0);
    // pixels are row-major, so strict comparisons keep the smallest (row, col) on ties
    for &(r, c) in &pixels {
        let d = (r as f64 - mean_r).powi(2) + (c as f64 - mean_c).powi(2);
        if d < best_d {
            best_d = d;
            centroid = (r, c);
        }
        let v = map.at(r, c);
        if v > peak_value {
            peak_value = v;
            peak = (r, c);
        }
        bbox = (bbox.0.min(r), bbox.1.min(c), bbox.2.max(r), bbox.3.max(c));
    }
    Component { pixels, centroid, peak, peak_value, bbox }
}

/// Point prompts: one centroid per region, or peak plus local samples for a single region.
pub fn to_point_prompts(map: &AttentionMap, cfg: &PromptConfig) -> Result<PromptSet> {
    cfg.validate()?;
    let mask = binarize(map, cfg.activation_fraction);
    let comps = components(&mask, map, cfg.connectivity);
    match comps.as_slice() {
        [] => Err(Error::NoActivation),
        [only] => {
            let radius = cfg.radius_for(map.height(), map.width());
            let (pr, pc) = only.peak;
            let candidates: Vec<(usize, usize)> = only
                .pixels
                .iter()
                .copied()
                .filter(|&(r, c)| (r, c) != only.peak && r.abs_diff(pr).max(c.abs_diff(pc)) <= radius)
                .collect();
            if candidates.is_empty() {
                return Ok(PromptSet::SinglePoint(Point::from_rc(only.peak)));
            }
            let amount = cfg.sample_count.min(candidates.len());
            let mut rng = SplitMix64::seed_from_u64(cfg.seed);
            let picks = rand::seq::index::sample(&mut rng, candidates.len(), amount);
            let mut points = vec![Point::from_rc(only.peak)];
            points.extend(picks.iter().map(|i| Point::from_rc(candidates[i])));
            Ok(PromptSet::MultiplePoints(points))
        }
        many => Ok(PromptSet::MultiplePoints(
            many.iter().map(|c| Point::from_rc(c.centroid)).collect(),
        )),
    }
}

/// The map's peak as a lone point.
pub fn to_single_point_prompt(map: &AttentionMap) -> Result<PromptSet> {
    if map.empty || map.normalized.data().iter().all(|&v| v == 0.0) {
        return Err(Error::NoActivation);
    }
    Ok(PromptSet::SinglePoint(Point::from_rc(map.peak)))
}

/// Tight inclusive box over every red pixel.
pub fn to_bbox_prompt(map: &AttentionMap, cfg: &PromptConfig) -> Result<PromptSet> {
    cfg.validate()?;
    let mask = binarize(map, cfg.activation_fraction);
    let mut it = mask.iter_set();
    let (x, y) = it.next().ok_or(Error::NoActivation)?;
    let mut b = BBox { x0: x, y0: y, x1: x, y1: y };
    for (x, y) in it {
        b.x0 = b.x0.min(x);
        b.y0 = b.y0.min(y);
        b.x1 = b.x1.max(x);
        b.y1 = b.y1.max(y);
    }
    Ok(PromptSet::BoundingBox(b))
}

pub fn prompts_for(map: &AttentionMap, mode: PromptMode, cfg: &PromptConfig) -> Result<PromptSet> {
    match mode {
        PromptMode::Single => to_single_point_prompt(map),
        PromptMode::Multi => to_point_prompts(map, cfg),
        PromptMode::Box => to_bbox_prompt(map, cfg),
    }
}
