use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::patterns::{ClassId, ClassPattern};
use crate::datagen::render::{render_object, RenderConfig};
use crate::error::{Error, Result};

/// Canonical unordered pair of distinct classes, `lo < hi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CompositionLabel {
    lo: ClassId,
    hi: ClassId,
}

impl CompositionLabel {
    pub fn new(a: ClassId, b: ClassId) -> Result<Self> {
        match a.cmp(&b) {
            std::cmp::Ordering::Less => Ok(Self { lo: a, hi: b }),
            std::cmp::Ordering::Greater => Ok(Self { lo: b, hi: a }),
            std::cmp::Ordering::Equal => Err(Error::invalid(format!(
                "composition label needs two distinct classes, got ({a}, {a})"
            ))),
        }
    }

    pub fn lo(&self) -> ClassId {
        self.lo
    }

    pub fn hi(&self) -> ClassId {
        self.hi
    }

    pub fn contains(&self, c: ClassId) -> bool {
        self.lo == c || self.hi == c
    }
}

impl fmt::Display for CompositionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.lo, self.hi)
    }
}

/// Quadrant indices: 0 = top-left, 1 = top-right, 2 = bottom-left, 3 = bottom-right.
pub const QUADRANTS: usize = 4;

/// A 2×2 grid image holding two objects; empty quadrants are exactly 0.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeImage {
    /// `2R × 2R` row-major pixels.
    pub pixels: Vec<f32>,
    pub label: CompositionLabel,
    /// The two occupied quadrant indices, ascending.
    pub occupied: [u8; 2],
}

impl CompositeImage {
    pub fn side(&self) -> usize {
        (self.pixels.len() as f64).sqrt() as usize
    }

    pub fn occupancy_mask(&self) -> u16 {
        (1 << self.occupied[0]) | (1 << self.occupied[1])
    }

    pub fn is_occupied(&self, quadrant: usize) -> bool {
        self.occupied.iter().any(|&q| q as usize == quadrant)
    }
}

/// Copies an `res × res` crop into quadrant `q` of a `2res × 2res` canvas.
pub fn paste_quadrant(canvas: &mut [f32], res: usize, q: usize, crop: &[f32]) {
    let side = 2 * res;
    let (oy, ox) = ((q / 2) * res, (q % 2) * res);
    for y in 0..res {
        let dst = (oy + y) * side + ox;
        canvas[dst..dst + res].copy_from_slice(&crop[y * res..(y + 1) * res]);
    }
}

const PAIRS: [[u8; 2]; 6] = [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]];

pub fn render_composite<R: Rng>(
    patterns: &[ClassPattern],
    label: CompositionLabel,
    cfg: &RenderConfig,
    rng: &mut R,
) -> CompositeImage {
    let res = cfg.resolution;
    let occupied = *PAIRS.choose(rng).unwrap();
    let (first, second) = if rng.gen_bool(0.5) {
        (label.lo, label.hi)
    } else {
        (label.hi, label.lo)
    };
    let mut pixels = vec![0.0; 4 * res * res];
    for (&q, class) in occupied.iter().zip([first, second]) {
        let crop = render_object(&patterns[class as usize], cfg, rng);
        paste_quadrant(&mut pixels, res, q as usize, &crop.pixels);
    }
    CompositeImage {
        pixels,
        label,
        occupied,
    }
}

/// `per_combo` composites for every label, grouped by label in input order.
pub fn build_composites<R: Rng>(
    patterns: &[ClassPattern],
    combos: &[CompositionLabel],
    per_combo: usize,
    cfg: &RenderConfig,
    rng: &mut R,
) -> Vec<CompositeImage> {
    combos
        .iter()
        .flat_map(|&label| (0..per_combo).map(move |_| label))
        .map(|label| render_composite(patterns, label, cfg, rng))
        .collect()
}

/// All `C(k, 2)` canonical pairs in lexicographic order.
pub fn all_pairs(k: usize) -> Vec<CompositionLabel> {
    (0..k as ClassId)
        .flat_map(|a| (a + 1..k as ClassId).map(move |b| CompositionLabel { lo: a, hi: b }))
        .collect()
}

/// `n` distinct pairs sampled uniformly without replacement, sorted.
pub fn select_combinations<R: Rng>(k: usize, n: usize, rng: &mut R) -> Result<Vec<CompositionLabel>> {
    let universe = all_pairs(k);
    if n > universe.len() {
        return Err(Error::invalid(format!(
            "{n} combinations requested but only C({k},2) = {} exist",
            universe.len()
        )));
    }
    let mut picked: Vec<CompositionLabel> = universe.choose_multiple(rng, n).copied().collect();
    picked.sort();
    Ok(picked)
}
