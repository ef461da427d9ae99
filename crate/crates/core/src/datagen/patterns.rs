use rand::Rng;

use crate::error::{Error, Result};
use crate::seeding::rng_from;

pub type ClassId = u16;

pub const GLYPH_SIDE: usize = 5;
pub const GLYPH_BITS: usize = GLYPH_SIDE * GLYPH_SIDE;
pub const MIN_HAMMING: u32 = 8;
pub const MIN_SET_BITS: u32 = 6;
pub const MAX_CLASSES: usize = 64;
const MAX_ATTEMPTS: usize = 100_000;

/// A class's 5×5 binary glyph, bit `r*5 + c` set when cell (r, c) is on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassPattern {
    pub class_id: ClassId,
    pub bits: u32,
}

impl ClassPattern {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits >> (row * GLYPH_SIDE + col) & 1 == 1
    }

    pub fn set_bits(&self) -> u32 {
        self.bits.count_ones()
    }

    pub fn hamming(&self, other: &ClassPattern) -> u32 {
        (self.bits ^ other.bits).count_ones()
    }

    /// Row-major `#`/`.` rendering, rows separated by `/`.
    pub fn to_ascii(&self) -> String {
        (0..GLYPH_SIDE)
            .map(|r| {
                (0..GLYPH_SIDE)
                    .map(|c| if self.get(r, c) { '#' } else { '.' })
                    .collect::<String>()
            })
            .collect::<Vec<_>>()
            .join("/")
    }

    pub fn from_ascii(class_id: ClassId, s: &str) -> Result<Self> {
        let cells: Vec<char> = s.chars().filter(|&c| c != '/').collect();
        if cells.len() != GLYPH_BITS || cells.iter().any(|&c| c != '#' && c != '.') {
            return Err(Error::invalid(format!("bad glyph string {s:?}")));
        }
        let bits = cells
            .iter()
            .enumerate()
            .fold(0u32, |acc, (i, &c)| if c == '#' { acc | 1 << i } else { acc });
        Ok(Self { class_id, bits })
    }
}

/// Rejection-samples `k` glyphs with pairwise Hamming distance ≥ 8 and at
/// least 6 lit cells each.
pub fn gen_class_patterns(seed: u64, k: usize) -> Result<Vec<ClassPattern>> {
    if k == 0 || k > MAX_CLASSES {
        return Err(Error::invalid(format!("class count {k} outside 1..={MAX_CLASSES}")));
    }
    let mut rng = rng_from(seed);
    let mut out: Vec<ClassPattern> = Vec::with_capacity(k);
    let mut attempts = 0;
    while out.len() < k {
        if attempts == MAX_ATTEMPTS {
            return Err(Error::invalid(format!(
                "could not place {k} glyphs at Hamming distance ≥ {MIN_HAMMING} after \
                 {MAX_ATTEMPTS} attempts (placed {}); use larger bitmaps for more classes",
                out.len()
            )));
        }
        attempts += 1;
        let candidate = ClassPattern {
            class_id: out.len() as ClassId,
            bits: rng.gen::<u32>() & ((1 << GLYPH_BITS) - 1),
        };
        if candidate.set_bits() >= MIN_SET_BITS
            && out.iter().all(|p| p.hamming(&candidate) >= MIN_HAMMING)
        {
            out.push(candidate);
        }
    }
    Ok(out)
}
