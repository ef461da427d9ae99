//! On-disk pack: `manifest.json` plus `data.bin`.
//!
//! `data.bin` is a sequence of sections. Each section is a little-endian u32
//! sample count followed, per sample, by its u16 label fields and its f32
//! pixels. Object samples carry one field (class id); composites carry three
//! (lo, hi, occupied-quadrant bitmask).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    BenchmarkPack, ClassPattern, CompositeImage, CompositionLabel, DataConfig, Experience,
    ExperienceStream, ObjectSplits, Sample, SysStream,
};
use crate::error::{Error, Result};
use crate::seeding::json_digest;

pub const PACK_FORMAT: &str = "ec-pack/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionMeta {
    pub name: String,
    pub offset: u64,
    pub bytes: u64,
    pub count: u32,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConExperienceMeta {
    pub id: usize,
    pub labels: Vec<CompositionLabel>,
    pub train_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackManifest {
    pub format: String,
    pub seed: u64,
    pub config: DataConfig,
    /// Digest of `(config, seed)`; downstream artifacts record it.
    pub config_hash: String,
    pub patterns: Vec<String>,
    pub combos: Vec<CompositionLabel>,
    pub con: Vec<ConExperienceMeta>,
    pub sys: SysStream,
    pub sections: Vec<SectionMeta>,
}

pub fn pack_hash(config: &DataConfig, seed: u64) -> String {
    json_digest(&(config, seed))
}

const SECTIONS: [&str; 5] = [
    "objects_train",
    "objects_val",
    "objects_test",
    "composite_test",
    "con_train",
];

fn encode_objects(samples: &[Sample]) -> Vec<u8> {
    let mut out = (samples.len() as u32).to_le_bytes().to_vec();
    for s in samples {
        out.extend_from_slice(&s.label.to_le_bytes());
        for v in &s.pixels {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn encode_composites<'a>(items: impl ExactSizeIterator<Item = &'a CompositeImage>) -> Vec<u8> {
    let mut out = (items.len() as u32).to_le_bytes().to_vec();
    for c in items {
        for field in [c.label.lo(), c.label.hi(), c.occupancy_mask()] {
            out.extend_from_slice(&field.to_le_bytes());
        }
        for v in &c.pixels {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_pack(pack: &BenchmarkPack, dir: &Path) -> Result<PackManifest> {
    fs::create_dir_all(dir)?;
    let con_train: Vec<&CompositeImage> =
        pack.con.experiences.iter().flat_map(|e| e.train.iter()).collect();
    let bodies = [
        encode_objects(&pack.objects.train),
        encode_objects(&pack.objects.val),
        encode_objects(&pack.objects.test),
        encode_composites(pack.composite_test.iter()),
        encode_composites(con_train.into_iter()),
    ];
    let mut file = std::io::BufWriter::new(fs::File::create(dir.join("data.bin"))?);
    let mut sections = Vec::new();
    let mut offset = 0u64;
    for (name, body) in SECTIONS.iter().zip(&bodies) {
        file.write_all(body)?;
        sections.push(SectionMeta {
            name: (*name).into(),
            offset,
            bytes: body.len() as u64,
            count: u32::from_le_bytes(body[..4].try_into().unwrap()),
            crc32: crc32fast::hash(body),
        });
        offset += body.len() as u64;
    }
    file.flush()?;
    let manifest = PackManifest {
        format: PACK_FORMAT.into(),
        seed: pack.seed,
        config: pack.config.clone(),
        config_hash: pack_hash(&pack.config, pack.seed),
        patterns: pack.patterns.iter().map(ClassPattern::to_ascii).collect(),
        combos: pack.combos.clone(),
        con: pack
            .con
            .experiences
            .iter()
            .map(|e| ConExperienceMeta {
                id: e.id,
                labels: e.labels.clone(),
                train_count: e.train.len(),
            })
            .collect(),
        sys: pack.sys.clone(),
        sections,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn pixels(&mut self, n: usize) -> Option<Vec<f32>> {
        self.take(4 * n).map(|b| {
            b.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        })
    }
}

pub fn read_manifest(dir: &Path) -> Result<PackManifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::MissingStage {
            path,
            stage: "datagen".into(),
        });
    }
    let manifest: PackManifest = serde_json::from_slice(&fs::read(&path)?)?;
    if manifest.format != PACK_FORMAT {
        return Err(Error::artifact(&path, format!("unknown format {}", manifest.format)));
    }
    if manifest.config_hash != pack_hash(&manifest.config, manifest.seed) {
        return Err(Error::artifact(&path, "config hash does not match config and seed"));
    }
    Ok(manifest)
}

pub fn read_pack(dir: &Path) -> Result<BenchmarkPack> {
    let manifest = read_manifest(dir)?;
    let data_path = dir.join("data.bin");
    let data = fs::read(&data_path)?;
    let bad = |detail: String| Error::artifact(&data_path, detail);
    let res = manifest.config.render.resolution;

    let mut bodies = Vec::new();
    for (meta, name) in manifest.sections.iter().zip(SECTIONS) {
        if meta.name != name {
            return Err(bad(format!("expected section {name}, found {}", meta.name)));
        }
        let body = data
            .get(meta.offset as usize..(meta.offset + meta.bytes) as usize)
            .ok_or_else(|| bad(format!("section {name} out of bounds")))?;
        if crc32fast::hash(body) != meta.crc32 {
            return Err(bad(format!("CRC32 mismatch in section {name}")));
        }
        bodies.push(body);
    }
    if bodies.len() != SECTIONS.len() {
        return Err(bad("missing sections".into()));
    }

    let objects = |body: &[u8]| -> Option<Vec<Sample>> {
        let mut c = Cursor { buf: body, pos: 0 };
        let n = c.u32()?;
        (0..n)
            .map(|_| {
                let label = c.u16()?;
                Some(Sample {
                    pixels: c.pixels(res * res)?,
                    label,
                })
            })
            .collect()
    };
    let composites = |body: &[u8]| -> Option<Vec<CompositeImage>> {
        let mut c = Cursor { buf: body, pos: 0 };
        let n = c.u32()?;
        (0..n)
            .map(|_| {
                let (lo, hi, mask) = (c.u16()?, c.u16()?, c.u16()?);
                let quads: Vec<u8> = (0..4u8).filter(|q| mask >> q & 1 == 1).collect();
                Some(CompositeImage {
                    label: CompositionLabel::new(lo, hi).ok()?,
                    occupied: quads.try_into().ok()?,
                    pixels: c.pixels(4 * res * res)?,
                })
            })
            .collect()
    };
    let decode_err = |name: &str| bad(format!("section {name} is truncated or malformed"));

    let objects = ObjectSplits {
        train: objects(bodies[0]).ok_or_else(|| decode_err(SECTIONS[0]))?,
        val: objects(bodies[1]).ok_or_else(|| decode_err(SECTIONS[1]))?,
        test: objects(bodies[2]).ok_or_else(|| decode_err(SECTIONS[2]))?,
    };
    let composite_test = composites(bodies[3]).ok_or_else(|| decode_err(SECTIONS[3]))?;
    let mut con_train = composites(bodies[4])
        .ok_or_else(|| decode_err(SECTIONS[4]))?
        .into_iter();
    let experiences = manifest
        .con
        .iter()
        .map(|meta| Experience {
            id: meta.id,
            labels: meta.labels.clone(),
            train: con_train.by_ref().take(meta.train_count).collect(),
            test: composite_test
                .iter()
                .filter(|c| meta.labels.contains(&c.label))
                .cloned()
                .collect(),
        })
        .collect();
    let patterns = manifest
        .patterns
        .iter()
        .enumerate()
        .map(|(i, s)| ClassPattern::from_ascii(i as u16, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkPack {
        config: manifest.config,
        seed: manifest.seed,
        patterns,
        objects,
        combos: manifest.combos,
        composite_test,
        con: ExperienceStream { experiences },
        sys: manifest.sys,
    })
}
