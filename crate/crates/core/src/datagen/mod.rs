//! Synthetic compositional benchmark: glyph classes, object crops, 2×2
//! composites, the class-incremental `con` stream and the few-shot `sys`
//! stream. Everything is a pure function of `(DataConfig, seed)`.

mod composite;
mod pack_io;
mod patterns;
mod render;
mod stream;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use composite::{
    all_pairs, build_composites, paste_quadrant, render_composite, select_combinations,
    CompositeImage, CompositionLabel, QUADRANTS,
};
pub use pack_io::{pack_hash, read_manifest, read_pack, write_pack, PackManifest, PACK_FORMAT};
pub use patterns::{gen_class_patterns, ClassId, ClassPattern, GLYPH_SIDE, MIN_HAMMING};
pub use render::{render_object, RenderConfig, Sample};
pub use stream::{
    build_con_stream, build_sys_stream, Experience, ExperienceStream, SysEpisode, SysStream,
};

use crate::error::{Error, Result};
use crate::seeding::{rng_for, sub_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub num_classes: usize,
    pub render: RenderConfig,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub n_combos: usize,
    pub test_per_combo: usize,
    pub con_experiences: usize,
    pub con_train_per_combo: usize,
    pub sys_experiences: usize,
    pub sys_n_way: usize,
    pub sys_shots: usize,
    pub sys_queries: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 21,
            render: RenderConfig::default(),
            train_per_class: 500,
            val_per_class: 50,
            test_per_class: 100,
            n_combos: 100,
            test_per_combo: 100,
            con_experiences: 10,
            con_train_per_combo: 30,
            sys_experiences: 300,
            sys_n_way: 10,
            sys_shots: 10,
            sys_queries: 10,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        if self.train_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::invalid("every object split needs ≥ 1 sample per class"));
        }
        if self.test_per_combo == 0 || self.con_train_per_combo == 0 {
            return Err(Error::invalid("composite counts must be ≥ 1"));
        }
        Ok(())
    }
}

/// Per-class object crops, grouped by class within each split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjectSplits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl ObjectSplits {
    /// True when no image appears bit-identically in two different splits.
    pub fn splits_disjoint(&self) -> bool {
        let digest = |s: &Sample| -> [u8; 32] {
            let mut h = Sha256::new();
            for v in &s.pixels {
                h.update(v.to_le_bytes());
            }
            h.finalize().into()
        };
        let train: HashSet<_> = self.train.iter().map(digest).collect();
        let val: HashSet<_> = self.val.iter().map(digest).collect();
        self.test
            .iter()
            .map(digest)
            .chain(val.iter().copied())
            .all(|d| !train.contains(&d))
            && self.test.iter().map(digest).all(|d| !val.contains(&d))
    }
}

pub fn build_object_dataset(
    patterns: &[ClassPattern],
    config: &DataConfig,
    seed: u64,
) -> ObjectSplits {
    let split = |tag: &str, per_class: usize| {
        let mut rng = rng_for(seed, tag);
        patterns
            .iter()
            .flat_map(|p| (0..per_class).map(move |_| p))
            .map(|p| render_object(p, &config.render, &mut rng))
            .collect::<Vec<_>>()
    };
    ObjectSplits {
        train: split("objects/train", config.train_per_class),
        val: split("objects/val", config.val_per_class),
        test: split("objects/test", config.test_per_class),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkPack {
    pub config: DataConfig,
    pub seed: u64,
    pub patterns: Vec<ClassPattern>,
    pub objects: ObjectSplits,
    pub combos: Vec<CompositionLabel>,
    pub composite_test: Vec<CompositeImage>,
    pub con: ExperienceStream,
    pub sys: SysStream,
}

impl BenchmarkPack {
    pub fn resolution(&self) -> usize {
        self.config.render.resolution
    }
}

/// Few-shot labels are combinations outside the `con` set, unless that
/// leaves too few for an episode.
pub fn sys_universe(k: usize, con_combos: &[CompositionLabel], n_way: usize) -> Vec<CompositionLabel> {
    let novel: Vec<_> = all_pairs(k)
        .into_iter()
        .filter(|l| !con_combos.contains(l))
        .collect();
    if novel.len() >= n_way {
        novel
    } else {
        all_pairs(k)
    }
}

pub fn build_pack(config: &DataConfig, seed: u64) -> Result<BenchmarkPack> {
    config.validate()?;
    let patterns = gen_class_patterns(sub_seed(seed, "patterns"), config.num_classes)?;
    let objects = build_object_dataset(&patterns, config, seed);
    let combos = select_combinations(
        config.num_classes,
        config.n_combos,
        &mut rng_for(seed, "combos"),
    )?;
    let composite_test = build_composites(
        &patterns,
        &combos,
        config.test_per_combo,
        &config.render,
        &mut rng_for(seed, "composites/test"),
    );
    let con = build_con_stream(
        &patterns,
        &combos,
        &composite_test,
        config.con_experiences,
        config.con_train_per_combo,
        &config.render,
        sub_seed(seed, "con"),
    )?;
    let sys = build_sys_stream(
        &sys_universe(config.num_classes, &combos, config.sys_n_way),
        config.sys_experiences,
        config.sys_n_way,
        config.sys_shots,
        config.sys_queries,
        &mut rng_for(seed, "sys"),
    )?;
    Ok(BenchmarkPack {
        config: config.clone(),
        seed,
        patterns,
        objects,
        combos,
        composite_test,
        con,
        sys,
    })
}
