//! Specialist classifiers: each owns a few classes plus an "other" output
//! that absorbs everything else. Also the all-class monolith.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{ClassId, ObjectSplits, Sample};
use crate::error::{Error, Result};
use crate::nn::{load_model, save_model, ModelMeta, Network};
use crate::seeding::{rng_for, rng_from, sub_seed};
use crate::training::{evaluate_classifier, train_classifier, Dataset, TrainHyper, TrainLog};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub expert_id: usize,
    /// Output `i` predicts `owned_classes[i]`.
    pub owned_classes: Vec<ClassId>,
}

impl ExpertSpec {
    pub fn num_outputs(&self) -> usize {
        self.owned_classes.len() + 1
    }

    /// Index of the "other" output (always the last one).
    pub fn other_output(&self) -> usize {
        self.owned_classes.len()
    }

    pub fn class_of(&self, output: usize) -> Option<ClassId> {
        self.owned_classes.get(output).copied()
    }

    pub fn output_of(&self, class: ClassId) -> Option<usize> {
        self.owned_classes.iter().position(|&c| c == class)
    }
}

/// Shuffles `0..k` and deals it out in chunks of `per_expert`; each chunk is
/// sorted.
pub fn partition_classes(k: usize, per_expert: usize, seed: u64) -> Result<Vec<ExpertSpec>> {
    if per_expert == 0 || k == 0 || !k.is_multiple_of(per_expert) {
        return Err(Error::invalid(format!(
            "{per_expert} classes per expert does not divide {k} classes"
        )));
    }
    let mut classes: Vec<ClassId> = (0..k as ClassId).collect();
    classes.shuffle(&mut rng_for(seed, "partition"));
    Ok(classes
        .chunks(per_expert)
        .enumerate()
        .map(|(expert_id, chunk)| {
            let mut owned_classes = chunk.to_vec();
            owned_classes.sort_unstable();
            ExpertSpec {
                expert_id,
                owned_classes,
            }
        })
        .collect())
}

/// Object crops as a dataset labelled by class id.
pub fn object_dataset(samples: &[Sample], resolution: usize) -> Dataset {
    let mut d = Dataset::new(vec![1, resolution, resolution]);
    for s in samples {
        d.push(&s.pixels, s.label as usize);
    }
    d
}

/// An expert's training view of one object split.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertDataset {
    pub data: Dataset,
    /// Original class of each sample, parallel to `data.labels`.
    pub source_classes: Vec<ClassId>,
}

/// All owned samples relabelled to their output index, plus as many "other"
/// samples, spread evenly over the non-owned classes and drawn without
/// replacement. When the count does not divide evenly, randomly chosen
/// source classes contribute one extra sample.
pub fn make_expert_dataset(
    spec: &ExpertSpec,
    samples: &[Sample],
    resolution: usize,
    seed: u64,
) -> Result<ExpertDataset> {
    let mut rng = rng_from(seed);
    let mut owned = Vec::new();
    let mut by_class: std::collections::BTreeMap<ClassId, Vec<usize>> = Default::default();
    for (i, s) in samples.iter().enumerate() {
        match spec.output_of(s.label) {
            Some(_) => owned.push(i),
            None => by_class.entry(s.label).or_default().push(i),
        }
    }
    if owned.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no samples of expert {}'s classes",
            spec.expert_id
        )));
    }
    let sources: Vec<ClassId> = by_class.keys().copied().collect();
    if sources.is_empty() {
        return Err(Error::invalid(format!(
            "expert {} owns every class; no \"other\" samples exist",
            spec.expert_id
        )));
    }
    let base = owned.len() / sources.len();
    let mut extra = sources.clone();
    extra.shuffle(&mut rng);
    extra.truncate(owned.len() % sources.len());

    let mut chosen = owned;
    for class in &sources {
        let quota = base + usize::from(extra.contains(class));
        let pool = by_class.get_mut(class).unwrap();
        if pool.len() < quota {
            return Err(Error::invalid(format!(
                "class {class} has {} samples, {quota} needed for the \"other\" pool",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        chosen.extend_from_slice(&pool[..quota]);
    }
    chosen.shuffle(&mut rng);

    let mut data = Dataset::new(vec![1, resolution, resolution]);
    let mut source_classes = Vec::with_capacity(chosen.len());
    for i in chosen {
        let s = &samples[i];
        let label = spec.output_of(s.label).unwrap_or(spec.other_output());
        data.push(&s.pixels, label);
        source_classes.push(s.label);
    }
    Ok(ExpertDataset {
        data,
        source_classes,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertModel {
    pub spec: ExpertSpec,
    pub net: Network<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonolithModel {
    pub net: Network<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertReport {
    /// `None` for the monolith.
    pub expert_id: Option<usize>,
    pub test_accuracy: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub wall_seconds: f64,
}

/// Seed of expert `id`'s training stream.
pub fn expert_seed(base_seed: u64, expert_id: usize) -> u64 {
    base_seed.wrapping_add(expert_id as u64)
}

fn expert_split(spec: &ExpertSpec, samples: &[Sample], res: usize, seed: u64, split: &str) -> Result<Dataset> {
    let tag = format!("expert/{split}");
    Ok(make_expert_dataset(spec, samples, res, sub_seed(seed, &tag))?.data)
}

pub fn train_expert(
    spec: &ExpertSpec,
    objects: &ObjectSplits,
    resolution: usize,
    hyper: &TrainHyper,
    base_seed: u64,
) -> Result<(ExpertModel, ExpertReport, TrainLog)> {
    let seed = expert_seed(base_seed, spec.expert_id);
    let train = expert_split(spec, &objects.train, resolution, seed, "train")?;
    let val = expert_split(spec, &objects.val, resolution, seed, "val")?;
    let test = expert_split(spec, &objects.test, resolution, seed, "test")?;
    let init = Network::micro_cnn(1, resolution, spec.num_outputs(), &mut rng_for(seed, "init"))?;
    let (net, log) = train_classifier(init, &train, Some(&val), hyper, sub_seed(seed, "shuffle"))?;
    let report = ExpertReport {
        expert_id: Some(spec.expert_id),
        test_accuracy: evaluate_classifier(&net, &test)?,
        epochs: hyper.epochs,
        best_epoch: log.best_epoch,
        wall_seconds: log.wall_seconds,
    };
    Ok((
        ExpertModel {
            spec: spec.clone(),
            net,
        },
        report,
        log,
    ))
}

pub fn train_monolith(
    objects: &ObjectSplits,
    num_classes: usize,
    resolution: usize,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(MonolithModel, ExpertReport, TrainLog)> {
    let train = object_dataset(&objects.train, resolution);
    let val = object_dataset(&objects.val, resolution);
    let test = object_dataset(&objects.test, resolution);
    let init = Network::micro_cnn(1, resolution, num_classes, &mut rng_for(seed, "monolith/init"))?;
    let (net, log) = train_classifier(init, &train, Some(&val), hyper, sub_seed(seed, "monolith/shuffle"))?;
    let report = ExpertReport {
        expert_id: None,
        test_accuracy: evaluate_classifier(&net, &test)?,
        epochs: hyper.epochs,
        best_epoch: log.best_epoch,
        wall_seconds: log.wall_seconds,
    };
    Ok((MonolithModel { net }, report, log))
}

pub fn expert_stem(expert_id: usize) -> String {
    format!("expert_{expert_id}")
}

pub const MONOLITH_STEM: &str = "monolith";

pub fn save_expert(model: &ExpertModel, dir: &Path, seed: u64, config_hash: &str) -> Result<()> {
    let meta = ModelMeta {
        seed,
        class_ids: model.spec.owned_classes.iter().map(|&c| c as u32).collect(),
        other_output: Some(model.spec.other_output()),
        config_hash: config_hash.into(),
    };
    save_model(&model.net, &meta, dir, &expert_stem(model.spec.expert_id))?;
    Ok(())
}

pub fn load_expert(dir: &Path, expert_id: usize, config_hash: Option<&str>) -> Result<ExpertModel> {
    let stem = expert_stem(expert_id);
    let (net, meta) = load_model::<f32>(dir, &stem, config_hash)?;
    let spec = ExpertSpec {
        expert_id,
        owned_classes: meta.class_ids.iter().map(|&c| c as ClassId).collect(),
    };
    if meta.other_output != Some(spec.other_output()) || net.num_outputs() != spec.num_outputs() {
        return Err(Error::artifact(
            dir.join(format!("{stem}.json")),
            "output arity does not match the stored class map",
        ));
    }
    Ok(ExpertModel { spec, net })
}

pub fn save_monolith(model: &MonolithModel, dir: &Path, seed: u64, config_hash: &str) -> Result<()> {
    let meta = ModelMeta {
        seed,
        class_ids: (0..model.net.num_outputs() as u32).collect(),
        other_output: None,
        config_hash: config_hash.into(),
    };
    save_model(&model.net, &meta, dir, MONOLITH_STEM)?;
    Ok(())
}

pub fn load_monolith(dir: &Path, config_hash: Option<&str>) -> Result<MonolithModel> {
    let (net, _) = load_model::<f32>(dir, MONOLITH_STEM, config_hash)?;
    Ok(MonolithModel { net })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_object_dataset, gen_class_patterns, DataConfig};
    use std::collections::{BTreeMap, BTreeSet};

    #[test]
    fn partition_shapes() {
        let specs = partition_classes(21, 3, 0).unwrap();
        assert_eq!(specs.len(), 7);
        let all: BTreeSet<ClassId> = specs.iter().flat_map(|s| s.owned_classes.clone()).collect();
        assert_eq!(all, (0..21).collect());
        assert_eq!(specs.iter().map(|s| s.owned_classes.len()).sum::<usize>(), 21);

        let small = partition_classes(4, 2, 3).unwrap();
        assert_eq!(small.len(), 2);
        assert!(partition_classes(21, 4, 0).is_err());
        assert_eq!(partition_classes(21, 3, 9).unwrap(), partition_classes(21, 3, 9).unwrap());
    }

    #[test]
    fn label_map_round_trip() {
        for spec in partition_classes(21, 3, 5).unwrap() {
            for (i, &c) in spec.owned_classes.iter().enumerate() {
                assert_eq!(spec.output_of(spec.class_of(i).unwrap()), Some(i));
                assert_eq!(spec.class_of(spec.output_of(c).unwrap()), Some(c));
            }
            assert_eq!(spec.class_of(spec.other_output()), None);
        }
    }

    fn fake_samples(k: usize, per_class: usize) -> Vec<Sample> {
        (0..k)
            .flat_map(|c| {
                (0..per_class).map(move |i| Sample {
                    pixels: vec![c as f32, i as f32, 0.0, 0.0],
                    label: c as ClassId,
                })
            })
            .collect()
    }

    #[test]
    fn other_pool_is_balanced_and_foreign() {
        let samples = fake_samples(21, 500);
        let spec = &partition_classes(21, 3, 1).unwrap()[2];
        let set = make_expert_dataset(spec, &samples, 2, 7).unwrap();
        let other = spec.other_output();
        let n_other = set.data.labels.iter().filter(|&&l| l == other).count();
        let n_owned = set.data.len() - n_other;
        assert_eq!((n_owned, n_other, set.data.len()), (1500, 1500, 3000));

        let mut per_source: BTreeMap<ClassId, usize> = BTreeMap::new();
        for (l, c) in set.data.labels.iter().zip(&set.source_classes) {
            if *l == other {
                assert!(!spec.owned_classes.contains(c));
                *per_source.entry(*c).or_default() += 1;
            } else {
                assert_eq!(spec.class_of(*l), Some(*c));
            }
        }
        assert_eq!(per_source.len(), 18);
        let (lo, hi) = (
            *per_source.values().min().unwrap() as f64,
            *per_source.values().max().unwrap() as f64,
        );
        let mean = 1500.0 / 18.0;
        assert!(lo >= 0.9 * mean && hi <= 1.1 * mean, "{per_source:?}");

        // no sample appears twice
        let distinct: BTreeSet<Vec<u32>> = (0..set.data.len())
            .map(|i| set.data.sample(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(distinct.len(), 3000);
    }

    #[test]
    fn expert_training_is_deterministic_and_persists() {
        let config = DataConfig {
            num_classes: 4,
            train_per_class: 30,
            val_per_class: 6,
            test_per_class: 6,
            ..DataConfig::default()
        };
        let patterns = gen_class_patterns(0, 4).unwrap();
        let objects = build_object_dataset(&patterns, &config, 0);
        let spec = &partition_classes(4, 2, 0).unwrap()[1];
        let hyper = TrainHyper { epochs: 2, ..TrainHyper::default() };
        let (a, report, log) = train_expert(spec, &objects, 16, &hyper, 11).unwrap();
        let (b, _, _) = train_expert(spec, &objects, 16, &hyper, 11).unwrap();
        assert_eq!(a.net.param_digest(), b.net.param_digest());
        assert_eq!(a.net.num_outputs(), 3);
        assert_eq!(log.epochs.len(), 2);
        assert!((0.0..=1.0).contains(&report.test_accuracy));

        let dir = tempfile::tempdir().unwrap();
        save_expert(&a, dir.path(), 12, "h").unwrap();
        let back = load_expert(dir.path(), 1, Some("h")).unwrap();
        assert_eq!(back, a);
        assert!(load_expert(dir.path(), 1, Some("other")).is_err());
        let err = load_expert(dir.path(), 0, None).unwrap_err().to_string();
        assert!(err.contains("train-experts"), "{err}");
    }

    #[test]
    fn monolith_arity() {
        let config = DataConfig {
            num_classes: 5,
            train_per_class: 4,
            val_per_class: 2,
            test_per_class: 2,
            ..DataConfig::default()
        };
        let patterns = gen_class_patterns(0, 5).unwrap();
        let objects = build_object_dataset(&patterns, &config, 0);
        let hyper = TrainHyper { epochs: 1, ..TrainHyper::default() };
        let (m, _, _) = train_monolith(&objects, 5, 16, &hyper, 3).unwrap();
        assert_eq!(m.net.num_outputs(), 5);
        let (m2, _, _) = train_monolith(&objects, 5, 16, &hyper, 3).unwrap();
        assert_eq!(m.net.param_digest(), m2.net.param_digest());
    }
}
