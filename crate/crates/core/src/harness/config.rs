//! Flat `key = value` run configuration.
//!
//! Blank lines and anything after `#` are ignored. Unknown or repeated keys
//! are errors. Lists are comma-separated.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::composition::{Occupancy, OCCUPANCY_EPSILON};
use crate::continual::{BaselineHyper, Method};
use crate::datagen::{DataConfig, RenderConfig};
use crate::error::{Error, Result};
use crate::fewshot::{FeatureMode, HeadHyper};
use crate::seeding::json_digest;
use crate::training::TrainHyper;

pub const SEED_ENV: &str = "EC_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Ec,
    Fewshot,
    Baseline(Method),
}

impl Stage {
    pub fn name(self) -> String {
        match self {
            Stage::Ec => "ec".into(),
            Stage::Fewshot => "fewshot".into(),
            Stage::Baseline(m) => m.name().into(),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "ec" => Ok(Stage::Ec),
            "fewshot" => Ok(Stage::Fewshot),
            other => other
                .parse::<Method>()
                .map(Stage::Baseline)
                .map_err(|_| Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub classes_per_expert: usize,
    pub expert: TrainHyper,
    pub fewshot_k: Vec<usize>,
    pub fewshot_seeds: usize,
    pub head: HeadHyper,
    pub feature_mode: FeatureMode,
    pub baseline: BaselineHyper,
    pub pretrained_backbone: bool,
    pub oracle_occupancy: bool,
    pub methods: Vec<Stage>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            classes_per_expert: 3,
            expert: TrainHyper::default(),
            fewshot_k: vec![3, 5, 7],
            fewshot_seeds: 5,
            head: HeadHyper::default(),
            feature_mode: FeatureMode::Downsampled,
            baseline: BaselineHyper::default(),
            pretrained_backbone: false,
            oracle_occupancy: false,
            methods: vec![
                Stage::Ec,
                Stage::Fewshot,
                Stage::Baseline(Method::Finetune),
                Stage::Baseline(Method::Er),
                Stage::Baseline(Method::Ewc),
                Stage::Baseline(Method::Multitask),
            ],
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true/false, got `{v}`"))),
    }
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` set twice", lineno + 1)));
            }
            c.set(key, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.data;
        let r = &mut d.render;
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "num_classes" => d.num_classes = parse_num(key, v)?,
            "resolution" => r.resolution = parse_num(key, v)?,
            "max_shift" => r.max_shift = parse_num(key, v)?,
            "intensity_min" => r.intensity_min = parse_num(key, v)?,
            "intensity_max" => r.intensity_max = parse_num(key, v)?,
            "noise_max" => r.noise_max = parse_num(key, v)?,
            "train_per_class" => d.train_per_class = parse_num(key, v)?,
            "val_per_class" => d.val_per_class = parse_num(key, v)?,
            "test_per_class" => d.test_per_class = parse_num(key, v)?,
            "n_combos" => d.n_combos = parse_num(key, v)?,
            "test_per_combo" => d.test_per_combo = parse_num(key, v)?,
            "con_experiences" => d.con_experiences = parse_num(key, v)?,
            "con_train_per_combo" => d.con_train_per_combo = parse_num(key, v)?,
            "sys_experiences" => d.sys_experiences = parse_num(key, v)?,
            "sys_n_way" => d.sys_n_way = parse_num(key, v)?,
            "sys_shots" => d.sys_shots = parse_num(key, v)?,
            "sys_queries" => d.sys_queries = parse_num(key, v)?,
            "classes_per_expert" => self.classes_per_expert = parse_num(key, v)?,
            "expert_epochs" => self.expert.epochs = parse_num(key, v)?,
            "expert_batch_size" => self.expert.batch_size = parse_num(key, v)?,
            "expert_lr" => self.expert.lr = parse_num(key, v)?,
            "fewshot_k" => {
                self.fewshot_k = list(v).map(|k| parse_num(key, k)).collect::<Result<_>>()?
            }
            "fewshot_seeds" => self.fewshot_seeds = parse_num(key, v)?,
            "head_epochs" => self.head.epochs = parse_num(key, v)?,
            "head_lr" => self.head.lr = parse_num(key, v)?,
            "feature_mode" => {
                self.feature_mode = match v {
                    "downsampled" => FeatureMode::Downsampled,
                    "quadrants" => FeatureMode::Quadrants,
                    _ => return Err(Error::Config(format!("`{key}`: downsampled|quadrants, got `{v}`"))),
                }
            }
            "baseline_epochs" => self.baseline.epochs = parse_num(key, v)?,
            "baseline_batch_size" => self.baseline.batch_size = parse_num(key, v)?,
            "baseline_lr" => self.baseline.lr = parse_num(key, v)?,
            "buffer_capacity" => self.baseline.buffer_capacity = parse_num(key, v)?,
            "ewc_lambda" => self.baseline.ewc_lambda = parse_num(key, v)?,
            "pretrained_backbone" => self.pretrained_backbone = parse_bool(key, v)?,
            "oracle_occupancy" => self.oracle_occupancy = parse_bool(key, v)?,
            "methods" => self.methods = list(v).map(Stage::parse).collect::<Result<_>>()?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.classes_per_expert == 0 || !self.data.num_classes.is_multiple_of(self.classes_per_expert) {
            return Err(Error::Config(format!(
                "classes_per_expert {} must divide num_classes {}",
                self.classes_per_expert, self.data.num_classes
            )));
        }
        let n_experts = self.data.num_classes / self.classes_per_expert;
        if let Some(&k) = self.fewshot_k.iter().find(|&&k| k == 0 || k > n_experts) {
            return Err(Error::Config(format!("fewshot_k {k} outside 1..={n_experts}")));
        }
        if self.fewshot_seeds == 0 {
            return Err(Error::Config("fewshot_seeds must be ≥ 1".into()));
        }
        if self.expert.batch_size == 0 || self.baseline.batch_size == 0 {
            return Err(Error::Config("batch sizes must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Reads a config file and applies the `EC_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut c = Self::parse(&text)?;
        c.apply_env_seed(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(c)
    }

    pub fn apply_env_seed(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn n_experts(&self) -> usize {
        self.data.num_classes / self.classes_per_expert
    }

    pub fn fewshot_seed_list(&self) -> Vec<u64> {
        (0..self.fewshot_seeds as u64).map(|i| self.seed + i).collect()
    }

    pub fn occupancy(&self) -> Occupancy {
        if self.oracle_occupancy {
            Occupancy::Oracle
        } else {
            Occupancy::Detect(OCCUPANCY_EPSILON)
        }
    }

    pub fn wants(&self, stage: Stage) -> bool {
        self.methods.contains(&stage)
    }

    pub fn hash(&self) -> String {
        json_digest(self)
    }

    /// Every key, one per line; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let r: &RenderConfig = &d.render;
        let join = |v: &[String]| v.join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("num_classes", d.num_classes.to_string());
        kv("resolution", r.resolution.to_string());
        kv("max_shift", r.max_shift.to_string());
        kv("intensity_min", r.intensity_min.to_string());
        kv("intensity_max", r.intensity_max.to_string());
        kv("noise_max", r.noise_max.to_string());
        kv("train_per_class", d.train_per_class.to_string());
        kv("val_per_class", d.val_per_class.to_string());
        kv("test_per_class", d.test_per_class.to_string());
        kv("n_combos", d.n_combos.to_string());
        kv("test_per_combo", d.test_per_combo.to_string());
        kv("con_experiences", d.con_experiences.to_string());
        kv("con_train_per_combo", d.con_train_per_combo.to_string());
        kv("sys_experiences", d.sys_experiences.to_string());
        kv("sys_n_way", d.sys_n_way.to_string());
        kv("sys_shots", d.sys_shots.to_string());
        kv("sys_queries", d.sys_queries.to_string());
        kv("classes_per_expert", self.classes_per_expert.to_string());
        kv("expert_epochs", self.expert.epochs.to_string());
        kv("expert_batch_size", self.expert.batch_size.to_string());
        kv("expert_lr", self.expert.lr.to_string());
        kv("fewshot_k", join(&self.fewshot_k.iter().map(|k| k.to_string()).collect::<Vec<_>>()));
        kv("fewshot_seeds", self.fewshot_seeds.to_string());
        kv("head_epochs", self.head.epochs.to_string());
        kv("head_lr", self.head.lr.to_string());
        kv(
            "feature_mode",
            match self.feature_mode {
                FeatureMode::Downsampled => "downsampled".into(),
                FeatureMode::Quadrants => "quadrants".into(),
            },
        );
        kv("baseline_epochs", self.baseline.epochs.to_string());
        kv("baseline_batch_size", self.baseline.batch_size.to_string());
        kv("baseline_lr", self.baseline.lr.to_string());
        kv("buffer_capacity", self.baseline.buffer_capacity.to_string());
        kv("ewc_lambda", self.baseline.ewc_lambda.to_string());
        kv("pretrained_backbone", self.pretrained_backbone.to_string());
        kv("oracle_occupancy", self.oracle_occupancy.to_string());
        kv("methods", join(&self.methods.iter().map(|m| m.name()).collect::<Vec<_>>()));
        s
    }
}
