//! Stage entry points (one per CLI verb) and the resumable pipeline.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{RunConfig, Stage};
use super::report::{emit_report, ReportSummary, ResultsTable};
use crate::composition::{evaluate_zero_shot, Occupancy, ZeroShotReport};
use crate::continual::{run_baseline, BaselineHyper, BaselineRun, Method};
use crate::datagen::{build_pack, read_manifest, read_pack, write_pack, BenchmarkPack, PackManifest};
use crate::error::{Error, Result};
use crate::experts::{
    load_expert, partition_classes, save_expert, save_monolith, train_expert,
    train_monolith, ExpertModel, ExpertReport, MONOLITH_STEM,
};
use crate::fewshot::{run_sys_protocol, FeatureMode, FewShotSummary, HeadHyper};
use crate::nn::load_model;
use crate::seeding::json_digest;
use crate::training::TrainHyper;

pub const PACK_DIR: &str = "pack";
pub const EXPERTS_DIR: &str = "experts";
pub const STAMPS_DIR: &str = "stamps";
pub const EXPERTS_MANIFEST: &str = "experts.json";
pub const EXPERTS_REPORT: &str = "experts_report.csv";
pub const EC_CSV: &str = "results_ec.csv";
pub const FEWSHOT_CSV: &str = "results_fewshot.csv";

pub fn baseline_csv(method: Method) -> String {
    format!("results_{}.csv", method.name())
}

pub fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(csv::Writer::from_path(path)?)
}

pub fn datagen(config: &RunConfig, out: &Path) -> Result<PackManifest> {
    let pack = build_pack(&config.data, config.seed)?;
    if !pack.objects.splits_disjoint() {
        return Err(Error::invalid("object splits share an image; change the seed"));
    }
    write_pack(&pack, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertsManifest {
    pub pack_hash: String,
    /// Recorded in every model file of the directory.
    pub stage_hash: String,
    pub seed: u64,
    pub classes_per_expert: usize,
    pub n_experts: usize,
    pub hyper: TrainHyper,
}

/// Trains every expert and the monolith, writing models, `experts.json`
/// and `experts_report.csv`.
pub fn train_experts(
    pack_dir: &Path,
    out: &Path,
    classes_per_expert: usize,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<Vec<ExpertReport>> {
    let pack = read_pack(pack_dir)?;
    let pack_hash = read_manifest(pack_dir)?.config_hash;
    let stage_hash = json_digest(&(&pack_hash, classes_per_expert, hyper, seed));
    let k = pack.config.num_classes;
    let res = pack.resolution();
    let specs = partition_classes(k, classes_per_expert, seed)?;
    fs::create_dir_all(out)?;
    let mut reports = Vec::new();
    for spec in &specs {
        let (model, report, _) = train_expert(spec, &pack.objects, res, hyper, seed)?;
        save_expert(&model, out, seed, &stage_hash)?;
        reports.push(report);
    }
    let (mono, report, _) = train_monolith(&pack.objects, k, res, hyper, seed)?;
    save_monolith(&mono, out, seed, &stage_hash)?;
    reports.push(report);

    let mut w = csv_writer(&out.join(EXPERTS_REPORT))?;
    w.write_record(["expert_id", "test_accuracy", "epochs", "wall_seconds"])?;
    for r in &reports {
        let id = r.expert_id.map_or(MONOLITH_STEM.to_string(), |i| i.to_string());
        w.write_record([id, fmt_f(r.test_accuracy), r.epochs.to_string(), format!("{:.3}", r.wall_seconds)])?;
    }
    w.flush()?;
    let manifest = ExpertsManifest {
        pack_hash,
        stage_hash,
        seed,
        classes_per_expert,
        n_experts: specs.len(),
        hyper: *hyper,
    };
    fs::write(out.join(EXPERTS_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(reports)
}

pub fn read_experts_manifest(dir: &Path) -> Result<ExpertsManifest> {
    let path = dir.join(EXPERTS_MANIFEST);
    if !path.exists() {
        return Err(Error::MissingStage {
            path,
            stage: "train-experts".into(),
        });
    }
    Ok(serde_json::from_slice(&fs::read(&path)?)?)
}

/// Loads the expert pool, refusing models trained on a different pack.
pub fn load_expert_pool(dir: &Path, pack_hash: &str) -> Result<Vec<ExpertModel>> {
    let m = read_experts_manifest(dir)?;
    if m.pack_hash != pack_hash {
        return Err(Error::artifact(
            dir.join(EXPERTS_MANIFEST),
            format!("trained on pack {}, not {pack_hash}", m.pack_hash),
        ));
    }
    (0..m.n_experts)
        .map(|i| load_expert(dir, i, Some(&m.stage_hash)))
        .collect()
}

fn pack_and_experts(experts_dir: &Path, pack_dir: &Path) -> Result<(BenchmarkPack, Vec<ExpertModel>)> {
    let hash = read_manifest(pack_dir)?.config_hash;
    let experts = load_expert_pool(experts_dir, &hash)?;
    Ok((read_pack(pack_dir)?, experts))
}

pub fn compose_eval(
    experts_dir: &Path,
    pack_dir: &Path,
    out_csv: &Path,
    occupancy: Occupancy,
) -> Result<ZeroShotReport> {
    let (pack, experts) = pack_and_experts(experts_dir, pack_dir)?;
    let report = evaluate_zero_shot(&experts, &pack.con, occupancy)?;
    let mut w = csv_writer(out_csv)?;
    w.write_record(["experience_id", "n_samples", "accuracy", "duplicates", "malformed", "abstain_fallback_rate"])?;
    let rows = report
        .per_experience
        .iter()
        .map(|s| (s.experience_id.to_string(), s))
        .chain(std::iter::once(("overall".to_string(), &report.overall)));
    for (id, s) in rows {
        w.write_record([
            id,
            s.n_samples.to_string(),
            fmt_f(s.accuracy),
            s.duplicates.to_string(),
            s.malformed.to_string(),
            fmt_f(s.abstain_fallback_rate),
        ])?;
    }
    w.flush()?;
    Ok(report)
}

pub fn fewshot_eval(
    experts_dir: &Path,
    pack_dir: &Path,
    ks: &[usize],
    seeds: &[u64],
    head: &HeadHyper,
    mode: FeatureMode,
    out_csv: &Path,
) -> Result<Vec<FewShotSummary>> {
    let (pack, experts) = pack_and_experts(experts_dir, pack_dir)?;
    let (rows, _) = run_sys_protocol(&experts, &pack.sys, &pack.patterns, &pack.config.render, ks, seeds, head, mode)?;
    let mut w = csv_writer(out_csv)?;
    w.write_record(["k", "seed", "mean_acc", "std_acc", "n_episodes"])?;
    for r in &rows {
        w.write_record([r.k.to_string(), r.seed.to_string(), fmt_f(r.mean_acc), fmt_f(r.std_acc), r.n_episodes.to_string()])?;
    }
    w.flush()?;
    Ok(rows)
}

/// `backbone` is the path of a model manifest (`<stem>.json`).
pub fn baseline_eval(
    method: Method,
    pack_dir: &Path,
    backbone: Option<&Path>,
    hyper: &BaselineHyper,
    seed: u64,
    out_csv: &Path,
) -> Result<BaselineRun> {
    let pack = read_pack(pack_dir)?;
    let pretrained = match backbone {
        Some(path) => {
            let dir = path.parent().unwrap_or(Path::new("."));
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::invalid(format!("bad backbone path {}", path.display())))?;
            Some(load_model::<f32>(dir, stem, None)?.0)
        }
        None => None,
    };
    let run = run_baseline(method, &pack.con, &pack.combos, hyper, seed, pretrained.as_ref())?;
    let mut w = csv_writer(out_csv)?;
    w.write_record(["experience_id", "avg_accuracy_so_far", "per_experience_accuracies"])?;
    let offset = if method == Method::Multitask { pack.con.len() - 1 } else { 0 };
    for (t, (avg, row)) in run.avg_accuracy_so_far.iter().zip(&run.matrix.rows).enumerate() {
        let per: Vec<String> = row.iter().map(|&a| fmt_f(a)).collect();
        w.write_record([(t + offset).to_string(), fmt_f(*avg), per.join(";")])?;
    }
    w.flush()?;
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStamp {
    pub stage: String,
    pub hash: String,
    /// Output path (relative to the run directory) → SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub wall_seconds: f64,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn stamp_path(root: &Path, stage: &str) -> PathBuf {
    root.join(STAMPS_DIR).join(format!("{stage}.json"))
}

pub fn read_stamp(root: &Path, stage: &str) -> Option<StageStamp> {
    serde_json::from_slice(&fs::read(stamp_path(root, stage)).ok()?).ok()
}

/// True when the stamp matches `hash` and every recorded output is intact.
fn stamp_valid(root: &Path, stage: &str, hash: &str) -> bool {
    let Some(stamp) = read_stamp(root, stage) else {
        return false;
    };
    stamp.hash == hash
        && !stamp.outputs.is_empty()
        && stamp
            .outputs
            .iter()
            .all(|(rel, sum)| file_sha256(&root.join(rel)).ok().as_deref() == Some(sum.as_str()))
}

fn collect_outputs(root: &Path, rel: &str, out: &mut BTreeMap<String, String>) -> Result<()> {
    let path = root.join(rel);
    if path.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(&path)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let child = format!("{rel}/{}", e.file_name().to_string_lossy());
            collect_outputs(root, &child, out)?;
        }
    } else {
        out.insert(rel.to_string(), file_sha256(&path)?);
    }
    Ok(())
}

fn write_stamp(root: &Path, stage: &str, hash: &str, outputs: &[&str], wall_seconds: f64) -> Result<()> {
    let mut sums = BTreeMap::new();
    for rel in outputs {
        collect_outputs(root, rel, &mut sums)?;
    }
    let stamp = StageStamp {
        stage: stage.into(),
        hash: hash.into(),
        outputs: sums,
        wall_seconds,
    };
    let path = stamp_path(root, stage);
    fs::create_dir_all(path.parent().unwrap())?;
    fs::write(path, serde_json::to_string_pretty(&stamp)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    /// Stages that ran (rather than being reused from disk), in order.
    pub executed: Vec<String>,
    pub table: ResultsTable,
    pub summary: ReportSummary,
}

struct Pipeline<'a> {
    config: &'a RunConfig,
    root: &'a Path,
    executed: Vec<String>,
}

impl Pipeline<'_> {
    /// Runs `body` unless a valid stamp exists and no dependency re-ran.
    fn stage(
        &mut self,
        name: &str,
        hash: &str,
        deps: &[&str],
        outputs: &[&str],
        body: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<()> {
        let dep_ran = deps.iter().any(|d| self.executed.iter().any(|e| e == d));
        if !dep_ran && stamp_valid(self.root, name, hash) {
            return Ok(());
        }
        let start = Instant::now();
        body(self.root)?;
        write_stamp(self.root, name, hash, outputs, start.elapsed().as_secs_f64())?;
        self.executed.push(name.to_string());
        Ok(())
    }
}

/// Executes the requested stages under `config.out_dir`, reusing any stage
/// whose stamp, inputs and outputs are unchanged, then writes the report.
pub fn run_experiment(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let root = config.out_dir.as_path();
    fs::create_dir_all(root)?;
    fs::write(root.join("config.txt"), config.to_text())?;
    let mut p = Pipeline {
        config,
        root,
        executed: Vec::new(),
    };
    let c = p.config;
    let pack_dir = root.join(PACK_DIR);
    let experts_dir = root.join(EXPERTS_DIR);

    let data_hash = json_digest(&(&c.data, c.seed));
    p.stage("datagen", &data_hash, &[], &[PACK_DIR], |_| {
        if pack_dir.exists() {
            fs::remove_dir_all(&pack_dir)?;
        }
        datagen(c, &pack_dir).map(|_| ())
    })?;

    let needs_experts = c.wants(Stage::Ec) || c.wants(Stage::Fewshot) || c.pretrained_backbone;
    let experts_hash = json_digest(&(&data_hash, c.classes_per_expert, &c.expert, c.seed));
    if needs_experts {
        p.stage("experts", &experts_hash, &["datagen"], &[EXPERTS_DIR], |_| {
            if experts_dir.exists() {
                fs::remove_dir_all(&experts_dir)?;
            }
            train_experts(&pack_dir, &experts_dir, c.classes_per_expert, &c.expert, c.seed).map(|_| ())
        })?;
    }
    if c.wants(Stage::Ec) {
        let hash = json_digest(&(&experts_hash, c.occupancy()));
        p.stage("ec", &hash, &["experts"], &[EC_CSV], |r| {
            compose_eval(&experts_dir, &pack_dir, &r.join(EC_CSV), c.occupancy()).map(|_| ())
        })?;
    }
    if c.wants(Stage::Fewshot) {
        let hash = json_digest(&(&experts_hash, &c.fewshot_k, c.fewshot_seed_list(), &c.head, c.feature_mode));
        p.stage("fewshot", &hash, &["experts"], &[FEWSHOT_CSV], |r| {
            fewshot_eval(
                &experts_dir,
                &pack_dir,
                &c.fewshot_k,
                &c.fewshot_seed_list(),
                &c.head,
                c.feature_mode,
                &r.join(FEWSHOT_CSV),
            )
            .map(|_| ())
        })?;
    }
    let backbone = experts_dir.join(format!("{MONOLITH_STEM}.json"));
    for method in Method::ALL {
        if !c.wants(Stage::Baseline(method)) {
            continue;
        }
        let upstream = if c.pretrained_backbone { &experts_hash } else { &data_hash };
        let hash = json_digest(&(upstream, method, &c.baseline, c.seed, c.pretrained_backbone));
        let deps: &[&str] = if c.pretrained_backbone { &["datagen", "experts"] } else { &["datagen"] };
        let csv = baseline_csv(method);
        p.stage(method.name(), &hash, deps, &[csv.as_str()], |r| {
            let bb = c.pretrained_backbone.then_some(backbone.as_path());
            baseline_eval(method, &pack_dir, bb, &c.baseline, c.seed, &r.join(&csv)).map(|_| ())
        })?;
    }
    let (table, summary) = emit_report(root)?;
    Ok(RunOutcome {
        executed: p.executed,
        table,
        summary,
    })
}
