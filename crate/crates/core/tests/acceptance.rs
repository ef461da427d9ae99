//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Trains on the default pack for three seeds, so expect minutes.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use ec_core::composition::{evaluate_zero_shot, Occupancy};
use ec_core::continual::{reservoir_retention, run_baseline, BaselineHyper, Method};
use ec_core::datagen::{build_pack, read_manifest, read_pack, DataConfig};
use ec_core::fewshot::REFERENCE_TABLE;
use ec_core::harness::{
    load_expert_pool, read_stamp, run_experiment, RunConfig, RunOutcome, Stage, EXPERTS_DIR,
    PACK_DIR,
};
use ec_core::nn::{gradient_check, layer_gradient_check, GradCheckConfig, LayerSpec, Network, Tensor};
use ec_core::seeding::rng_from;
use rand::seq::SliceRandom;
use rand::Rng;

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

const SEEDS: [u64; 3] = [0, 1, 2];

struct SeedRun {
    root: PathBuf,
    outcome: RunOutcome,
}

fn default_runs(base: &Path) -> Vec<SeedRun> {
    SEEDS
        .iter()
        .map(|&seed| {
            let mut c = RunConfig { seed, out_dir: base.join(format!("seed{seed}")), ..RunConfig::default() };
            if seed != SEEDS[0] {
                c.methods.retain(|s| *s != Stage::Fewshot);
            }
            let start = Instant::now();
            let outcome = run_experiment(&c).expect("default run");
            eprintln!("seed {seed}: default run in {:.0}s", start.elapsed().as_secs_f64());
            SeedRun { root: c.out_dir, outcome }
        })
        .collect()
}

fn final_of(run: &SeedRun, method: &str) -> f64 {
    run.outcome.summary.finals.iter().find(|(m, _)| m == method).map(|f| f.1).unwrap()
}

fn gradients() -> Check {
    let start = Instant::now();
    let kinds = [
        (LayerSpec::Conv2d { in_channels: 2, out_channels: 3 }, vec![2, 5, 4]),
        (LayerSpec::Relu, vec![3, 4, 4]),
        (LayerSpec::MaxPool2d, vec![2, 4, 6]),
        (LayerSpec::Flatten, vec![2, 3, 3]),
        (LayerSpec::Dense { in_dim: 7, out_dim: 5 }, vec![7]),
    ];
    let mut worst = 0f64;
    for seed in 0..20u64 {
        for (spec, shape) in &kinds {
            let r = layer_gradient_check::<f64>(*spec, shape, 2, seed, GradCheckConfig::F64).map_err(|e| e.to_string())?;
            worst = worst.max(r.max_rel_error());
        }
        let mut rng = rng_from(seed);
        let net = Network::<f64>::micro_cnn(1, 8, 4, &mut rng).unwrap();
        let x: Vec<f64> = (0..128).map(|_| rng.gen_range(0.0..1.0)).collect();
        let t = [rng.gen_range(0..4), rng.gen_range(0..4)];
        let r = gradient_check(&net, &Tensor::new(vec![2, 1, 8, 8], x).unwrap(), &t, GradCheckConfig::F64)
            .map_err(|e| e.to_string())?;
        worst = worst.max(r.max_rel_error());
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst < 1e-4, "max relative error {worst:.2e} ≥ 1e-4");
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("20 seeds, max relative error {worst:.2e} (f64), {secs:.1}s"))
}

fn expert_quality(run: &SeedRun) -> Check {
    let report = fs::read_to_string(run.root.join(EXPERTS_DIR).join("experts_report.csv")).unwrap();
    let mut accs = Vec::new();
    let mut secs = 0.0;
    for line in report.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[0] == "monolith" {
            continue;
        }
        accs.push(f[1].parse::<f64>().unwrap());
        secs += f[3].parse::<f64>().unwrap();
    }
    let min = accs.iter().copied().fold(1.0, f64::min);
    ensure!(accs.len() == 7, "{} experts", accs.len());
    ensure!(min >= 0.85, "weakest expert {min:.4}");
    ensure!(secs < 1800.0, "training took {secs:.0}s");
    Ok(format!("7 experts, min test accuracy {min:.4}, training {secs:.1}s"))
}

fn ec_dominance(runs: &[SeedRun]) -> Check {
    let mut ec = 0.0;
    let mut best = 0.0;
    let mut detail = Vec::new();
    for r in runs {
        let (name, b) = r.outcome.summary.best_baseline.clone().unwrap();
        let e = r.outcome.summary.ec_overall.unwrap();
        detail.push(format!("{e:.3}/{b:.3} ({name})"));
        ec += e / runs.len() as f64;
        best += b / runs.len() as f64;
    }
    let ratio = ec / best;

    let run = &runs[0];
    let pack_dir = run.root.join(PACK_DIR);
    let pack = read_pack(&pack_dir).unwrap();
    let experts = load_expert_pool(&run.root.join(EXPERTS_DIR), &read_manifest(&pack_dir).unwrap().config_hash).unwrap();
    let before: Vec<String> = experts.iter().map(|e| e.net.param_digest()).collect();
    let report = evaluate_zero_shot(&experts, &pack.con, Occupancy::default()).unwrap();
    let after: Vec<String> = experts.iter().map(|e| e.net.param_digest()).collect();
    ensure!(before == after, "expert parameters changed during evaluation");
    ensure!(
        (report.overall.accuracy - run.outcome.summary.ec_overall.unwrap()).abs() < 1e-6,
        "re-evaluation disagrees with the recorded EC accuracy"
    );
    ensure!(ratio >= 2.0, "EC {ec:.4} vs best baseline {best:.4}: ratio {ratio:.2}");
    Ok(format!(
        "mean EC {ec:.4} vs mean best baseline {best:.4}, ratio {ratio:.2} [{}]; parameter hashes unchanged",
        detail.join(", ")
    ))
}

fn flatness(run: &SeedRun) -> Check {
    let pack_dir = run.root.join(PACK_DIR);
    let pack = read_pack(&pack_dir).unwrap();
    let experts = load_expert_pool(&run.root.join(EXPERTS_DIR), &read_manifest(&pack_dir).unwrap().config_hash).unwrap();
    let a = evaluate_zero_shot(&experts, &pack.con, Occupancy::default()).unwrap();
    let mut rng = rng_from(99);
    let mut shuffled = pack.con.clone();
    shuffled.experiences.shuffle(&mut rng);
    for e in &mut shuffled.experiences {
        e.test.shuffle(&mut rng);
    }
    let b = evaluate_zero_shot(&experts, &shuffled, Occupancy::default()).unwrap();
    let mut compared = 0;
    for (j, eb) in shuffled.experiences.iter().enumerate() {
        let i = eb.id;
        let ea = &pack.con.experiences[i];
        ensure!(a.per_experience[i].accuracy.to_bits() == b.per_experience[j].accuracy.to_bits(), "experience {i} accuracy moved");
        for (c, p) in eb.test.iter().zip(&b.predictions[j]) {
            let k = ea.test.iter().position(|d| d.pixels == c.pixels).unwrap();
            let q = &a.predictions[i][k];
            ensure!(q.composed == p.composed, "experience {i} prediction changed");
            for ((qa, pa), (qb, pb)) in q.quadrants.iter().zip(&p.quadrants) {
                ensure!(
                    qa == qb && pa.class_id == pb.class_id && pa.confidence.to_bits() == pb.confidence.to_bits(),
                    "experience {i} quadrant output changed"
                );
            }
            compared += 1;
        }
    }
    let series: Vec<String> = a.per_experience.iter().map(|s| format!("{:.3}", s.accuracy)).collect();
    Ok(format!("{compared} predictions bitwise identical under reordering; series [{}]", series.join(" ")))
}

fn fewshot_trend(run: &SeedRun) -> Check {
    let s = &run.outcome.summary;
    let ks: Vec<usize> = s.fewshot.iter().map(|f| f.0).collect();
    ensure!(ks == [3, 5, 7], "few-shot ks {ks:?}");
    let cfg = RunConfig::default();
    ensure!(cfg.data.sys_experiences == 300 && cfg.fewshot_seeds >= 5, "protocol smaller than 300 × 5");
    let parts: Vec<String> = s
        .fewshot
        .iter()
        .zip(REFERENCE_TABLE)
        .map(|((k, m, sd), (_, rm, rs))| format!("k={k} {:.2}±{:.2} (reference {rm:.2}±{rs:.2}, not reproduced)", 100.0 * m, 100.0 * sd))
        .collect();
    ensure!(s.fewshot_monotone == Some(true), "not strictly increasing: {}", parts.join("; "));
    Ok(format!("300 episodes × 5 seeds: {}", parts.join("; ")))
}

fn baseline_ordering(runs: &[SeedRun]) -> Check {
    let mut lines = Vec::new();
    for r in runs {
        let (ft, er, ewc, mt) = (final_of(r, "finetune"), final_of(r, "er"), final_of(r, "ewc"), final_of(r, "multitask"));
        lines.push(format!("ft {ft:.3} er {er:.3} ewc {ewc:.3} mt {mt:.3}"));
        ensure!(er >= ft, "ER {er:.4} < Finetune {ft:.4}");
        ensure!(mt >= ft.max(er).max(ewc), "Multitask {mt:.4} below a sequential method");
    }
    let mut drops = Vec::new();
    for r in runs {
        let csv = fs::read_to_string(r.root.join("results_finetune.csv")).unwrap();
        let rows: Vec<Vec<f64>> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().split(';').map(|v| v.parse().unwrap()).collect())
            .collect();
        let (after, end) = (rows[0][0], rows.last().unwrap()[0]);
        ensure!(end < after, "Finetune experience-0 accuracy did not drop ({after:.3} → {end:.3})");
        drops.push(format!("{after:.3}→{end:.3}"));
    }
    Ok(format!("[{}]; Finetune first-experience accuracy {}", lines.join(" | "), drops.join(", ")))
}

fn oracle() -> Check {
    let (experts, composites) = common::tiny_instance();
    let preds = ec_core::composition::predict_composites(&experts, &composites, Occupancy::default()).map_err(|e| e.to_string())?;
    let fallbacks = common::assert_matches_oracle(&experts, &composites, &preds);
    Ok(format!("4 classes, 2 experts, 20 composites identical to brute force ({fallbacks} all-abstain quadrants)"))
}

fn reservoir() -> Check {
    let (capacity, n, early) = (500, 10_000, 1_000);
    let seeds: Vec<u64> = (0..20).collect();
    let r = reservoir_retention(capacity, n, early, &seeds);
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    let p = capacity as f64 / n as f64;
    let sigma = (p * (1.0 - p) / (early * seeds.len()) as f64).sqrt();
    ensure!((mean - p).abs() <= 2.0 * sigma, "retention {mean:.4} vs {p:.4} (2σ = {:.4})", 2.0 * sigma);
    Ok(format!("retention of first {early} items {mean:.4} vs {p:.4}, |Δ| ≤ 2σ = {:.4}", 2.0 * sigma))
}

fn determinism(base: &Path) -> Check {
    let a = base.join("det_a");
    let b = base.join("det_b");
    run_experiment(&common::tiny_config(&a)).map_err(|e| e.to_string())?;
    run_experiment(&common::tiny_config(&b)).map_err(|e| e.to_string())?;
    for f in common::DETERMINISTIC_OUTPUTS {
        let x = fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure!(x == y, "{f} differs");
    }
    Ok(format!("{} result CSVs byte-identical across two run-all invocations", common::DETERMINISTIC_OUTPUTS.len()))
}

fn ewc_reduction() -> Check {
    let data = DataConfig {
        num_classes: 6,
        train_per_class: 10,
        val_per_class: 2,
        test_per_class: 2,
        n_combos: 10,
        test_per_combo: 10,
        con_experiences: 5,
        con_train_per_combo: 20,
        sys_experiences: 2,
        sys_n_way: 3,
        sys_shots: 1,
        sys_queries: 1,
        ..DataConfig::default()
    };
    let pack = build_pack(&data, 4).map_err(|e| e.to_string())?;
    let hyper = BaselineHyper { epochs: 2, ..BaselineHyper::default() };
    let run = |m, lambda| run_baseline(m, &pack.con, &pack.combos, &BaselineHyper { ewc_lambda: lambda, ..hyper }, 4, None).unwrap();
    let ft = run(Method::Finetune, 0.0);
    let ewc0 = run(Method::Ewc, 0.0);
    let ewc = run(Method::Ewc, 100.0);
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure!(bits(&ft.step_losses) == bits(&ewc0.step_losses), "λ=0 losses differ from Finetune");
    ensure!(bits(&ft.step_losses) != bits(&ewc.step_losses), "λ=100 had no effect");
    Ok(format!("{} step losses bitwise equal at λ=0; λ=100 diverges", ft.step_losses.len()))
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("work dir");
    let mut failed = 0;
    let mut report = |n: usize, name: &str, check: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("PASS {n:>2} {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {d} [{secs:.1}s]");
            }
        }
    };

    report(1, "gradient correctness", &mut gradients);
    report(7, "oracle equivalence", &mut oracle);
    report(8, "reservoir retention", &mut reservoir);
    report(9, "determinism", &mut || determinism(work.path()));
    report(10, "EWC reduction", &mut ewc_reduction);

    let runs = catch_unwind(AssertUnwindSafe(|| default_runs(work.path())));
    match &runs {
        Ok(runs) => {
            report(2, "expert quality", &mut || expert_quality(&runs[0]));
            report(3, "EC dominance", &mut || ec_dominance(runs));
            report(4, "flatness under reordering", &mut || flatness(&runs[0]));
            report(5, "few-shot trend", &mut || fewshot_trend(&runs[0]));
            report(6, "baseline ordering", &mut || baseline_ordering(runs));
            if let Some(s) = read_stamp(&runs[0].root, "experts") {
                eprintln!("experts stage (seed 0): {:.1}s", s.wall_seconds);
            }
        }
        Err(_) => {
            for (n, name) in [(2, "expert quality"), (3, "EC dominance"), (4, "flatness under reordering"), (5, "few-shot trend"), (6, "baseline ordering")] {
                report(n, name, &mut || Err("default runs failed".into()));
            }
        }
    }
    if failed == 0 {
        println!("acceptance: all 10 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
