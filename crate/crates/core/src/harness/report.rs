//! Results table, plain-text summary and plot series.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::stages::{baseline_csv, fmt_f, read_stamp, EC_CSV, FEWSHOT_CSV};
use crate::continual::Method;
use crate::error::Result;
use crate::fewshot::REFERENCE_TABLE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub seed: u64,
    pub experience_id: usize,
    pub accuracy: f64,
    pub wall_seconds: f64,
}

/// Append-only result rows of one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn push(&mut self, row: ResultRow) {
        debug_assert!(row.wall_seconds >= 0.0);
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }

    /// CSV of everything except timings, which vary between runs.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,seed,experience_id,accuracy\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{}", r.method, r.seed, r.experience_id, fmt_f(r.accuracy)).unwrap();
        }
        s
    }

    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv().as_bytes()))
    }
}

#[derive(Debug, Deserialize)]
struct EcRow {
    experience_id: String,
    #[allow(dead_code)]
    n_samples: usize,
    accuracy: f64,
}

#[derive(Debug, Deserialize)]
struct FewShotRow {
    k: usize,
    seed: u64,
    mean_acc: f64,
    std_acc: f64,
}

#[derive(Debug, Deserialize)]
struct BaselineRow {
    experience_id: usize,
    avg_accuracy_so_far: f64,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<Vec<T>>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(Some(r.deserialize().collect::<std::result::Result<_, _>>()?))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    /// `(method, final accuracy)`; EC reports its overall accuracy.
    pub finals: Vec<(String, f64)>,
    pub ec_overall: Option<f64>,
    /// Best final among the sequential baselines (Multitask is a reference,
    /// not a continual learner).
    pub best_baseline: Option<(String, f64)>,
    pub ec_ratio: Option<f64>,
    /// `(k, seed-averaged mean, seed-averaged std)`.
    pub fewshot: Vec<(usize, f64, f64)>,
    pub fewshot_monotone: Option<bool>,
}

/// `ec / max(baselines)`.
pub fn ec_ratio(ec: f64, baseline_finals: &[f64]) -> Option<f64> {
    let best = baseline_finals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (best.is_finite() && best > 0.0).then(|| ec / best)
}

/// Strictly increasing in the order given.
pub fn is_monotone(means: &[f64]) -> bool {
    means.windows(2).all(|w| w[1] > w[0])
}

/// Reads the result CSVs present in `dir` and writes `results_table.csv`,
/// `timings.csv`, `summary.txt`, `plot_con.csv` and `plot_fewshot.csv`.
pub fn emit_report(dir: &Path) -> Result<(ResultsTable, ReportSummary)> {
    let seed = fs::read_to_string(dir.join("config.txt"))
        .ok()
        .and_then(|t| super::config::RunConfig::parse(&t).ok())
        .map_or(0, |c| c.seed);
    let wall = |stage: &str| read_stamp(dir, stage).map_or(0.0, |s| s.wall_seconds);
    let mut table = ResultsTable::default();
    let mut summary = ReportSummary::default();
    let mut plot = String::from("method,experience_id,accuracy\n");
    let mut n_experiences = 0;

    let mut baseline_rows = Vec::new();
    for method in Method::ALL {
        if let Some(rows) = read_rows::<BaselineRow>(&dir.join(baseline_csv(method)))? {
            n_experiences = n_experiences.max(rows.last().map_or(0, |r| r.experience_id + 1));
            baseline_rows.push((method, rows));
        }
    }
    if let Some(rows) = read_rows::<EcRow>(&dir.join(EC_CSV))? {
        let per: Vec<&EcRow> = rows.iter().filter(|r| r.experience_id != "overall").collect();
        let overall = rows.iter().find(|r| r.experience_id == "overall").map(|r| r.accuracy);
        n_experiences = n_experiences.max(per.len());
        for (i, r) in per.iter().enumerate() {
            table.push(ResultRow {
                method: "ec".into(),
                seed,
                experience_id: i,
                accuracy: r.accuracy,
                wall_seconds: wall("ec"),
            });
        }
        if let Some(o) = overall {
            for x in 0..n_experiences {
                writeln!(plot, "ec,{x},{}", fmt_f(o)).unwrap();
            }
            summary.ec_overall = Some(o);
            summary.finals.push(("ec".into(), o));
        }
    }
    for (method, rows) in &baseline_rows {
        for r in rows {
            table.push(ResultRow {
                method: method.name().into(),
                seed,
                experience_id: r.experience_id,
                accuracy: r.avg_accuracy_so_far,
                wall_seconds: wall(method.name()),
            });
            writeln!(plot, "{},{},{}", method.name(), r.experience_id, fmt_f(r.avg_accuracy_so_far)).unwrap();
        }
        if let Some(last) = rows.last() {
            summary.finals.push((method.name().into(), last.avg_accuracy_so_far));
            if method.is_sequential()
                && summary.best_baseline.as_ref().is_none_or(|(_, b)| last.avg_accuracy_so_far > *b)
            {
                summary.best_baseline = Some((method.name().into(), last.avg_accuracy_so_far));
            }
        }
    }
    if let (Some(ec), Some((_, best))) = (summary.ec_overall, &summary.best_baseline) {
        summary.ec_ratio = ec_ratio(ec, &[*best]);
    }

    let mut fs_plot = String::from("k,mean_acc,std_acc,reference_mean,reference_std\n");
    if let Some(rows) = read_rows::<FewShotRow>(&dir.join(FEWSHOT_CSV))? {
        let mut ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
        ks.dedup();
        for &k in &ks {
            let sel: Vec<&FewShotRow> = rows.iter().filter(|r| r.k == k).collect();
            let n = sel.len() as f64;
            let mean = sel.iter().map(|r| r.mean_acc).sum::<f64>() / n;
            let std = sel.iter().map(|r| r.std_acc).sum::<f64>() / n;
            for r in &sel {
                table.push(ResultRow {
                    method: format!("fewshot_k{k}"),
                    seed: r.seed,
                    experience_id: 0,
                    accuracy: r.mean_acc,
                    wall_seconds: wall("fewshot"),
                });
            }
            let (rm, rs) = REFERENCE_TABLE
                .iter()
                .find(|(rk, _, _)| *rk == k)
                .map_or((String::new(), String::new()), |(_, m, s)| (format!("{:.2}", m / 100.0), format!("{:.4}", s / 100.0)));
            writeln!(fs_plot, "{k},{},{},{rm},{rs}", fmt_f(mean), fmt_f(std)).unwrap();
            summary.fewshot.push((k, mean, std));
        }
        let means: Vec<f64> = summary.fewshot.iter().map(|f| f.1).collect();
        summary.fewshot_monotone = Some(is_monotone(&means));
    }

    fs::write(dir.join("results_table.csv"), table.to_csv())?;
    let mut timings = String::from("method,wall_seconds\n");
    for stage in ["datagen", "experts", "ec", "fewshot", "finetune", "er", "ewc", "multitask"] {
        if let Some(s) = read_stamp(dir, stage) {
            writeln!(timings, "{stage},{:.3}", s.wall_seconds).unwrap();
        }
    }
    fs::write(dir.join("timings.csv"), timings)?;
    fs::write(dir.join("plot_con.csv"), plot)?;
    fs::write(dir.join("plot_fewshot.csv"), fs_plot)?;
    fs::write(dir.join("summary.txt"), render_summary(&summary, &table))?;
    Ok((table, summary))
}

fn render_summary(s: &ReportSummary, table: &ResultsTable) -> String {
    let mut out = String::from("final accuracy per method\n");
    for (m, v) in &s.finals {
        writeln!(out, "  {m:<10} {v:.4}").unwrap();
    }
    match (s.ec_ratio, &s.best_baseline) {
        (Some(r), Some((name, b))) => {
            writeln!(out, "\nec / best continual baseline ({name}, {b:.4}) = {r:.3}").unwrap()
        }
        _ => writeln!(out, "\nec / best continual baseline: n/a").unwrap(),
    }
    if !s.fewshot.is_empty() {
        writeln!(out, "\nfew-shot composition (mean ± std over episodes, averaged over seeds)").unwrap();
        for (k, m, sd) in &s.fewshot {
            let reference = REFERENCE_TABLE
                .iter()
                .find(|(rk, _, _)| rk == k)
                .map_or(String::new(), |(_, rm, rs)| format!("   [reference {rm:.2} ± {rs:.2}, not reproduced]"));
            writeln!(out, "  k={k}  {:.2} ± {:.2}{reference}", 100.0 * m, 100.0 * sd).unwrap();
        }
        let verdict = if s.fewshot_monotone == Some(true) { "monotone" } else { "not monotone" };
        writeln!(out, "  trend: {verdict}").unwrap();
    }
    writeln!(out, "\nresults table checksum {}", table.checksum()).unwrap();
    out
}
