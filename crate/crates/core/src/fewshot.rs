//! Few-shot composition: rank experts by how confidently they respond to an
//! episode's training composites, keep the top `k` frozen, and fit a linear
//! head on their concatenated penultimate features.

use serde::{Deserialize, Serialize};

use crate::composition::{occupied_quadrants, split_quadrants, Occupancy};
use crate::datagen::{CompositeImage, Experience, ClassPattern, RenderConfig, SysStream};
use crate::error::{Error, Result};
use crate::experts::ExpertModel;
use crate::nn::{LayerSpec, Network, FEATURE_DIM, MICRO_CNN_FEATURE_LAYERS};
use crate::seeding::{rng_for, sub_seed};
use crate::training::{evaluate_classifier, logits, train_classifier, Dataset, TrainHyper};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertScore {
    pub expert_id: usize,
    pub score: f64,
}

/// Sum over every occupied quadrant of every composite of the expert's
/// largest raw logit. Sorted by descending score, ties by expert id.
pub fn score_experts(
    experts: &[ExpertModel],
    composites: &[CompositeImage],
    occupancy: Occupancy,
) -> Result<Vec<ExpertScore>> {
    if composites.is_empty() {
        return Err(Error::EmptyDataset("episode training set".into()));
    }
    let side = composites[0].side();
    let mut quads = Dataset::new(vec![1, side / 2, side / 2]);
    for c in composites {
        let parts = split_quadrants(&c.pixels, c.side(), c.side())?;
        for q in occupied_quadrants(c, occupancy)? {
            quads.push(&parts[q], 0);
        }
    }
    let mut scores = experts
        .iter()
        .map(|e| {
            let rows = logits(&e.net, &quads)?;
            let score = rows
                .iter()
                .map(|r| r.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64)
                .sum();
            Ok(ExpertScore {
                expert_id: e.spec.expert_id,
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    sort_scores(&mut scores);
    Ok(scores)
}

fn sort_scores(scores: &mut [ExpertScore]) {
    scores.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.expert_id.cmp(&b.expert_id))
    });
}

/// Ids of the `k` best-scoring experts, best first.
pub fn select_experts(scores: &[ExpertScore], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::invalid(format!(
            "cannot select {k} of {} experts",
            scores.len()
        )));
    }
    let mut sorted = scores.to_vec();
    sort_scores(&mut sorted);
    Ok(sorted[..k].iter().map(|s| s.expert_id).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureMode {
    /// Whole composite, 2×2 average-pooled to the expert's input size.
    #[default]
    Downsampled,
    /// Features of each occupied quadrant, in quadrant order.
    Quadrants,
}

impl FeatureMode {
    pub fn dim_per_expert(self) -> usize {
        match self {
            FeatureMode::Downsampled => FEATURE_DIM,
            FeatureMode::Quadrants => 2 * FEATURE_DIM,
        }
    }
}

/// 2×2 average pooling of a square image.
pub fn downsample(pixels: &[f32], side: usize) -> Vec<f32> {
    let half = side / 2;
    let mut out = Vec::with_capacity(half * half);
    for y in 0..half {
        for x in 0..half {
            let at = |dy: usize, dx: usize| pixels[(2 * y + dy) * side + 2 * x + dx];
            out.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
        }
    }
    out
}

/// Per-composite feature vector of one expert.
pub fn expert_features(
    expert: &ExpertModel,
    composites: &[CompositeImage],
    mode: FeatureMode,
) -> Result<Vec<Vec<f32>>> {
    let Some(first) = composites.first() else {
        return Ok(Vec::new());
    };
    let res = first.side() / 2;
    let mut inputs = Dataset::new(vec![1, res, res]);
    for c in composites {
        match mode {
            FeatureMode::Downsampled => inputs.push(&downsample(&c.pixels, c.side()), 0),
            FeatureMode::Quadrants => {
                let parts = split_quadrants(&c.pixels, c.side(), c.side())?;
                for &q in &c.occupied {
                    inputs.push(&parts[q as usize], 0);
                }
            }
        }
    }
    let idx: Vec<usize> = (0..inputs.len()).collect();
    let mut feats = Vec::with_capacity(inputs.len());
    for chunk in idx.chunks(256) {
        let (x, _) = inputs.batch::<f32>(chunk);
        let f = expert.net.forward_prefix(&x, MICRO_CNN_FEATURE_LAYERS)?;
        feats.extend(f.data().chunks(FEATURE_DIM).map(<[f32]>::to_vec));
    }
    let per = mode.dim_per_expert() / FEATURE_DIM;
    Ok(feats.chunks(per).map(|c| c.concat()).collect())
}

/// Concatenated features of `selected` experts, in selection order.
pub fn extract_features(
    selected: &[&ExpertModel],
    composite: &CompositeImage,
    mode: FeatureMode,
) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(selected.len() * mode.dim_per_expert());
    for e in selected {
        out.extend(expert_features(e, std::slice::from_ref(composite), mode)?.remove(0));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadHyper {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for HeadHyper {
    fn default() -> Self {
        Self { epochs: 50, lr: 1e-3 }
    }
}

/// Single dense layer trained full-batch with Adam.
pub fn train_head(features: &Dataset, n_way: usize, hyper: &HeadHyper, seed: u64) -> Result<Network<f32>> {
    if n_way < 2 {
        return Err(Error::invalid("a head needs at least two classes"));
    }
    let dim = features.sample_len();
    let init = Network::new(
        vec![dim],
        &[LayerSpec::Dense { in_dim: dim, out_dim: n_way }],
        &mut rng_for(seed, "head/init"),
    )?;
    let train = TrainHyper {
        epochs: hyper.epochs,
        batch_size: features.len().max(1),
        lr: hyper.lr,
    };
    Ok(train_classifier(init, features, None, &train, sub_seed(seed, "head/shuffle"))?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode_id: usize,
    pub k: usize,
    pub seed: u64,
    pub selected: Vec<usize>,
    pub accuracy: f64,
}

fn head_dataset(blocks: &[&Vec<Vec<f32>>], labels: &[usize]) -> Dataset {
    let dim = blocks.iter().map(|b| b[0].len()).sum();
    let mut d = Dataset::new(vec![dim]);
    let mut row = Vec::with_capacity(dim);
    for (n, &label) in labels.iter().enumerate() {
        row.clear();
        for b in blocks {
            row.extend_from_slice(&b[n]);
        }
        d.push(&row, label);
    }
    d
}

/// Scores every `(k, seed)` on one episode. Expert features are computed
/// once and shared across all `k` and seeds.
pub fn run_episode(
    experts: &[ExpertModel],
    episode: &Experience,
    ks: &[usize],
    seeds: &[u64],
    hyper: &HeadHyper,
    mode: FeatureMode,
) -> Result<Vec<EpisodeResult>> {
    let label_of = |c: &CompositeImage| {
        episode
            .labels
            .iter()
            .position(|l| *l == c.label)
            .ok_or_else(|| Error::invalid(format!("composite label {} not in episode", c.label)))
    };
    let train_y = episode.train.iter().map(label_of).collect::<Result<Vec<_>>>()?;
    let test_y = episode.test.iter().map(label_of).collect::<Result<Vec<_>>>()?;
    let scores = score_experts(experts, &episode.train, Occupancy::default())?;
    let mut train_f = Vec::new();
    let mut test_f = Vec::new();
    for e in experts {
        train_f.push(expert_features(e, &episode.train, mode)?);
        test_f.push(expert_features(e, &episode.test, mode)?);
    }
    let position = |id: usize| experts.iter().position(|e| e.spec.expert_id == id).unwrap();

    let mut out = Vec::new();
    for &k in ks {
        let selected = select_experts(&scores, k)?;
        let train_blocks: Vec<_> = selected.iter().map(|&id| &train_f[position(id)]).collect();
        let test_blocks: Vec<_> = selected.iter().map(|&id| &test_f[position(id)]).collect();
        let train = head_dataset(&train_blocks, &train_y);
        let test = head_dataset(&test_blocks, &test_y);
        for &seed in seeds {
            let head_seed = sub_seed(seed, &format!("episode/{}/k/{k}", episode.id));
            let head = train_head(&train, episode.labels.len(), hyper, head_seed).map_err(|e| {
                Error::invalid(format!("episode {}: {e}", episode.id))
            })?;
            out.push(EpisodeResult {
                episode_id: episode.id,
                k,
                seed,
                selected: selected.clone(),
                accuracy: evaluate_classifier(&head, &test)?,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotSummary {
    pub k: usize,
    pub seed: u64,
    pub mean_acc: f64,
    /// Sample standard deviation over episodes.
    pub std_acc: f64,
    pub n_episodes: usize,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates episode results into one row per `(k, seed)`.
pub fn summarize(results: &[EpisodeResult], ks: &[usize], seeds: &[u64]) -> Vec<FewShotSummary> {
    let mut rows = Vec::new();
    for &k in ks {
        for &seed in seeds {
            let accs: Vec<f64> = results
                .iter()
                .filter(|r| r.k == k && r.seed == seed)
                .map(|r| r.accuracy)
                .collect();
            let (mean_acc, std_acc) = mean_std(&accs);
            rows.push(FewShotSummary {
                k,
                seed,
                mean_acc,
                std_acc,
                n_episodes: accs.len(),
            });
        }
    }
    rows
}

/// Runs every episode of the stream for all `k` and seeds.
#[allow(clippy::too_many_arguments)]
pub fn run_sys_protocol(
    experts: &[ExpertModel],
    sys: &SysStream,
    patterns: &[ClassPattern],
    render: &RenderConfig,
    ks: &[usize],
    seeds: &[u64],
    hyper: &HeadHyper,
    mode: FeatureMode,
) -> Result<(Vec<FewShotSummary>, Vec<EpisodeResult>)> {
    let mut results = Vec::new();
    for ep in &sys.episodes {
        let episode = sys.materialize(ep, patterns, render);
        results.extend(run_episode(experts, &episode, ks, seeds, hyper, mode)?);
    }
    Ok((summarize(&results, ks, seeds), results))
}

/// Seed-averaged mean accuracy for each `k`, in the order given.
pub fn mean_by_k(rows: &[FewShotSummary], ks: &[usize]) -> Vec<f64> {
    ks.iter()
        .map(|&k| {
            let m: Vec<f64> = rows.iter().filter(|r| r.k == k).map(|r| r.mean_acc).collect();
            m.iter().sum::<f64>() / m.len() as f64
        })
        .collect()
}

/// Reference values from the original few-shot experiment (mean, std in %),
/// for context only; the synthetic benchmark does not reproduce them.
pub const REFERENCE_TABLE: [(usize, f64, f64); 3] = [(3, 18.82, 0.98), (5, 35.77, 1.68), (7, 42.82, 1.45)];
