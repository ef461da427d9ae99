//! Class-incremental baselines over whole composites: one 100-way head,
//! trained experience by experience (Finetune, ER, EWC) or jointly
//! (Multitask).

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{CompositeImage, CompositionLabel, ExperienceStream};
use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, Adam, Network, Tensor};
use crate::seeding::{rng_for, Rng};
use crate::training::{predict, train_step, Dataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Finetune,
    Er,
    Ewc,
    Multitask,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Finetune, Method::Er, Method::Ewc, Method::Multitask];

    pub fn name(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Er => "er",
            Method::Ewc => "ewc",
            Method::Multitask => "multitask",
        }
    }

    pub fn is_sequential(self) -> bool {
        self != Method::Multitask
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}` (finetune|er|ewc|multitask)")))
    }
}

/// Fixed-capacity uniform sample of everything ever inserted (algorithm R).
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    seen: u64,
}

impl<T: Clone> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity),
            seen: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }

    pub fn insert<R: rand::Rng>(&mut self, item: T, rng: &mut R) {
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            let j = rng.gen_range(0..self.seen);
            if (j as usize) < self.capacity {
                self.items[j as usize] = item;
            }
        }
    }

    /// `n` uniform draws with replacement; empty when the buffer is.
    pub fn sample<R: rand::Rng>(&self, n: usize, rng: &mut R) -> Vec<T> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| self.items[rng.gen_range(0..self.items.len())].clone())
            .collect()
    }
}

/// Diagonal Fisher estimate anchored at the parameters it was measured at.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherInfo {
    /// One vector per parameter tensor, in network order.
    pub fisher: Vec<Vec<f32>>,
    pub anchor: Vec<Vec<f32>>,
}

impl FisherInfo {
    /// Mean over samples of the squared per-sample log-likelihood gradient.
    pub fn estimate(net: &Network<f32>, data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset("Fisher estimation set".into()));
        }
        let mut work = net.clone();
        let mut fisher: Vec<Vec<f32>> = net.params().map(|p| vec![0.0; p.len()]).collect();
        for i in 0..data.len() {
            let (x, y) = data.batch::<f32>(&[i]);
            let logits = work.forward_train(&x)?;
            let (_, grad) = softmax_cross_entropy(&logits, &y)?;
            work.backward(&grad)?;
            for (f, p) in fisher.iter_mut().zip(work.params()) {
                for (fi, g) in f.iter_mut().zip(p.grad().unwrap()) {
                    *fi += g * g;
                }
            }
        }
        let n = data.len() as f32;
        for f in &mut fisher {
            f.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self {
            fisher,
            anchor: net.params().map(|p| p.data().to_vec()).collect(),
        })
    }

    /// `λ/2 · Σ F (θ − θ*)²`.
    pub fn penalty(&self, net: &Network<f32>, lambda: f32) -> f32 {
        let mut total = 0.0f32;
        for ((f, a), p) in self.fisher.iter().zip(&self.anchor).zip(net.params()) {
            for ((fi, ai), ti) in f.iter().zip(a).zip(p.data()) {
                total += fi * (ti - ai) * (ti - ai);
            }
        }
        0.5 * lambda * total
    }

    /// Adds `λ F (θ − θ*)` to the parameter gradients.
    pub fn add_penalty_grad(&self, params: &mut [&mut Tensor<f32>], lambda: f32) {
        for ((f, a), p) in self.fisher.iter().zip(&self.anchor).zip(params.iter_mut()) {
            let (data, grad) = p.data_and_grad_mut();
            for (((g, fi), ai), ti) in grad.iter_mut().zip(f).zip(a).zip(data.iter()) {
                *g += lambda * fi * (ti - ai);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineHyper {
    /// Passes over each experience's training data (Multitask: over the union).
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub buffer_capacity: usize,
    pub ewc_lambda: f64,
}

impl Default for BaselineHyper {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            buffer_capacity: 500,
            ewc_lambda: 100.0,
        }
    }
}

/// Accuracy after each experience: `rows[t][e]` for `e ≤ t`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn get(&self, t: usize, e: usize) -> Option<f64> {
        self.rows.get(t)?.get(e).copied()
    }

    pub fn is_lower_triangular(&self) -> bool {
        self.rows.iter().enumerate().all(|(t, r)| r.len() == t + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRun {
    pub method: Method,
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    /// Pooled accuracy on the test sets of experiences `≤ t`.
    pub avg_accuracy_so_far: Vec<f64>,
    /// Training loss of every optimizer step, in order.
    pub step_losses: Vec<f32>,
    pub wall_seconds: f64,
}

impl BaselineRun {
    pub fn final_accuracy(&self) -> f64 {
        *self.avg_accuracy_so_far.last().unwrap_or(&0.0)
    }
}

/// Whole composites labelled by their index in `label_space`.
pub fn composite_dataset(composites: &[CompositeImage], label_space: &[CompositionLabel]) -> Result<Dataset> {
    let side = composites.first().map_or(0, |c| c.side());
    let mut d = Dataset::new(vec![1, side, side]);
    for c in composites {
        let y = label_space
            .iter()
            .position(|l| *l == c.label)
            .ok_or_else(|| Error::invalid(format!("label {} outside the label space", c.label)))?;
        d.push(&c.pixels, y);
    }
    Ok(d)
}

struct Prepared {
    train: Vec<Dataset>,
    test: Vec<Dataset>,
}

fn prepare(stream: &ExperienceStream, label_space: &[CompositionLabel]) -> Result<Prepared> {
    if stream.is_empty() {
        return Err(Error::EmptyDataset("experience stream".into()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for e in &stream.experiences {
        train.push(composite_dataset(&e.train, label_space)?);
        test.push(composite_dataset(&e.test, label_space)?);
    }
    Ok(Prepared { train, test })
}

fn concat(sets: &[Dataset]) -> Dataset {
    let mut out = Dataset::new(sets[0].sample_shape.clone());
    for s in sets {
        out.data.extend_from_slice(&s.data);
        out.labels.extend_from_slice(&s.labels);
    }
    out
}

/// Per-experience accuracies for experiences `0..=t`, plus their pooled mean.
fn evaluate_seen(net: &Network<f32>, tests: &[Dataset]) -> Result<(Vec<f64>, f64)> {
    let (mut correct, mut total) = (0usize, 0usize);
    let mut per = Vec::new();
    for t in tests {
        let preds = predict(net, t)?;
        let c = preds.iter().zip(&t.labels).filter(|(p, l)| p == l).count();
        per.push(c as f64 / t.len().max(1) as f64);
        correct += c;
        total += t.len();
    }
    Ok((per, correct as f64 / total.max(1) as f64))
}

/// Fresh baseline network over whole composites, optionally seeded with the
/// convolutional trunk of a pretrained object classifier.
pub fn baseline_network(
    side: usize,
    num_labels: usize,
    seed: u64,
    pretrained: Option<&Network<f32>>,
) -> Result<Network<f32>> {
    let mut net = Network::micro_cnn(1, side, num_labels, &mut rng_for(seed, "baseline/init"))?;
    if let Some(src) = pretrained {
        if net.copy_matching_params(src).is_empty() {
            return Err(Error::invalid("pretrained backbone shares no layer shapes with the baseline"));
        }
    }
    Ok(net)
}

struct Trainer<'a> {
    method: Method,
    hyper: &'a BaselineHyper,
    seed: u64,
    net: Network<f32>,
    adam: Adam<f32>,
    shuffle: Rng,
    replay_rng: Rng,
    buffer: ReplayBuffer<(usize, usize)>,
    fishers: Vec<FisherInfo>,
    losses: Vec<f32>,
}

impl Trainer<'_> {
    fn step(&mut self, x: &Tensor<f32>, y: &[usize], epoch: usize) -> Result<()> {
        let diverged = |detail: String| Error::Diverged {
            seed: self.seed,
            epoch,
            detail,
        };
        let loss = if self.method == Method::Ewc {
            let logits = self.net.forward_train(x)?;
            let (ce, grad) = softmax_cross_entropy(&logits, y)?;
            self.net.backward(&grad)?;
            let lambda = self.hyper.ewc_lambda as f32;
            let mut penalty = 0.0f32;
            for f in &self.fishers {
                penalty += f.penalty(&self.net, lambda);
            }
            let mut params = self.net.params_mut();
            for f in &self.fishers {
                f.add_penalty_grad(&mut params, lambda);
            }
            self.adam.step(&mut params).map_err(|e| diverged(e.to_string()))?;
            ce + penalty
        } else {
            train_step(&mut self.net, &mut self.adam, x, y).map_err(|e| diverged(e.to_string()))?
        };
        if !loss.is_finite() {
            return Err(diverged("training loss is not finite".into()));
        }
        self.losses.push(loss);
        Ok(())
    }

    /// `epochs` passes over `train`; `exp` indexes it within `pool` for replay.
    fn fit(&mut self, pool: &[Dataset], exp: usize) -> Result<()> {
        let train = &pool[exp];
        let b = self.hyper.batch_size;
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 1..=self.hyper.epochs {
            order.shuffle(&mut self.shuffle);
            let replaying = self.method == Method::Er && !self.buffer.is_empty();
            let fresh = if replaying { (b / 2).max(1) } else { b };
            for chunk in order.chunks(fresh) {
                let (mut x, mut y) = train.batch::<f32>(chunk);
                if replaying {
                    let draws = self.buffer.sample(b - fresh, &mut self.replay_rng);
                    let mut data = x.into_data();
                    for &(e, i) in &draws {
                        data.extend_from_slice(pool[e].sample(i));
                        y.push(pool[e].labels[i]);
                    }
                    let mut shape = train.sample_shape.clone();
                    shape.insert(0, y.len());
                    x = Tensor::new(shape, data)?;
                }
                self.step(&x, &y, epoch)?;
                if self.method == Method::Er && epoch == 1 {
                    for &i in chunk {
                        self.buffer.insert((exp, i), &mut self.replay_rng);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Runs one baseline over the stream. Multitask trains once on the union
/// and reports a single row.
pub fn run_baseline(
    method: Method,
    stream: &ExperienceStream,
    label_space: &[CompositionLabel],
    hyper: &BaselineHyper,
    seed: u64,
    pretrained: Option<&Network<f32>>,
) -> Result<BaselineRun> {
    if hyper.batch_size == 0 {
        return Err(Error::invalid("batch size must be ≥ 1"));
    }
    if method == Method::Er && hyper.buffer_capacity < hyper.batch_size / 2 {
        return Err(Error::invalid("replay capacity must be at least half the batch size"));
    }
    if hyper.ewc_lambda < 0.0 {
        return Err(Error::invalid("EWC λ must be ≥ 0"));
    }
    let start = Instant::now();
    let data = prepare(stream, label_space)?;
    let side = data.train[0].sample_shape[1];
    let mut tr = Trainer {
        method,
        hyper,
        seed,
        net: baseline_network(side, label_space.len(), seed, pretrained)?,
        adam: Adam::new(hyper.lr as f32),
        shuffle: rng_for(seed, "baseline/shuffle"),
        replay_rng: rng_for(seed, "baseline/replay"),
        buffer: ReplayBuffer::new(hyper.buffer_capacity.max(1)),
        fishers: Vec::new(),
        losses: Vec::new(),
    };
    let mut matrix = AccuracyMatrix::default();
    let mut avg = Vec::new();
    if method == Method::Multitask {
        let union = [concat(&data.train)];
        tr.fit(&union, 0)?;
        let (per, pooled) = evaluate_seen(&tr.net, &data.test)?;
        matrix.rows.push(per);
        avg.push(pooled);
    } else {
        for t in 0..data.train.len() {
            tr.fit(&data.train, t)?;
            if method == Method::Ewc {
                tr.fishers.push(FisherInfo::estimate(&tr.net, &data.train[t])?);
            }
            let (per, pooled) = evaluate_seen(&tr.net, &data.test[..=t])?;
            matrix.rows.push(per);
            avg.push(pooled);
        }
    }
    Ok(BaselineRun {
        method,
        seed,
        matrix,
        avg_accuracy_so_far: avg,
        step_losses: tr.losses,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Retention frequency of the first `early` items after `n` insertions,
/// one value per seed.
pub fn reservoir_retention(capacity: usize, n: usize, early: usize, seeds: &[u64]) -> Vec<f64> {
    seeds
        .iter()
        .map(|&s| {
            let mut rng = rng_for(s, "reservoir");
            let mut buf = ReplayBuffer::new(capacity);
            for i in 0..n {
                buf.insert(i, &mut rng);
            }
            buf.items().iter().filter(|&&i| i < early).count() as f64 / early as f64
        })
        .collect()
}
