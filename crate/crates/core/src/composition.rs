//! Zero-shot composition: classify each occupied quadrant of a composite
//! with the expert pool and report the unordered pair of predicted classes.

use serde::{Deserialize, Serialize};

use crate::datagen::{ClassId, CompositeImage, CompositionLabel, ExperienceStream, QUADRANTS};
use crate::error::{Error, Result};
use crate::experts::ExpertModel;
use crate::nn::softmax;
use crate::training::{argmax, logits, Dataset};

/// Cuts a `2h × 2w` image into TL, TR, BL, BR.
pub fn split_quadrants(pixels: &[f32], height: usize, width: usize) -> Result<[Vec<f32>; 4]> {
    if !height.is_multiple_of(2) || !width.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "composite of {height}×{width} cannot be split into quadrants"
        )));
    }
    if pixels.len() != height * width {
        return Err(Error::DataLength {
            shape: vec![height, width],
            len: pixels.len(),
        });
    }
    let (h, w) = (height / 2, width / 2);
    Ok(std::array::from_fn(|q| {
        let (top, left) = ((q / 2) * h, (q % 2) * w);
        (0..h)
            .flat_map(|y| {
                let row = (top + y) * width + left;
                pixels[row..row + w].iter().copied()
            })
            .collect()
    }))
}

/// Inverse of [`split_quadrants`] for a `height × width` composite.
pub fn assemble_quadrants(quads: &[Vec<f32>; 4], height: usize, width: usize) -> Vec<f32> {
    let (h, w) = (height / 2, width / 2);
    let mut out = vec![0.0; height * width];
    for (q, quad) in quads.iter().enumerate() {
        let (top, left) = ((q / 2) * h, (q % 2) * w);
        for y in 0..h {
            let row = (top + y) * width + left;
            out[row..row + w].copy_from_slice(&quad[y * w..(y + 1) * w]);
        }
    }
    out
}

pub const OCCUPANCY_EPSILON: f64 = 1e-6;

/// A quadrant is occupied when its pixel standard deviation exceeds `epsilon`.
pub fn detect_occupied(quadrant: &[f32], epsilon: f64) -> bool {
    if quadrant.is_empty() {
        return false;
    }
    let n = quadrant.len() as f64;
    let mean = quadrant.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = quadrant.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() > epsilon
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Occupancy {
    /// Standard-deviation threshold on the pixels.
    Detect(f64),
    /// The generator's recorded quadrant indices.
    Oracle,
}

impl Default for Occupancy {
    fn default() -> Self {
        Occupancy::Detect(OCCUPANCY_EPSILON)
    }
}

pub fn occupied_quadrants(composite: &CompositeImage, mode: Occupancy) -> Result<Vec<usize>> {
    match mode {
        Occupancy::Oracle => Ok(composite.occupied.iter().map(|&q| q as usize).collect()),
        Occupancy::Detect(eps) => {
            let side = composite.side();
            let quads = split_quadrants(&composite.pixels, side, side)?;
            Ok((0..QUADRANTS).filter(|&q| detect_occupied(&quads[q], eps)).collect())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadrantPrediction {
    pub class_id: ClassId,
    pub confidence: f32,
    pub expert_id: usize,
    /// Every expert voted "other"; the best non-other output was used.
    pub abstained_all: bool,
}

/// Reduces every expert's softmax over one quadrant to a single class.
///
/// `probs[i]` belongs to `experts[i]`. Experts whose argmax is "other"
/// abstain; the most confident remaining expert wins. If all abstain, the
/// highest non-other probability anywhere wins. Ties go to the lower
/// expert id, then the lower output index.
pub fn arbitrate(experts: &[&ExpertModel], probs: &[Vec<f32>]) -> Result<QuadrantPrediction> {
    if experts.is_empty() || experts.len() != probs.len() {
        return Err(Error::invalid("arbitration needs one probability row per expert (≥ 1)"));
    }
    let mut order: Vec<usize> = (0..experts.len()).collect();
    order.sort_by_key(|&i| experts[i].spec.expert_id);

    let mut best: Option<QuadrantPrediction> = None;
    for &i in &order {
        let spec = &experts[i].spec;
        let local = argmax(&probs[i]);
        if local == spec.other_output() {
            continue;
        }
        if best.is_none_or(|b| probs[i][local] > b.confidence) {
            best = Some(QuadrantPrediction {
                class_id: spec.owned_classes[local],
                confidence: probs[i][local],
                expert_id: spec.expert_id,
                abstained_all: false,
            });
        }
    }
    if let Some(b) = best {
        return Ok(b);
    }
    for &i in &order {
        let spec = &experts[i].spec;
        for (out, &class_id) in spec.owned_classes.iter().enumerate() {
            if best.is_none_or(|b| probs[i][out] > b.confidence) {
                best = Some(QuadrantPrediction {
                    class_id,
                    confidence: probs[i][out],
                    expert_id: spec.expert_id,
                    abstained_all: true,
                });
            }
        }
    }
    best.ok_or_else(|| Error::invalid("no expert owns any class"))
}

/// Softmax rows of every expert over a batch of quadrants: `out[e][n]`.
fn expert_probs(experts: &[&ExpertModel], quadrants: &Dataset) -> Result<Vec<Vec<Vec<f32>>>> {
    experts
        .iter()
        .map(|e| Ok(logits(&e.net, quadrants)?.iter().map(|r| softmax(r)).collect()))
        .collect()
}

pub fn predict_quadrant(experts: &[ExpertModel], quadrant: &[f32]) -> Result<QuadrantPrediction> {
    let first = experts.first().ok_or_else(|| Error::invalid("no experts"))?;
    let mut data = Dataset::new(first.net.input_shape().to_vec());
    if data.sample_len() != quadrant.len() {
        return Err(Error::Shape {
            context: "quadrant".into(),
            expected: data.sample_shape.clone(),
            actual: vec![quadrant.len()],
        });
    }
    data.push(quadrant, 0);
    Ok(predict_quadrants(experts, &data)?.remove(0))
}

/// Arbitrated prediction for every quadrant in `quadrants`.
pub fn predict_quadrants(experts: &[ExpertModel], quadrants: &Dataset) -> Result<Vec<QuadrantPrediction>> {
    let refs: Vec<&ExpertModel> = experts.iter().collect();
    let probs = expert_probs(&refs, quadrants)?;
    (0..quadrants.len())
        .map(|n| {
            let rows: Vec<Vec<f32>> = probs.iter().map(|p| p[n].clone()).collect();
            arbitrate(&refs, &rows)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Composed {
    Pair(CompositionLabel),
    /// Both quadrants got the same class.
    Duplicate(ClassId),
    /// Not exactly two occupied quadrants; holds how many there were.
    Malformed(usize),
}

impl Composed {
    pub fn is_correct(&self, truth: CompositionLabel) -> bool {
        matches!(self, Composed::Pair(l) if *l == truth)
    }
}

pub fn compose(preds: &[QuadrantPrediction]) -> Composed {
    match preds {
        [a, b] if a.class_id == b.class_id => Composed::Duplicate(a.class_id),
        [a, b] => Composed::Pair(CompositionLabel::new(a.class_id, b.class_id).expect("distinct")),
        _ => Composed::Malformed(preds.len()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositePrediction {
    pub composed: Composed,
    pub quadrants: Vec<(usize, QuadrantPrediction)>,
}

/// Predictions for a batch of composites, in input order.
pub fn predict_composites(
    experts: &[ExpertModel],
    composites: &[CompositeImage],
    occupancy: Occupancy,
) -> Result<Vec<CompositePrediction>> {
    let Some(first) = composites.first() else {
        return Ok(Vec::new());
    };
    let res = first.side() / 2;
    let mut data = Dataset::new(vec![1, res, res]);
    let mut owners = Vec::new();
    for (i, c) in composites.iter().enumerate() {
        if c.side() != 2 * res {
            return Err(Error::invalid("composites of mixed sizes"));
        }
        let quads = split_quadrants(&c.pixels, c.side(), c.side())?;
        for q in occupied_quadrants(c, occupancy)? {
            data.push(&quads[q], 0);
            owners.push((i, q));
        }
    }
    let preds = if data.is_empty() {
        Vec::new()
    } else {
        predict_quadrants(experts, &data)?
    };
    let mut out: Vec<Vec<(usize, QuadrantPrediction)>> = vec![Vec::new(); composites.len()];
    for ((i, q), p) in owners.into_iter().zip(preds) {
        out[i].push((q, p));
    }
    Ok(out
        .into_iter()
        .map(|quadrants| {
            let preds: Vec<_> = quadrants.iter().map(|(_, p)| *p).collect();
            CompositePrediction {
                composed: compose(&preds),
                quadrants,
            }
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperienceScore {
    pub experience_id: usize,
    pub n_samples: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub duplicates: usize,
    pub malformed: usize,
    /// Fraction of predicted quadrants that went through the all-abstain path.
    pub abstain_fallback_rate: f64,
}

impl ExperienceScore {
    fn tally(experience_id: usize, truth: &[CompositionLabel], preds: &[CompositePrediction]) -> Self {
        let mut s = ExperienceScore {
            experience_id,
            n_samples: preds.len(),
            ..Default::default()
        };
        let (mut quads, mut fallback) = (0usize, 0usize);
        for (t, p) in truth.iter().zip(preds) {
            match p.composed {
                Composed::Pair(_) => s.correct += usize::from(p.composed.is_correct(*t)),
                Composed::Duplicate(_) => s.duplicates += 1,
                Composed::Malformed(_) => s.malformed += 1,
            }
            quads += p.quadrants.len();
            fallback += p.quadrants.iter().filter(|(_, q)| q.abstained_all).count();
        }
        s.accuracy = ratio(s.correct, s.n_samples);
        s.abstain_fallback_rate = ratio(fallback, quads);
        s
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub per_experience: Vec<ExperienceScore>,
    /// Pooled over all experiences' test sets.
    pub overall: ExperienceScore,
    pub predictions: Vec<Vec<CompositePrediction>>,
}

/// Scores the experts on every experience's test composites. Nothing is
/// trained, so the visiting order has no effect on any prediction.
pub fn evaluate_zero_shot(
    experts: &[ExpertModel],
    stream: &ExperienceStream,
    occupancy: Occupancy,
) -> Result<ZeroShotReport> {
    let mut per_experience = Vec::new();
    let mut predictions = Vec::new();
    let mut all_truth = Vec::new();
    let mut all_preds = Vec::new();
    for e in &stream.experiences {
        let preds = predict_composites(experts, &e.test, occupancy)?;
        let truth: Vec<_> = e.test.iter().map(|c| c.label).collect();
        per_experience.push(ExperienceScore::tally(e.id, &truth, &preds));
        all_truth.extend(truth);
        all_preds.extend(preds.iter().cloned());
        predictions.push(preds);
    }
    let mut overall = ExperienceScore::tally(usize::MAX, &all_truth, &all_preds);
    overall.experience_id = stream.len();
    Ok(ZeroShotReport {
        per_experience,
        overall,
        predictions,
    })
}
