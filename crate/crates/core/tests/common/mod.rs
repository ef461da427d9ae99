#![allow(dead_code)]

use ec_core::composition::{split_quadrants, Composed, CompositePrediction};
use ec_core::datagen::{
    all_pairs, build_composites, build_object_dataset, gen_class_patterns, CompositeImage,
    DataConfig, RenderConfig,
};
use ec_core::experts::{partition_classes, train_expert, ExpertModel};
use ec_core::nn::Tensor;
use ec_core::seeding::rng_from;
use ec_core::training::TrainHyper;

/// Quadrant decision as the brute-force oracle sees it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleDecision {
    pub class_id: u16,
    pub expert_id: usize,
    pub confidence: f64,
    pub abstained_all: bool,
}

/// Enumerates every `(expert, output)` candidate and picks by sorting on
/// `(-probability, expert_id, output)`, first among experts whose own
/// argmax is an owned class, otherwise among all owned outputs.
pub fn oracle_quadrant(experts: &[ExpertModel], pixels: &[f32]) -> OracleDecision {
    struct Cand {
        expert: usize,
        output: usize,
        class: u16,
        p: f64,
        expert_votes: bool,
    }
    let mut cands = Vec::new();
    for e in experts {
        let mut shape = vec![1];
        shape.extend_from_slice(e.net.input_shape());
        let x = Tensor::new(shape, pixels.to_vec()).unwrap();
        let z: Vec<f64> = e.net.forward(&x).unwrap().data().iter().map(|&v| v as f64).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let p: Vec<f64> = z.iter().map(|v| (v - m).exp() / denom).collect();
        // argmax with lowest-index ties
        let mut top = 0;
        for i in 0..p.len() {
            if p[i] > p[top] {
                top = i;
            }
        }
        let other = e.spec.owned_classes.len();
        for (output, &class) in e.spec.owned_classes.iter().enumerate() {
            cands.push(Cand {
                expert: e.spec.expert_id,
                output,
                class,
                p: p[output],
                expert_votes: top == output && top != other,
            });
        }
    }
    let key = |c: &Cand| (-c.p, c.expert, c.output);
    let pick = |pool: Vec<&Cand>| -> Option<OracleDecision> {
        let mut pool = pool;
        pool.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
        pool.first().map(|c| OracleDecision {
            class_id: c.class,
            expert_id: c.expert,
            confidence: c.p,
            abstained_all: false,
        })
    };
    if let Some(d) = pick(cands.iter().filter(|c| c.expert_votes).collect()) {
        return d;
    }
    let mut d = pick(cands.iter().collect()).expect("at least one owned class");
    d.abstained_all = true;
    d
}

/// Pair label, duplicate or malformed, from the oracle's quadrant decisions.
pub fn oracle_composite(experts: &[ExpertModel], c: &CompositeImage) -> (Composed, Vec<OracleDecision>) {
    let side = c.side();
    let quads = split_quadrants(&c.pixels, side, side).unwrap();
    let decisions: Vec<OracleDecision> = (0..4)
        .filter(|&q| {
            let v = &quads[q];
            let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
            v.iter().any(|&x| (x as f64 - mean).abs() > 0.0)
        })
        .map(|q| oracle_quadrant(experts, &quads[q]))
        .collect();
    let composed = match decisions.as_slice() {
        [a, b] if a.class_id == b.class_id => Composed::Duplicate(a.class_id),
        [a, b] => Composed::Pair(ec_core::datagen::CompositionLabel::new(a.class_id, b.class_id).unwrap()),
        other => Composed::Malformed(other.len()),
    };
    (composed, decisions)
}

/// Checks the pipeline against the oracle; returns the number of
/// all-abstain quadrants seen.
pub fn assert_matches_oracle(experts: &[ExpertModel], composites: &[CompositeImage], preds: &[CompositePrediction]) -> usize {
    assert_eq!(composites.len(), preds.len());
    let mut fallbacks = 0;
    for (c, p) in composites.iter().zip(preds) {
        let (composed, decisions) = oracle_composite(experts, c);
        assert_eq!(p.composed, composed);
        assert_eq!(p.quadrants.len(), decisions.len());
        for ((_, got), want) in p.quadrants.iter().zip(&decisions) {
            assert_eq!(got.class_id, want.class_id);
            assert_eq!(got.expert_id, want.expert_id);
            assert_eq!(got.abstained_all, want.abstained_all);
            assert!((got.confidence as f64 - want.confidence).abs() < 1e-5);
            fallbacks += usize::from(want.abstained_all);
        }
    }
    fallbacks
}

/// Four classes, two briefly trained experts, twenty composites.
pub fn tiny_instance() -> (Vec<ExpertModel>, Vec<CompositeImage>) {
    let config = DataConfig {
        num_classes: 4,
        train_per_class: 20,
        val_per_class: 4,
        test_per_class: 4,
        ..DataConfig::default()
    };
    let patterns = gen_class_patterns(0, 4).unwrap();
    let objects = build_object_dataset(&patterns, &config, 0);
    let hyper = TrainHyper { epochs: 1, batch_size: 16, lr: 1e-3 };
    let experts: Vec<ExpertModel> = partition_classes(4, 2, 0)
        .unwrap()
        .iter()
        .map(|s| train_expert(s, &objects, 16, &hyper, 0).unwrap().0)
        .collect();
    let combos = &all_pairs(4)[..5];
    let composites = build_composites(&patterns, combos, 4, &RenderConfig::default(), &mut rng_from(7));
    assert_eq!(composites.len(), 20);
    (experts, composites)
}

/// Six classes, two experts, every stage; runs in seconds.
pub const TINY_CONFIG: &str = "\
seed=3
num_classes=6
train_per_class=100
val_per_class=20
test_per_class=20
n_combos=10
test_per_combo=20
con_experiences=5
con_train_per_combo=10
sys_experiences=10
sys_n_way=3
sys_shots=3
sys_queries=3
fewshot_k=1,2
fewshot_seeds=2
baseline_epochs=2
";

pub fn tiny_config(out_dir: &std::path::Path) -> ec_core::harness::RunConfig {
    let mut c = ec_core::harness::RunConfig::parse(TINY_CONFIG).unwrap();
    c.out_dir = out_dir.to_path_buf();
    c
}

/// Result files whose bytes must not depend on wall time.
pub const DETERMINISTIC_OUTPUTS: [&str; 9] = [
    "results_ec.csv",
    "results_fewshot.csv",
    "results_finetune.csv",
    "results_er.csv",
    "results_ewc.csv",
    "results_multitask.csv",
    "results_table.csv",
    "plot_con.csv",
    "plot_fewshot.csv",
];
