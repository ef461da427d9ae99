use ec_core::composition::{
    arbitrate, assemble_quadrants, compose, detect_occupied, split_quadrants, Composed,
    QuadrantPrediction, OCCUPANCY_EPSILON,
};
use ec_core::continual::ReplayBuffer;
use ec_core::datagen::{gen_class_patterns, render_composite, CompositionLabel, RenderConfig};
use ec_core::experts::{ExpertModel, ExpertSpec};
use ec_core::fewshot::{select_experts, ExpertScore};
use ec_core::nn::{softmax, softmax_cross_entropy, Network, Tensor};
use ec_core::seeding::rng_from;
use proptest::prelude::*;

fn quadrant(class_id: u16, expert_id: usize) -> QuadrantPrediction {
    QuadrantPrediction { class_id, confidence: 0.5, expert_id, abstained_all: false }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn quadrants_round_trip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let (h, w) = (2 * h, 2 * w);
        let mut rng = rng_from(seed);
        let pixels: Vec<f32> = (0..h * w).map(|_| rand::Rng::gen(&mut rng)).collect();
        let quads = split_quadrants(&pixels, h, w).unwrap();
        prop_assert!(quads.iter().all(|q| q.len() == h * w / 4));
        prop_assert_eq!(assemble_quadrants(&quads, h, w), pixels);
    }

    #[test]
    fn softmax_and_gradient_rows(logits in prop::collection::vec(-30.0f64..30.0, 2..12), t in 0usize..12) {
        let k = logits.len();
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let x = Tensor::new(vec![1, k], logits).unwrap();
        let (loss, grad) = softmax_cross_entropy(&x, &[t % k]).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert!(grad.data().iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn compose_is_symmetric(a in 0u16..21, b in 0u16..21) {
        let ab = compose(&[quadrant(a, 0), quadrant(b, 1)]);
        let ba = compose(&[quadrant(b, 1), quadrant(a, 0)]);
        prop_assert_eq!(ab, ba);
        match ab {
            Composed::Pair(l) => {
                prop_assert!(l.lo() < l.hi());
                prop_assert_eq!(l, CompositionLabel::new(b, a).unwrap());
            }
            Composed::Duplicate(c) => prop_assert!(a == b && c == a),
            Composed::Malformed(_) => prop_assert!(false),
        }
    }

    #[test]
    fn reservoir_size_and_membership(capacity in 1usize..50, n in 0usize..300, seed in any::<u64>()) {
        let mut rng = rng_from(seed);
        let mut buf = ReplayBuffer::new(capacity);
        for i in 0..n {
            buf.insert(i, &mut rng);
        }
        prop_assert_eq!(buf.len(), capacity.min(n));
        prop_assert_eq!(buf.seen(), n as u64);
        let mut items = buf.items().to_vec();
        prop_assert!(items.iter().all(|&i| i < n));
        items.sort_unstable();
        items.dedup();
        prop_assert_eq!(items.len(), buf.len());
    }

    #[test]
    fn selection_ignores_constant_shift(
        scores in prop::collection::vec(-100.0f64..100.0, 1..10),
        shift in -50.0f64..50.0,
        k in 1usize..10,
    ) {
        let k = k.min(scores.len());
        let base: Vec<ExpertScore> = scores.iter().enumerate().map(|(i, &s)| ExpertScore { expert_id: i, score: s }).collect();
        // integer-valued scores keep the shift exact
        let base: Vec<ExpertScore> = base.into_iter().map(|s| ExpertScore { score: s.score.round(), ..s }).collect();
        let shifted: Vec<ExpertScore> = base.iter().map(|s| ExpertScore { score: s.score + shift.round(), ..*s }).collect();
        let sel = select_experts(&base, k).unwrap();
        prop_assert_eq!(&sel, &select_experts(&shifted, k).unwrap());
        let mut distinct = sel.clone();
        distinct.sort_unstable();
        distinct.dedup();
        prop_assert_eq!(distinct.len(), k);
    }

    #[test]
    fn composites_have_two_objects_on_flat_ground(a in 0u16..21, b in 0u16..21, seed in any::<u64>()) {
        prop_assume!(a != b);
        let patterns = gen_class_patterns(0, 21).unwrap();
        let label = CompositionLabel::new(a, b).unwrap();
        let c = render_composite(&patterns, label, &RenderConfig::default(), &mut rng_from(seed));
        prop_assert_eq!(c.label, label);
        prop_assert_eq!(c.occupancy_mask().count_ones(), 2);
        let quads = split_quadrants(&c.pixels, c.side(), c.side()).unwrap();
        for (q, quad) in quads.iter().enumerate() {
            prop_assert_eq!(detect_occupied(quad, OCCUPANCY_EPSILON), c.is_occupied(q));
            if !c.is_occupied(q) {
                prop_assert!(quad.iter().all(|&v| v == quad[0]));
            }
        }
    }

    #[test]
    fn arbitration_returns_an_owned_class(
        raw in prop::collection::vec(prop::collection::vec(0.0f32..1.0, 4), 1..5),
    ) {
        let net = Network::micro_cnn(1, 16, 4, &mut rng_from(0)).unwrap();
        let experts: Vec<ExpertModel> = (0..raw.len())
            .map(|i| ExpertModel {
                spec: ExpertSpec { expert_id: i, owned_classes: (0..3).map(|j| (3 * i + j) as u16).collect() },
                net: net.clone(),
            })
            .collect();
        let refs: Vec<&ExpertModel> = experts.iter().collect();
        let probs: Vec<Vec<f32>> = raw.iter().map(|r| softmax(r)).collect();
        let p = arbitrate(&refs, &probs).unwrap();
        let owner = &experts[p.expert_id].spec;
        prop_assert!(owner.owned_classes.contains(&p.class_id));
        let voters = probs.iter().filter(|r| {
            let top = (0..4).fold(0, |t, i| if r[i] > r[t] { i } else { t });
            top != 3
        }).count();
        prop_assert_eq!(p.abstained_all, voters == 0);
    }
}
