use std::collections::BTreeSet;

use fewshot::data::{synth_dataset, SynthConfig};
use fewshot::embedding::{ExtractorConfig, FilmParams};
use fewshot::episodes::compute_prototypes;
use fewshot::metric::{argmin, distance, scaled_class_probabilities, AlphaSpec, SimilarityKind};
use fewshot::model::{FewShotModel, MetricConfig, ModelConfig};
use fewshot::numerics::{check_grad, BoundParams, NumericsError, ParamBuilder, SegmentId, Tape, Tensor, Var};
use fewshot::training::{aux_probability, learning_rate};
use proptest::prelude::*;

fn row(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..5.0f64, 2..max_len)
}

fn sq_dist(z: &[f64], c: &[f64]) -> f64 {
    z.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum()
}

proptest! {
    #[test]
    fn probabilities_are_normalized(r in row(12), alpha in 1e-3..5.0f64) {
        let p = scaled_class_probabilities(&r, alpha).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn probabilities_ignore_a_common_shift(r in row(12), alpha in 1e-3..5.0f64, c in -10.0..10.0f64) {
        let p = scaled_class_probabilities(&r, alpha).unwrap();
        let shifted: Vec<f64> = r.iter().map(|d| d + c).collect();
        let q = scaled_class_probabilities(&shifted, alpha).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn most_probable_class_is_the_nearest(r in row(12), alpha in 1e-3..50.0f64) {
        let p = scaled_class_probabilities(&r, alpha).unwrap();
        let best = argmin(&r);
        prop_assert!(p.iter().all(|&x| x <= p[best]));
        prop_assert_eq!(argmin(&p.iter().map(|x| -x).collect::<Vec<_>>()), best);
    }

    #[test]
    fn larger_alpha_sharpens(r in row(12), alpha in 1e-3..5.0f64, factor in 1.0..10.0f64) {
        let best = argmin(&r);
        prop_assume!(r.iter().enumerate().all(|(j, &d)| j == best || d > r[best]));
        let p1 = scaled_class_probabilities(&r, alpha).unwrap()[best];
        let p2 = scaled_class_probabilities(&r, alpha * factor).unwrap()[best];
        prop_assert!(p2 >= p1 - 1e-15);
    }

    #[test]
    fn tiny_alpha_is_uniform(r in row(12)) {
        let k = r.len() as f64;
        let p = scaled_class_probabilities(&r, 1e-8).unwrap();
        prop_assert!(p.iter().all(|&x| (x - 1.0 / k).abs() < 1e-6));
    }

    #[test]
    fn embedding_scale_trades_against_temperature(
        z in prop::collection::vec(-2.0..2.0f64, 3),
        cs in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 3), 2..6),
        alpha in 1e-2..5.0f64,
        s in 0.1..10.0f64,
    ) {
        let d: Vec<f64> = cs.iter().map(|c| sq_dist(&z, c)).collect();
        let sz: Vec<f64> = z.iter().map(|v| s * v).collect();
        let sd: Vec<f64> = cs.iter().map(|c| sq_dist(&sz, &c.iter().map(|v| s * v).collect::<Vec<_>>())).collect();
        let base = scaled_class_probabilities(&d, alpha).unwrap();
        let scaled = scaled_class_probabilities(&sd, alpha / (s * s)).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn cosine_conventions_give_the_same_probabilities(
        z in prop::collection::vec(0.1..2.0f64, 4),
        cs in prop::collection::vec(prop::collection::vec(0.1..2.0f64, 4), 2..6),
        alpha in 1e-2..20.0f64,
    ) {
        let neg: Vec<f64> = cs.iter().map(|c| distance(SimilarityKind::Cosine, &z, c).unwrap()).collect();
        let one_minus: Vec<f64> = neg.iter().map(|d| 1.0 + d).collect();
        let p = scaled_class_probabilities(&neg, alpha).unwrap();
        let q = scaled_class_probabilities(&one_minus, alpha).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prototypes_ignore_sample_order(
        embs in prop::collection::vec(prop::collection::vec(-4.0..4.0f64, 3), 6),
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let base = compute_prototypes(&embs, &labels, 3).unwrap();
        let mut order: Vec<usize> = (0..6).collect();
        let mut x = seed;
        for i in (1..6).rev() {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (x >> 33) as usize % (i + 1));
        }
        let e: Vec<Vec<f64>> = order.iter().map(|&i| embs[i].clone()).collect();
        let l: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let p = compute_prototypes(&e, &l, 3).unwrap();
        for (a, b) in p.prototypes.iter().flatten().zip(base.prototypes.iter().flatten()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        for k in 0..3 {
            let members: Vec<&Vec<f64>> = embs.iter().zip(&labels).filter(|(_, &y)| y == k).map(|(z, _)| z).collect();
            for d in 0..3 {
                let mean = members.iter().map(|z| z[d]).sum::<f64>() / members.len() as f64;
                prop_assert!((base.prototypes[k][d] - mean).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn aux_probability_steps_down_through_powers(total in 1usize..5000, decay in 0usize..30, p0 in 0.05..1.0f64) {
        let mut prev = f64::INFINITY;
        let mut distinct = BTreeSet::new();
        for t in 0..total {
            let p = aux_probability(t, total, p0, decay);
            prop_assert!(p <= prev);
            prev = p;
            let i = (decay * t / total) as i32;
            prop_assert_eq!(p, p0 * 0.9f64.powi(i));
            distinct.insert(i);
        }
        prop_assert!(distinct.len() <= decay.max(1));
    }

    #[test]
    fn learning_rate_is_non_increasing(total in 1usize..40_000, lr0 in 1e-3..1.0f64) {
        let mut prev = f64::INFINITY;
        let mut levels = 0;
        for t in (0..total).step_by(7).chain([total - 1]) {
            let lr = learning_rate(t, total, lr0);
            prop_assert!(lr <= prev);
            if lr < prev {
                levels += 1;
            }
            prev = lr;
        }
        prop_assert!(levels <= 4);
        prop_assert_eq!(learning_rate(0, total, lr0), lr0);
    }

    #[test]
    fn synthetic_splits_never_share_classes(
        supers in 3usize..8,
        per in 1usize..5,
        seed in any::<u64>(),
    ) {
        let cut = [1, 1, supers - 2];
        let d = synth_dataset(&SynthConfig {
            classes: supers * per,
            superclasses: supers,
            input_dim: 2,
            samples_per_class: 2,
            split_superclasses: cut,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let sets: Vec<BTreeSet<usize>> = [&d.train, &d.val, &d.test].iter().map(|s| s.classes().iter().copied().collect()).collect();
        prop_assert!(sets[0].is_disjoint(&sets[1]) && sets[0].is_disjoint(&sets[2]) && sets[1].is_disjoint(&sets[2]));
        prop_assert_eq!(sets.iter().map(BTreeSet::len).sum::<usize>(), supers * per);
        prop_assert_eq!(sets[0].len(), per);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn identity_film_is_bitwise_unconditioned(xs in prop::collection::vec(-3.0..3.0f64, 5 * 6), seed in 0u64..1000) {
        let model = FewShotModel::new(ModelConfig {
            extractor: ExtractorConfig::mlp(6, vec![7, 5], 4),
            ten: None,
            metric: MetricConfig { kind: SimilarityKind::SquaredEuclidean, alpha: AlphaSpec::Fixed(1.0) },
            aux_classes: None,
            seed,
        })
        .unwrap();
        let x = Tensor::new(vec![5, 6], xs);
        let plain = model.embed(&x, None).unwrap();
        let identity = FilmParams::identity(model.extractor().film_widths());
        let conditioned = model.embed(&x, Some(&identity)).unwrap();
        prop_assert!(plain.data().iter().zip(conditioned.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn composite_program_matches_finite_differences(
        a in prop::collection::vec(-1.0..1.0f64, 4 * 3),
        w in prop::collection::vec(-1.0..1.0f64, 3 * 3),
        c in prop::collection::vec(-1.0..1.0f64, 2 * 3),
    ) {
        let mut b = ParamBuilder::new();
        b.push("a", vec![4, 3], a);
        b.push("w", vec![3, 3], w);
        b.push("c", vec![2, 3], c);
        let p = b.finish();
        let program = |t: &mut Tape, bp: &BoundParams| -> Result<Var, NumericsError> {
            let h = t.matmul(bp.var(SegmentId(0)), bp.var(SegmentId(1)));
            let h = t.swish(h);
            let d = t.pairwise_sq_dist(h, bp.var(SegmentId(2)));
            let logits = t.scale(d, -1.5);
            Ok(t.cross_entropy_rows(logits, &[0, 1, 1, 0], &[0.25; 4]))
        };
        let r = check_grad(&program, &p, 1e-4);
        prop_assert!(r.passed(), "max rel error {} at {:?}", r.max_rel_error, r.worst);
    }
}
