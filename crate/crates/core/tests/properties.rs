use std::collections::BTreeSet;

use proptest::prelude::*;
use treeprune::attrs::AttributeRegistry;
use treeprune::interp::{random_inputs, run_env};
use treeprune::model::{decode_model, encode_model, load_model, save_model, synthesize_model, FixtureSpec, ModelArchive};
use treeprune::report::{batch_one_shapes, count_params};
use treeprune::rewrite::apply_plan;
use treeprune::scoring::{n_prune, overlap_index, select_channels, Criterion, Mode, NormKind};
use treeprune::tree::TreePolicy;
use treeprune::PruneContext;

const SMALL: [&str; 9] = [
    "conv_chain",
    "fire_module",
    "residual_block",
    "residual_stage",
    "many_to_many_block",
    "one_to_one",
    "one_to_many",
    "many_to_one",
    "many_to_many",
];

fn small_template() -> impl Strategy<Value = &'static str> {
    prop::sample::select(&SMALL[..])
}

fn norm() -> impl Strategy<Value = NormKind> {
    prop_oneof![Just(NormKind::L1), Just(NormKind::L2)]
}

fn ctx_of(m: ModelArchive) -> PruneContext {
    PruneContext::new(m, AttributeRegistry::builtin(), TreePolicy::default()).unwrap()
}

fn scale(m: &mut ModelArchive, tensor: &str, f: impl Fn(usize, f32) -> f32) {
    let t = m.initializer_mut(tensor).unwrap();
    let inner: usize = t.dims[1..].iter().product();
    for (i, x) in t.as_f32_mut().unwrap().iter_mut().enumerate() {
        *x = f(i / inner, *x);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn model_round_trips(t in small_template(), seed in any::<u64>(), depth in 1usize..5) {
        let m = synthesize_model(&FixtureSpec::new(t).seed(seed).depth(depth)).unwrap();
        let bytes = encode_model(&m);
        let (back, warnings) = decode_model(&bytes).unwrap();
        prop_assert!(warnings.is_empty());
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(encode_model(&back), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.onnx");
        save_model(&m, &path).unwrap();
        prop_assert_eq!(load_model(&path).unwrap(), m);
    }

    #[test]
    fn selection_removes_exactly_n_prune(scores in prop::collection::vec(0.0f64..10.0, 1..64), ratio in 0.0f64..1.0) {
        let keep = select_channels(&scores, ratio);
        let removed = keep.iter().filter(|k| !**k).count();
        prop_assert_eq!(removed, n_prune(ratio, scores.len()));
        prop_assert!(keep.iter().any(|k| *k));
        // Every removed score is at most every kept one.
        let max_removed = scores.iter().zip(&keep).filter(|(_, k)| !**k).map(|(s, _)| *s).fold(f64::MIN, f64::max);
        let min_kept = scores.iter().zip(&keep).filter(|(_, k)| **k).map(|(s, _)| *s).fold(f64::MAX, f64::min);
        prop_assert!(removed == 0 || max_removed <= min_kept);
        prop_assert_eq!(select_channels(&scores, ratio), keep);
    }

    #[test]
    fn selection_follows_permutation(scores in prop::collection::btree_set(0u32..10_000, 2..40), ratio in 0.0f64..1.0, rot in 0usize..40) {
        // Distinct scores, so the mask must move with the values.
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let n = scores.len();
        let rot = rot % n;
        let mut rotated = scores.clone();
        rotated.rotate_left(rot);
        let a = select_channels(&scores, ratio);
        let mut b = select_channels(&rotated, ratio);
        b.rotate_right(rot);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn leaf_scaling_keeps_masks(seed in any::<u64>(), c in 0.01f32..100.0, ratio in 0.1f64..0.9, kind in norm()) {
        let m = synthesize_model(&FixtureSpec::new("many_to_many").seed(seed)).unwrap();
        let crit = Criterion::new(kind, Mode::Tree);
        let (p, _) = ctx_of(m.clone()).plan(ratio, &crit).unwrap();
        let mut scaled = m;
        for leaf in ["conv_n_plus_1.weight", "conv_n_plus_2.weight"] {
            scale(&mut scaled, leaf, |_, x| x * c);
        }
        let (q, _) = ctx_of(scaled).plan(ratio, &crit).unwrap();
        for (a, b) in p.groups.iter().zip(&q.groups) {
            prop_assert_eq!(&a.keep, &b.keep);
        }
    }

    #[test]
    fn producer_growth_never_lowers_score(seed in any::<u64>(), ch in 0usize..8, c in 1.0f32..5.0, kind in norm()) {
        let m = synthesize_model(&FixtureSpec::new("one_to_many").seed(seed)).unwrap();
        let crit = Criterion::new(kind, Mode::Tree);
        let (p, _) = ctx_of(m.clone()).plan(0.0, &crit).unwrap();
        let mut grown = m;
        scale(&mut grown, "conv_n.weight", |o, x| if o == ch { x * c } else { x });
        let (q, _) = ctx_of(grown).plan(0.0, &crit).unwrap();
        let (a, b) = (&p.group_of("conv_n").unwrap().scores, &q.group_of("conv_n").unwrap().scores);
        prop_assert!(b[ch] >= a[ch]);
        for i in (0..8).filter(|&i| i != ch) {
            prop_assert_eq!(a[i], b[i]);
        }
    }

    #[test]
    fn parameter_accounting(t in small_template(), seed in 0u64..1000, ratio in 0.0f64..0.95, kind in norm(), single in any::<bool>()) {
        let ctx = ctx_of(synthesize_model(&FixtureSpec::new(t).seed(seed)).unwrap());
        let mode = if single { Mode::Single } else { Mode::Tree };
        let (p, _) = ctx.plan(ratio, &Criterion::new(kind, mode)).unwrap();
        let out = apply_plan(&ctx, &p).unwrap();
        prop_assert_eq!(count_params(&ctx.model) - count_params(&out.model), out.removed_elements as u64);
        for g in &p.groups {
            prop_assert_eq!(g.pruned().len(), n_prune(ratio, g.keep.len()));
        }
    }

    #[test]
    fn interpreter_agrees_with_shape_inference(t in small_template(), seed in 0u64..1000, ratio in 0.0f64..0.95) {
        let ctx = ctx_of(synthesize_model(&FixtureSpec::new(t).seed(seed)).unwrap());
        let (p, _) = ctx.plan(ratio, &Criterion::new(NormKind::L1, Mode::Tree)).unwrap();
        let pruned = apply_plan(&ctx, &p).unwrap().model;
        for m in [&ctx.model, &pruned] {
            let shapes = batch_one_shapes(m).unwrap();
            let env = run_env(m, &random_inputs(m, 1, seed).unwrap()).unwrap();
            for (name, v) in env.iter() {
                if let Some(s) = shapes.get(name) {
                    prop_assert_eq!(s.concrete(), Some(v.dims.clone()), "{}", name);
                }
            }
        }
    }

    #[test]
    fn overlap_is_a_fraction(a in prop::collection::btree_set(0usize..50, 0..30), b in prop::collection::btree_set(0usize..50, 1..30)) {
        let o = overlap_index(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&o));
        prop_assert_eq!(overlap_index(&b, &b).unwrap(), 1.0);
        let empty = BTreeSet::new();
        prop_assert!(overlap_index(&a, &empty).is_err());
    }
}
