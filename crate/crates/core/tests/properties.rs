use std::sync::Arc;

use demerge_core::eval::{EvalError, FnEvaluator};
use demerge_core::evolution::{
    evolve, EvolveConfig, EvolveContext, EvolveMode, Population, UpdateSemantics,
};
use demerge_core::merging::{
    fisher_merge, greedy_soup, keep_count, simple_average, ties_merge, trim_top_k, FisherState,
    MergeAux, MergeMethod, MergeSpec, TrimScope,
};
use demerge_core::tensor::flatten;
use demerge_core::{axpy, FlatVector, ParamSchema, TensorMap};
use proptest::prelude::*;

fn schema(d: usize) -> Arc<ParamSchema> {
    Arc::new(ParamSchema::new([("w", vec![d])]).unwrap())
}

fn finite() -> impl Strategy<Value = f32> {
    prop_oneof![-1e3f32..1e3, Just(0.0f32), -1.0f32..1.0]
}

fn vectors(n: usize, d: usize) -> impl Strategy<Value = Vec<FlatVector>> {
    prop::collection::vec(prop::collection::vec(finite(), d), n).prop_map(move |rows| {
        let s = schema(d);
        rows.into_iter()
            .map(|r| FlatVector::new(s.clone(), r).unwrap())
            .collect()
    })
}

fn tensor_maps() -> impl Strategy<Value = TensorMap> {
    let entry = (
        "[a-z]{1,6}(\\.[a-z0-9]{1,4})?",
        prop::collection::vec(1usize..4, 1..3),
    );
    prop::collection::btree_map(entry.0, entry.1, 1..5).prop_flat_map(|shapes| {
        let sized: Vec<(String, Vec<usize>, usize)> = shapes
            .into_iter()
            .map(|(n, s)| {
                let len = s.iter().product();
                (n, s, len)
            })
            .collect();
        let total: usize = sized.iter().map(|e| e.2).sum();
        prop::collection::vec(any::<f32>(), total).prop_map(move |data| {
            let mut map = TensorMap::new();
            let mut at = 0;
            for (name, shape, len) in &sized {
                map.insert(name.clone(), shape.clone(), data[at..at + len].to_vec())
                    .unwrap();
                at += len;
            }
            map
        })
    })
}

// −f(θ) = −Σθ²: any evaluator that is a pure function of the weights will do
fn neg_norm() -> FnEvaluator<impl Fn(&FlatVector) -> Result<f64, EvalError>> {
    FnEvaluator(|w: &FlatVector| {
        Ok(-w
            .values()
            .iter()
            .map(|&v| f64::from(v).powi(2))
            .sum::<f64>())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flatten_unflatten_round_trip(map in tensor_maps()) {
        let schema = Arc::new(ParamSchema::from_map(&map));
        let flat = flatten(&map, &schema).unwrap();
        prop_assert_eq!(flat.len(), schema.dim());
        let back = flat.unflatten();
        prop_assert_eq!(&back, &map);
        prop_assert!(flatten(&back, &schema).unwrap().bits_eq(&flat));
        // slots are contiguous from zero, in name order
        let mut next = 0;
        for (slot, name) in schema.slots().iter().zip(map.names()) {
            prop_assert_eq!(slot.offset, next);
            prop_assert_eq!(&slot.name, name);
            next += slot.len;
        }
    }

    #[test]
    fn axpy_identities(v in vectors(2, 12), a in -4.0f32..4.0) {
        let zero = FlatVector::zeros(v[0].schema().clone());
        // −0 + +0 = +0 under IEEE-754, so signed zeros are normalized first
        let x = v[0].with_values(v[0].values().iter().map(|&t| t + 0.0).collect()).unwrap();
        prop_assert!(axpy(1.0, &x, &zero).unwrap().bits_eq(&x));
        prop_assert!(axpy(0.0, &v[1], &x).unwrap().bits_eq(&x));
        let cancelled = axpy(-1.0, &x, &x).unwrap();
        prop_assert!(cancelled.values().iter().all(|&t| t == 0.0));
        let out = axpy(a, &v[0], &v[1]).unwrap();
        for j in 0..12 {
            prop_assert_eq!(out.values()[j].to_bits(), a.mul_add(v[0].values()[j], v[1].values()[j]).to_bits());
        }
    }

    #[test]
    fn simple_average_is_permutation_invariant(v in vectors(4, 9), perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle()) {
        let refs: Vec<&FlatVector> = v.iter().collect();
        let permuted: Vec<&FlatVector> = perm.iter().map(|&i| &v[i]).collect();
        prop_assert!(simple_average(&refs, None).unwrap().bits_eq(&simple_average(&permuted, None).unwrap()));
        let w = [0.1, 0.4, 0.3, 0.2];
        let pw: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
        prop_assert!(simple_average(&refs, Some(&w)).unwrap().bits_eq(&simple_average(&permuted, Some(&pw)).unwrap()));
    }

    #[test]
    fn fisher_is_permutation_invariant(
        v in vectors(3, 6),
        f in prop::collection::vec(prop::collection::vec(0.0f32..5.0, 6), 3),
        perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
    ) {
        let states: Vec<FisherState> = f
            .into_iter()
            .map(|d| FisherState { diag: FlatVector::new(schema(6), d).unwrap(), samples: 1 })
            .collect();
        let refs: Vec<&FlatVector> = v.iter().collect();
        let permuted: Vec<&FlatVector> = perm.iter().map(|&i| &v[i]).collect();
        let pstates: Vec<FisherState> = perm.iter().map(|&i| states[i].clone()).collect();
        let a = fisher_merge(&refs, &states, None).unwrap();
        let b = fisher_merge(&permuted, &pstates, None).unwrap();
        prop_assert!(a.bits_eq(&b));
    }

    #[test]
    fn equal_fishers_reduce_to_simple_average(v in vectors(3, 8), f in prop::collection::vec(0.0f32..10.0, 8)) {
        let state = FisherState { diag: FlatVector::new(schema(8), f).unwrap(), samples: 4 };
        let refs: Vec<&FlatVector> = v.iter().collect();
        let fm = fisher_merge(&refs, &[state.clone(), state.clone(), state], None).unwrap();
        let avg = simple_average(&refs, None).unwrap();
        for (a, b) in fm.values().iter().zip(avg.values()) {
            prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn ties_trim_keeps_exact_count(tau in prop::collection::vec(-5.0f64..5.0, 1..40), k in 0.01f64..1.0) {
        let keep = keep_count(k, tau.len());
        let trimmed = trim_top_k(&tau, keep);
        let nonzero_in = tau.iter().filter(|&&t| t != 0.0).count();
        let nonzero_out = trimmed.iter().filter(|&&t| t != 0.0).count();
        prop_assert_eq!(nonzero_out, keep.min(nonzero_in));
        prop_assert!(keep >= 1 && keep as f64 >= k * tau.len() as f64 - 1e-9);
    }

    #[test]
    fn ties_merged_sign_agrees_with_election(v in vectors(4, 10), k in 0.1f64..1.0) {
        let pre = &v[0];
        let models: Vec<&FlatVector> = v[1..].iter().collect();
        let merged = ties_merge(&models, pre, k, 1.0, TrimScope::Global).unwrap();
        let keep = keep_count(k, 10);
        let trimmed: Vec<Vec<f64>> = models
            .iter()
            .map(|m| {
                let tau: Vec<f64> = m.values().iter().zip(pre.values()).map(|(&a, &b)| f64::from(a) - f64::from(b)).collect();
                trim_top_k(&tau, keep)
            })
            .collect();
        for j in 0..10 {
            let total: f64 = trimmed.iter().map(|t| t[j]).sum();
            let delta = f64::from(merged.values()[j]) - f64::from(pre.values()[j]);
            prop_assert!(delta == 0.0 || delta.signum() == total.signum() || (delta.abs() < 1e-3 * (1.0 + f64::from(pre.values()[j]).abs())));
        }
    }

    #[test]
    fn soup_never_falls_below_best_single(v in vectors(4, 3), target in prop::collection::vec(-5.0f32..5.0, 3)) {
        let eval = FnEvaluator(move |w: &FlatVector| {
            Ok(-w.values().iter().zip(&target).map(|(&a, &b)| f64::from(a - b).powi(2)).sum::<f64>())
        });
        let refs: Vec<&FlatVector> = v.iter().collect();
        let soup = greedy_soup(&refs, &eval).unwrap();
        let best = soup.individual_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(soup.score >= best);
    }

    #[test]
    fn degenerate_settings_are_fixed_points(
        v in vectors(4, 5),
        seed in any::<u64>(),
        zero_scale in any::<bool>(),
        sequential in any::<bool>(),
    ) {
        let pop = Population::new(v).unwrap();
        let cfg = EvolveConfig {
            scale_factor: if zero_scale { 0.0 } else { 0.5 },
            crossover_ratio: if zero_scale { 0.5 } else { 0.0 },
            generations: 20,
            seed,
            update: if sequential { UpdateSemantics::Sequential } else { UpdateSemantics::Synchronous },
            ..Default::default()
        };
        let eval = neg_norm();
        let out = evolve(&pop, &cfg, &EvolveContext::new(&eval)).unwrap();
        prop_assert!(out.population.same_members(&pop));
        prop_assert!(out.trace.records.iter().all(|r| r.replacements == 0));
    }

    #[test]
    fn evolution_is_monotone_and_deterministic(v in vectors(5, 4), seed in any::<u64>(), combined in any::<bool>()) {
        let pop = Population::new(v).unwrap();
        let mode = if combined { EvolveMode::Combined(MergeSpec::new(MergeMethod::Simple)) } else { EvolveMode::Simple };
        let cfg = EvolveConfig { generations: 8, seed, mode, ..Default::default() };
        let eval = neg_norm();
        let aux = MergeAux::default();
        let ctx = EvolveContext::new(&eval).with_merger(&aux);
        let a = evolve(&pop, &cfg, &ctx).unwrap();
        let b = evolve(&pop, &cfg, &ctx).unwrap();
        prop_assert!(a.trace.is_monotone());
        prop_assert!(a.population.same_members(&b.population));
        prop_assert!(a.best.bits_eq(&b.best));
        // replacement soundness: every stored fitness is the evaluator's score
        if !combined {
            for (m, f) in a.population.members().iter().zip(a.population.fitness()) {
                prop_assert_eq!(Some(-m.values().iter().map(|&t| f64::from(t).powi(2)).sum::<f64>()), *f);
            }
        }
    }

    #[test]
    fn synchronous_offspring_ignore_scoring_order(v in vectors(5, 3), seed in any::<u64>()) {
        // the evaluator's score does not depend on call order, so reversing the
        // batch it receives must not change the trajectory
        struct Reversed<E>(E);
        impl<E: demerge_core::Evaluator> demerge_core::Evaluator for Reversed<E> {
            fn evaluate(&self, w: &FlatVector) -> Result<f64, EvalError> { self.0.evaluate(w) }
            fn evaluate_batch(&self, batch: &[&FlatVector]) -> Vec<Result<f64, EvalError>> {
                let mut out: Vec<_> = batch.iter().rev().map(|w| self.0.evaluate(w)).collect();
                out.reverse();
                out
            }
            fn identity(&self) -> String { "reversed".into() }
        }
        let pop = Population::new(v).unwrap();
        let cfg = EvolveConfig { generations: 4, seed, ..Default::default() };
        let a = evolve(&pop, &cfg, &EvolveContext::new(&neg_norm())).unwrap();
        let rev = Reversed(neg_norm());
        let b = evolve(&pop, &cfg, &EvolveContext::new(&rev)).unwrap();
        prop_assert!(a.population.same_members(&b.population));
    }
}
