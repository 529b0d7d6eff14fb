mod common;

use std::collections::BTreeSet;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use triplecheck::detect::{precision_recall_at_k, top_count, ConfidenceRanking};
use triplecheck::diff::Tensor;
use triplecheck::objective::contrastive_loss;
use triplecheck::views::{build_views, neighbor_budget, EntityIndex};
use triplecheck::{Hyper, ModelState};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn candidates_match_all_pairs_scan(seed in 0u64..10_000, ents in 2usize..30, rels in 1usize..5, n in 1usize..120) {
        let g = random_graph(seed, ents, rels, n);
        let index = EntityIndex::build(&g);
        for i in 0..g.len() {
            let one: BTreeSet<usize> = index.head_candidates(&g, i).into_iter().collect();
            let two: BTreeSet<usize> = index.tail_candidates(&g, i).into_iter().collect();
            prop_assert_eq!(&one, &brute_view_one(&g, i));
            prop_assert_eq!(&two, &brute_view_two(&g, i));
            prop_assert_eq!(index.union_size(&g, i), one.union(&two).count());
        }
    }

    #[test]
    fn sampled_neighbors_come_from_candidates(seed in 0u64..10_000, m in 1usize..8) {
        let g = random_graph(seed, 15, 3, 60);
        let vg = build_views(&g, Some(m), seed).unwrap();
        prop_assert_eq!(vg.len(), g.len());
        for i in 0..g.len() {
            let (one, two) = (brute_view_one(&g, i), brute_view_two(&g, i));
            prop_assert_eq!(vg.view_one(i).len(), m);
            prop_assert_eq!(vg.view_two(i)[0], i);
            prop_assert!(vg.view_one(i)[1..].iter().all(|j| one.contains(j) || (one.is_empty() && *j == i)));
            prop_assert!(vg.view_two(i)[1..].iter().all(|j| two.contains(j) || (two.is_empty() && *j == i)));
            // without replacement whenever the pool is large enough
            if one.len() >= m - 1 {
                let distinct: BTreeSet<_> = vg.view_one(i).iter().collect();
                prop_assert_eq!(distinct.len(), m);
            }
        }
    }

    #[test]
    fn membership_agrees_with_scan(seed in 0u64..10_000) {
        let g = random_graph(seed, 8, 2, 25);
        for h in 0..g.num_entities() {
            for r in 0..g.num_relations() {
                for t in 0..g.num_entities() {
                    let probe = triplecheck::Triple::new(h, r, t);
                    prop_assert_eq!(g.contains(&probe), g.triples().contains(&probe));
                }
            }
        }
    }

    #[test]
    fn precision_and_recall_count_the_same_hits(seed in 0u64..10_000, n in 10usize..300, errs in 1usize..30, k in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let errs = errs.min(n);
        let mut flags = vec![false; n];
        flags[..errs].iter_mut().for_each(|f| *f = true);
        flags.shuffle(&mut rng);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let r = ConfidenceRanking::from_order(&order);
        if let Ok(count) = top_count(n, k) {
            let (p, rec) = precision_recall_at_k(&r, Some(&flags), k).unwrap();
            prop_assert!((p * count as f64 - rec * errs as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn confidence_is_monotone(sim in -1.0f64..1.0, e in 0.0f64..10.0, d in 1e-3f64..1.0, lambda in 1e-3f64..10.0) {
        let r = ConfidenceRanking::from_components(&[sim, sim, sim + d], &[e, e + d, e], lambda).unwrap();
        let c = |i: usize| r.entries().iter().find(|x| x.triple == i).unwrap().confidence;
        prop_assert!(c(1) <= c(0));
        prop_assert!(c(2) >= c(0));
        let order: Vec<usize> = r.entries().iter().map(|x| x.triple).collect();
        prop_assert_eq!(order, vec![1, 0, 2]);
    }

    #[test]
    fn contrastive_matches_literal_sum(seed in 0u64..10_000, tau in 0.1f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, 4, 5);
        let z = random_tensor(&mut rng, 4, 5);
        let rows = |t: &Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
        let ours = contrastive_loss(&x, &z, tau, false).unwrap();
        let oracle = contrastive_oracle(&rows(&x), &rows(&z), tau);
        prop_assert!((ours - oracle).abs() < 1e-12 * oracle.abs().max(1.0));
    }

    #[test]
    fn gate_weights_bounded_and_monotone(seed in 0u64..10_000, m in 1usize..12) {
        let hyper = Hyper { dim: 4, out_dim: 3, fan_out: m, mu: 0.0, ..Hyper::default() };
        let mut model = ModelState::new(3, 2, hyper, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchor = random_tensor(&mut rng, 1, 12).data().to_vec();
        let nbrs: Vec<Vec<f64>> = (0..m).map(|_| random_tensor(&mut rng, 1, 12).data().to_vec()).collect();
        let (_, soft) = model.attend(&anchor, &nbrs).unwrap();
        prop_assert!((soft.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(soft.iter().all(|&w| w > 0.0));
        let mut prev = soft.clone();
        for mu in [0.01, 0.05, 0.1, 0.2, 0.5, 1.0] {
            model.hyper.mu = mu;
            let (repr, w) = model.attend(&anchor, &nbrs).unwrap();
            prop_assert!(w.iter().zip(&soft).all(|(a, s)| *a >= 0.0 && a <= s));
            prop_assert!(w.iter().zip(&prev).all(|(a, p)| a <= p));
            prop_assert!(w.iter().sum::<f64>() <= 1.0 + 1e-12);
            prop_assert!(repr.iter().all(|&v| v > 0.0 && v < 1.0));
            prev = w;
        }
    }

    #[test]
    fn view_building_is_deterministic(seed in 0u64..10_000) {
        let g = random_graph(seed, 20, 3, 80);
        let a = build_views(&g, None, seed).unwrap();
        let b = build_views(&g, None, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.fan_out(), neighbor_budget(&g).unwrap());
    }
}
