use std::collections::HashSet;
use std::sync::Arc;

use cone_shap::concepts::{kmeans, ConceptModel, SegmentRef};
use cone_shap::explain::{class_concept_scores, instance_concept_importance, saliency, LevelScores, SegmentScoreTable};
use cone_shap::game::{EdgeGame, TableGame};
use cone_shap::metrics::{complexity, pearson};
use cone_shap::models::{build_game, fill_pixels, mask_with_fill, MaskingPolicy};
use cone_shap::segmentation::{multi_resolution_segment, Granularity, SegmentationConfig, SegmentationSet};
use cone_shap::shapley::{
    cone_shap, cone_shap_all, cone_shap_eval_bound, exact_shapley, mc_shapley, neighbor_shapley_all, occlusion_all,
    Method,
};
use cone_shap::toy;
use cone_shap::{Ablation, Coalition, EdgeKind, Game, ImageTensor, NeighborGraph, PlayerId, SamplerConfig};
use proptest::prelude::*;

fn table_game(n: usize, values: &[f64]) -> Game {
    let table = (0..1usize << n)
        .map(|m| (Coalition::from_mask(m as u64), if m == 0 { 0.0 } else { values[m % values.len()] }))
        .collect();
    Game::new(TableGame { player_count: n, table })
}

fn graph_from(n: usize, bits: &[bool]) -> NeighborGraph {
    let mut g = NeighborGraph::new(n);
    let mut it = bits.iter().cycle();
    for a in 0..n {
        for b in a + 1..n {
            if *it.next().unwrap() {
                g.add_edge(a, b, EdgeKind::Physical);
            }
        }
    }
    g
}

fn image_from(side: usize, seed: &[u8]) -> ImageTensor {
    ImageTensor::from_fn(side, side, |y, x| {
        let v = seed[(y / 4 * 7 + x / 4) % seed.len()];
        [v, v.wrapping_mul(3), 255 - v]
    })
    .unwrap()
}

fn segment(image: &ImageTensor) -> SegmentationSet {
    let cfg = SegmentationConfig {
        targets: [4, 8, 12],
        ..SegmentationConfig::default()
    };
    multi_resolution_segment(image, "img", &cfg).unwrap()
}

fn table_for(set: &SegmentationSet, values: &[f64]) -> SegmentScoreTable {
    let mut it = values.iter().cycle();
    SegmentScoreTable {
        image_id: set.image_id.clone(),
        class_k: 0,
        method: Method::ConeShap,
        k: 5,
        draws: 1,
        seed: 0,
        ablation: Ablation::None,
        levels: set
            .levels
            .iter()
            .map(|l| LevelScores {
                level: l.level,
                values: l.segments.iter().map(|_| *it.next().unwrap()).collect(),
                evals_used: 0,
            })
            .collect(),
    }
}

/// Concept model assigning segment `s` of every level to concept `s % m`.
fn round_robin_concepts(set: &SegmentationSet, m: usize) -> ConceptModel {
    let mut refs = Vec::new();
    let mut points = Vec::new();
    for l in &set.levels {
        for s in 0..l.segments.len() {
            refs.push(SegmentRef {
                image_id: set.image_id.clone(),
                level: l.level,
                segment_id: s,
            });
            points.push(vec![(s % m) as f64 * 10.0]);
        }
    }
    let clustering = kmeans(&points, m, 0, 50).unwrap();
    ConceptModel::from_clustering(0, refs, &clustering, &points, 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cache_matches_uncached_and_counts_distinct(
        values in prop::collection::vec(-5.0f64..5.0, 8..64),
        queries in prop::collection::vec(0u64..64, 1..80),
    ) {
        let game = table_game(6, &values);
        let mut seen = HashSet::new();
        for q in &queries {
            let s = Coalition::from_mask(*q);
            prop_assert_eq!(game.evaluate(&s).unwrap(), game.evaluate_uncached(&s).unwrap());
            seen.insert(*q);
        }
        prop_assert_eq!(game.evals(), seen.len());
    }

    #[test]
    fn efficiency_and_symmetry(values in prop::collection::vec(-3.0f64..3.0, 16..128), n in 2usize..7) {
        // a game that only depends on |S| treats every player alike
        let by_size: Vec<f64> = (0..=n).map(|s| if s == 0 { 0.0 } else { values[s % values.len()] }).collect();
        let sym = Game::from_fn(n, move |s: &Coalition| by_size[s.len()]);
        let phi = exact_shapley(&sym).unwrap().values;
        for p in &phi {
            prop_assert!((p - phi[0]).abs() < 1e-9);
        }
        let game = table_game(n, &values);
        let phi = exact_shapley(&game).unwrap().values;
        let full = game.evaluate(&Coalition::full(n)).unwrap();
        prop_assert!((phi.iter().sum::<f64>() - full).abs() < 1e-9);
    }

    #[test]
    fn doubling_a_monotone_game_never_lowers_values(weights in prop::collection::vec(0.0f64..2.0, 2..7)) {
        let n = weights.len();
        let w = weights.clone();
        // supermodular with nonnegative marginals
        let u = move |s: &Coalition| {
            let x: f64 = s.members().map(|i| w[i]).sum();
            x + 0.5 * x * x
        };
        let u2 = u.clone();
        let single = exact_shapley(&Game::from_fn(n, u)).unwrap().values;
        let double = exact_shapley(&Game::from_fn(n, move |s: &Coalition| 2.0 * u2(s))).unwrap().values;
        for (a, b) in single.iter().zip(&double) {
            prop_assert!(*b >= *a - 1e-12);
        }
    }

    #[test]
    fn neighbor_value_is_exact_on_edge_games(n in 3usize..10, bits in prop::collection::vec(any::<bool>(), 1..45)) {
        let graph = graph_from(n, &bits);
        let game = Game::new(EdgeGame::from_graph(&graph));
        let exact = exact_shapley(&game).unwrap().values;
        let local = neighbor_shapley_all(&game, &graph).unwrap().values;
        for (a, b) in exact.iter().zip(&local) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cone_shap_is_seeded_and_within_budget(
        n in 3usize..9,
        bits in prop::collection::vec(any::<bool>(), 1..36),
        values in prop::collection::vec(-2.0f64..2.0, 8..64),
        k in 1usize..5,
        m in 1usize..4,
        seed in any::<u64>(),
    ) {
        let graph = graph_from(n, &bits);
        let game = table_game(n, &values);
        let cfg = SamplerConfig::new(k, m, seed);
        let a = cone_shap_all(&game, &graph, &cfg).unwrap().values;
        game.clear_cache();
        let b = cone_shap_all(&game, &graph, &cfg).unwrap().values;
        prop_assert_eq!(&a, &b);
        for i in 0..n {
            game.clear_cache();
            let v = cone_shap(&game, &graph, PlayerId(i), &cfg).unwrap();
            prop_assert_eq!(v, a[i]);
            prop_assert!(game.evals() <= cone_shap_eval_bound(k, m));
        }
    }

    #[test]
    fn additive_games_agree_across_estimators(weights in prop::collection::vec(-3.0f64..3.0, 2..9), k in 1usize..6) {
        let n = weights.len();
        let w = weights.clone();
        let game = Game::from_fn(n, move |s: &Coalition| s.members().map(|i| w[i]).sum());
        let graph = NeighborGraph::ring(n.max(3)).ablate(Ablation::None);
        let graph = if n < 3 { NeighborGraph::complete(n) } else { graph };
        let methods = [
            exact_shapley(&game).unwrap().values,
            neighbor_shapley_all(&game, &graph).unwrap().values,
            cone_shap_all(&game, &graph, &SamplerConfig::new(k, 1, 3)).unwrap().values,
            mc_shapley(&game, 3, 3).unwrap().values,
            occlusion_all(&game).unwrap().values,
        ];
        for values in &methods {
            for (v, w) in values.iter().zip(&weights) {
                prop_assert!((v - w).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn kmeans_inertia_never_increases(
        raw in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 6..60),
        m in 1usize..6,
        seed in any::<u64>(),
    ) {
        let c = kmeans(&raw, m, seed, 30).unwrap();
        for w in c.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
        }
        prop_assert_eq!(c.assignment.len(), raw.len());
        prop_assert!(c.assignment.iter().all(|&a| a < m));
    }

    #[test]
    fn every_segment_gets_one_concept_or_none(
        raw in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 10..50),
        m in 2usize..6,
        min_size in 1usize..6,
    ) {
        let refs: Vec<SegmentRef> = (0..raw.len())
            .map(|i| SegmentRef { image_id: format!("i{}", i % 3), level: Granularity::Small, segment_id: i })
            .collect();
        let c = kmeans(&raw, m, 1, 30).unwrap();
        let model = ConceptModel::from_clustering(0, refs.clone(), &c, &raw, min_size).unwrap();
        let mut counts = vec![0usize; model.m];
        for r in &refs {
            if let Some(k) = model.concept_of(r).unwrap() {
                counts[k] += 1;
                prop_assert!(!model.dropped.contains(&k));
            }
        }
        prop_assert_eq!(counts, model.member_counts.clone());
    }

    #[test]
    fn graph_union_is_symmetric_without_self_loops(
        n in 2usize..12,
        a in prop::collection::vec(any::<bool>(), 1..66),
        b in prop::collection::vec(any::<bool>(), 1..66),
    ) {
        let physical = graph_from(n, &a);
        let mut semantic = NeighborGraph::new(n);
        for (x, y, _) in graph_from(n, &b).edges() {
            semantic.add_edge(x, y, EdgeKind::Semantic);
        }
        let u = physical.union(&semantic);
        prop_assert!(u.is_symmetric());
        for i in 0..n {
            prop_assert!(!u.neighbors(i).any(|j| j == i));
        }
        prop_assert!(u.edge_count() >= physical.edge_count().max(semantic.edge_count()));
        prop_assert_eq!(u.ablate(Ablation::NoSemantic).edge_count(), physical.edge_count());
        prop_assert_eq!(u.ablate(Ablation::NoPhysical).edge_count(), semantic.edge_count());
    }

    #[test]
    fn complexity_is_between_zero_and_ln_k(scores in prop::collection::vec(-1.0f64..5.0, 1..8)) {
        prop_assume!(scores.iter().any(|&s| s > 0.0));
        let xi = complexity(&scores).unwrap();
        prop_assert!(xi >= -1e-12);
        prop_assert!(xi <= (scores.len() as f64).ln() + 1e-9);
    }

    #[test]
    fn pearson_is_symmetric_and_affine_invariant(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..20),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (Ok(ab), Ok(ba)) = (pearson(&a, &b), pearson(&b, &a)) else { return Ok(()) };
        prop_assert!((ab - ba).abs() < 1e-12);
        let moved: Vec<f64> = a.iter().map(|x| scale * x + shift).collect();
        prop_assert!((pearson(&moved, &b).unwrap() - ab).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn segmentation_partitions_into_connected_segments(seed in prop::collection::vec(any::<u8>(), 4..20)) {
        let image = image_from(24, &seed);
        let set = segment(&image);
        prop_assert_eq!(set.levels.len(), 3);
        for l in &set.levels {
            prop_assert_eq!(l.segments.iter().map(|s| s.pixel_count).sum::<usize>(), 24 * 24);
            prop_assert!(l.map.segments_connected());
        }
        prop_assert_eq!(segment(&image), set);
    }

    #[test]
    fn masking_twice_equals_masking_once(seed in prop::collection::vec(any::<u8>(), 4..20), pick in any::<u64>()) {
        let image = image_from(16, &seed);
        let set = segment(&image);
        let map = &set.level(Granularity::Medium).map;
        let remove: Coalition = (0..map.segment_count()).filter(|s| pick >> (s % 64) & 1 == 1).collect();
        let fill = MaskingPolicy::MeanColor.fill_for(&image);
        let once = mask_with_fill(&image, map, &remove, fill).unwrap();
        prop_assert_eq!(mask_with_fill(&once, map, &remove, fill).unwrap(), once.clone());
        let pixels: Vec<usize> = map.segment_pixels().into_iter().enumerate()
            .filter(|(s, _)| remove.contains(*s))
            .flat_map(|(_, p)| p)
            .collect();
        prop_assert_eq!(fill_pixels(&image, pixels, fill), once);
    }

    #[test]
    fn positive_rescaling_keeps_saliency_and_rankings(
        seed in prop::collection::vec(any::<u8>(), 4..20),
        values in prop::collection::vec(-3.0f64..3.0, 4..40),
        factor in 0.01f64..100.0,
    ) {
        let set = segment(&image_from(24, &seed));
        let table = table_for(&set, &values);
        let scaled = table.scaled(factor);
        let a = saliency(&table, &set).unwrap();
        let b = saliency(&scaled, &set).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let model = round_robin_concepts(&set, 3);
        let rank = |t: &SegmentScoreTable| {
            class_concept_scores(std::slice::from_ref(t), &model).unwrap()
                .into_iter().map(|s| (s.concept, s.rank)).collect::<Vec<_>>()
        };
        prop_assert_eq!(rank(&table), rank(&scaled));
    }

    #[test]
    fn instance_importances_sum_to_assigned_values(
        seed in prop::collection::vec(any::<u8>(), 4..20),
        values in prop::collection::vec(-3.0f64..3.0, 4..40),
        m in 2usize..5,
    ) {
        let set = segment(&image_from(24, &seed));
        let table = table_for(&set, &values);
        let model = round_robin_concepts(&set, m);
        let importance = instance_concept_importance(&table, &model, false).unwrap();
        let assigned: f64 = table.rows()
            .filter(|(r, _)| model.concept_of(r).unwrap().is_some())
            .map(|(_, v)| v)
            .sum();
        let total: f64 = importance.concepts.iter().map(|c| c.value).sum();
        prop_assert!((total - assigned).abs() < 1e-9);
    }

    #[test]
    fn linear_image_games_are_additive(seed in prop::collection::vec(any::<u8>(), 4..20), class_k in 0usize..5) {
        let image = image_from(16, &seed);
        let set = segment(&image);
        let map = &set.level(Granularity::Medium).map;
        let model = Arc::new(toy::hue_linear(5));
        let game = build_game(model, &image, map, class_k, MaskingPolicy::MeanColor).unwrap();
        let n = game.player_count();
        let singles: Vec<f64> = (0..n).map(|i| game.evaluate(&Coalition::singleton(i)).unwrap()).collect();
        let full = game.evaluate(&Coalition::full(n)).unwrap();
        prop_assert!((singles.iter().sum::<f64>() - full).abs() < 1e-9);
    }
}
