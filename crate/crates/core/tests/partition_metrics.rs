use std::collections::BTreeSet;

use loft_lab_core::convstack::{convstack_forward, ConvStackSpec, ConvStackWeights, LossKind};
use loft_lab_core::metrics::{
    filter_distance, footrule, pairwise_heatmap, prune_filters, rank_filters, weighted_footrule, RankMap,
    RankedFilterList,
};
use loft_lab_core::partition::{aggregate, filter_partition, train_local, ImageSet};
use loft_lab_core::rng::{self, domain};
use loft_lab_core::tensor::Tensor;
use proptest::prelude::*;

fn desk() -> ConvStackSpec {
    ConvStackSpec::desk(3, 6, 6, 4, LossKind::CrossEntropy)
}

fn weights(spec: &ConvStackSpec, seed: u64) -> ConvStackWeights {
    ConvStackWeights::init(spec, &mut rng::stream(seed, domain::INIT, 0, 0))
}

fn images(n: usize, seed: u64) -> ImageSet {
    let x = (0..n)
        .map(|k| {
            Tensor::from_vec(
                &[3, 6, 6],
                (0..108)
                    .map(|i| ((i as f64 + 1.7 * k as f64 + seed as f64) * 0.61).sin())
                    .collect(),
            )
            .unwrap()
        })
        .collect();
    ImageSet {
        x,
        labels: (0..n).map(|k| k % 4).collect(),
    }
}

fn ranked(order: &[usize]) -> RankedFilterList {
    RankedFilterList {
        layer: "l".into(),
        epoch: 0,
        entries: order
            .iter()
            .enumerate()
            .map(|(k, &i)| (i, (order.len() - k) as f64))
            .collect(),
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn partition_is_disjoint_complete_and_invertible(seed in 0u64..100_000, s in prop::sample::select(vec![1usize, 2, 4])) {
        let spec = desk();
        let w = weights(&spec, seed);
        let parts = filter_partition(&w, &spec, s, &mut rng::stream(seed, domain::PARTITION, 0, 0)).unwrap();
        prop_assert_eq!(parts.len(), s);
        for (b, blk) in spec.blocks.iter().enumerate() {
            if blk.sensitive {
                for (sub, sw) in &parts {
                    prop_assert!(sub.kept[b].is_none());
                    prop_assert_eq!(&sw.layers[2 * b], &w.layers[2 * b]);
                    prop_assert_eq!(&sw.layers[2 * b + 1], &w.layers[2 * b + 1]);
                }
                continue;
            }
            let mut seen = BTreeSet::new();
            for (sub, sw) in &parts {
                let kept = sub.kept[b].as_ref().unwrap();
                prop_assert_eq!(kept.len(), blk.mid / s);
                prop_assert_eq!(sw.layers[2 * b].shape(), &[blk.mid / s, blk.c_in, 3, 3][..]);
                prop_assert_eq!(sw.layers[2 * b + 1].shape(), &[blk.out, blk.mid / s, 3, 3][..]);
                for &k in kept {
                    prop_assert!(seen.insert(k));
                }
            }
            prop_assert_eq!(seen, (0..blk.mid).collect::<BTreeSet<_>>());
        }
        let back = aggregate(&w, &spec, &parts).unwrap();
        prop_assert!(back.max_abs_diff(&w).unwrap() <= 1e-12);
    }

    #[test]
    fn training_one_worker_changes_only_its_rows(seed in 0u64..100_000) {
        let spec = ConvStackSpec::from_channels(&[3, 4, 4, 8, 4], &[], 6, 6, 4, LossKind::Mse).unwrap();
        let w = weights(&spec, seed);
        let mut parts = filter_partition(&w, &spec, 2, &mut rng::stream(seed, domain::PARTITION, 0, 0)).unwrap();
        let data = images(8, seed);
        let (sub_spec, sub_w) = parts[1].clone();
        let (trained, _) = train_local(&sub_w, &sub_spec.stack, &data, 4, 2, 0.05, &mut rng::stream(seed, domain::BATCHES, 0, 1), 1).unwrap();
        let shared_before = sub_w.head.clone();
        parts[1].1 = trained;
        let out = aggregate(&w, &spec, &parts).unwrap();
        let kept0 = parts[0].0.kept[1].clone().unwrap();
        for &k in &kept0 {
            prop_assert_eq!(out.layers[2].row(k), w.layers[2].row(k));
        }
        // Shared head is the mean of an untouched and a trained copy.
        let mean: Vec<f64> = shared_before.data().iter().zip(parts[1].1.head.data()).map(|(a, b)| (a + b) / 2.0).collect();
        for (a, b) in out.head.data().iter().zip(&mean) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn filter_distance_is_nonnegative_and_zero_on_self(perm in Just((0..8).collect::<Vec<usize>>()).prop_shuffle()) {
        let a = ranked(&perm);
        prop_assert_eq!(filter_distance(&a, &a).unwrap(), 0.0);
        let b = ranked(&(0..8).collect::<Vec<_>>());
        let d = filter_distance(&a, &b).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d == 0.0, perm == (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn pruning_is_scale_invariant(seed in 0u64..100_000, c in 0.01f64..100.0, ratio in 0.0f64..0.9) {
        let spec = ConvStackSpec::from_channels(&[3, 8, 8, 10, 8], &[], 6, 6, 4, LossKind::CrossEntropy).unwrap();
        let w = weights(&spec, seed);
        let mut scaled = w.clone();
        scaled.layers[2] = scaled.layers[2].scale(c);
        prop_assert_eq!(prune_filters(&w, &spec, ratio).unwrap(), prune_filters(&scaled, &spec, ratio).unwrap());
    }

    #[test]
    fn pruned_norms_never_exceed_kept(seed in 0u64..100_000, ratio in 0.0f64..0.95) {
        let spec = ConvStackSpec::from_channels(&[3, 8, 8, 10, 8], &[], 6, 6, 4, LossKind::CrossEntropy).unwrap();
        let w = weights(&spec, seed);
        let mask = prune_filters(&w, &spec, ratio).unwrap();
        let kept = mask.kept[1].as_ref().unwrap();
        let ranking = rank_filters(&w.layers[2], "x", 0);
        let norm = |i: usize| ranking.entries.iter().find(|e| e.0 == i).unwrap().1;
        let min_kept = kept.iter().map(|&i| norm(i)).fold(f64::INFINITY, f64::min);
        for i in (0..10).filter(|i| !kept.contains(i)) {
            prop_assert!(norm(i) <= min_kept);
        }
        prop_assert_eq!(kept.len(), 10 - (ratio * 10.0 + 1e-9).floor() as usize);
    }

    #[test]
    fn subnetwork_matches_zeroed_filters(seed in 0u64..100_000) {
        let spec = ConvStackSpec::from_channels(&[3, 4, 4, 8, 4], &[], 6, 6, 4, LossKind::CrossEntropy).unwrap();
        let w = weights(&spec, seed);
        let parts = filter_partition(&w, &spec, 2, &mut rng::stream(seed, domain::PARTITION, 0, 0)).unwrap();
        let (sub, sw) = &parts[0];
        let kept = sub.kept[1].as_ref().unwrap();
        let mut masked = w.clone();
        for r in 0..8 {
            if !kept.contains(&r) {
                masked.layers[2].row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let batch = images(3, seed).x;
        let (a, _) = convstack_forward(sw, &sub.stack, &batch).unwrap();
        let (b, _) = convstack_forward(&masked, &spec, &batch).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (x, y) in ra.iter().zip(rb) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn unit_weights_reduce_to_footrule_on_all_permutations() {
    let perms = permutations(6);
    assert_eq!(perms.len(), 720);
    for p in perms {
        let sigma = RankMap::from_permutation(&p);
        assert_eq!(weighted_footrule(&sigma, &[1.0; 6]).unwrap(), footrule(&sigma).unwrap());
    }
}

#[test]
fn reversal_footrule_closed_form() {
    for n in 1..12usize {
        let rev: Vec<usize> = (0..n).rev().collect();
        assert_eq!(footrule(&RankMap::from_permutation(&rev)).unwrap(), (n * n / 2) as f64);
    }
}

#[test]
fn converged_tail_gives_zero_block() {
    let snaps: Vec<RankedFilterList> = [
        vec![3, 2, 1, 0],
        vec![1, 3, 0, 2],
        vec![0, 1, 2, 3],
        vec![0, 1, 2, 3],
        vec![0, 1, 2, 3],
    ]
    .iter()
    .map(|o| ranked(o))
    .collect();
    let h = pairwise_heatmap(&snaps).unwrap();
    for i in 2..5 {
        for j in 2..5 {
            assert_eq!(h.data()[i * 5 + j], 0.0);
        }
    }
    assert!(h.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn partition_uniformity() {
    let spec = ConvStackSpec::from_channels(&[3, 4, 4, 8, 4], &[], 6, 6, 4, LossKind::Mse).unwrap();
    let w = weights(&spec, 0);
    let rounds = 1000;
    let mut hits = [0usize; 8];
    for t in 0..rounds {
        let parts = filter_partition(&w, &spec, 2, &mut rng::stream(9, domain::PARTITION, t, 0)).unwrap();
        for &k in parts[0].0.kept[1].as_ref().unwrap() {
            hits[k] += 1;
        }
    }
    let sd = (0.25 / rounds as f64).sqrt();
    for h in hits {
        assert!((h as f64 / rounds as f64 - 0.5).abs() < 3.0 * sd, "{hits:?}");
    }
}
