use std::collections::BTreeSet;

use proptest::prelude::*;
use trademark_attention::features::{l2_normalize, mac, read_store, rmac_regions, spoc, write_store, FeatureMap};
use trademark_attention::mask::PixelMask;
use trademark_attention::retrieval::{average_precision_at_k, nar, query, similarity, DescriptorIndex};
use trademark_attention::segmenter::{focal_loss, pixel_f1};
use trademark_attention::soft_attention::{camsa_weights, ssa_weights, AttentionMap, CamsaParams};

fn vectors(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec(-4.0f32..4.0, dim), n)
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("item-{i:03}")).collect()
}

/// A ranking of `n` ids with a random relevant subset.
fn ranking_and_relevant(max: usize) -> impl Strategy<Value = (Vec<String>, BTreeSet<String>)> {
    (2..max).prop_flat_map(|n| {
        (
            Just(ids(n)).prop_shuffle(),
            prop::collection::btree_set(0..n, 1..n),
        )
            .prop_map(|(ranked, picks)| {
                let relevant = picks.into_iter().map(|i| format!("item-{i:03}")).collect();
                (ranked, relevant)
            })
    })
}

proptest! {
    #[test]
    fn similarity_is_symmetric_and_maximal_on_self(v in vectors(2, 12)) {
        let ab = similarity(&v[0], &v[1]).unwrap();
        let ba = similarity(&v[1], &v[0]).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((similarity(&v[0], &v[0]).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(ab <= 1.0);
    }

    #[test]
    fn l2_normalize_gives_unit_or_zero(v in prop::collection::vec(-100.0f32..100.0, 1..40)) {
        let u = l2_normalize(&v);
        let norm: f64 = u.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
        if v.iter().all(|&x| x == 0.0) {
            prop_assert_eq!(norm, 0.0);
        } else {
            prop_assert!((norm - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn ap_and_nar_stay_in_unit_interval((ranked, relevant) in ranking_and_relevant(40), k in 1usize..50) {
        let ap = average_precision_at_k(ranked.iter().map(String::as_str), &relevant, k).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
        let r = nar(ranked.iter().map(String::as_str), &relevant, ranked.len()).unwrap();
        prop_assert!((-1e-12..=1.0).contains(&r));
    }

    #[test]
    fn relevant_first_is_perfect((ranked, relevant) in ranking_and_relevant(40), k in 1usize..50) {
        let mut order: Vec<&str> = ranked.iter().map(String::as_str).filter(|id| relevant.contains(*id)).collect();
        order.extend(ranked.iter().map(String::as_str).filter(|id| !relevant.contains(*id)));
        prop_assert!((average_precision_at_k(order.iter().copied(), &relevant, k).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(nar(order.iter().copied(), &relevant, order.len()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn nar_ignores_order_among_relevant_items((ranked, relevant) in ranking_and_relevant(30)) {
        let before = nar(ranked.iter().map(String::as_str), &relevant, ranked.len()).unwrap();
        // swap every pair of relevant positions' ids: the rank multiset is unchanged
        let mut swapped = ranked.clone();
        let pos: Vec<usize> = (0..ranked.len()).filter(|&i| relevant.contains(&ranked[i])).collect();
        let mut rev = pos.clone();
        rev.reverse();
        for (&a, &b) in pos.iter().zip(&rev) {
            swapped[a] = ranked[b].clone();
        }
        let after = nar(swapped.iter().map(String::as_str), &relevant, ranked.len()).unwrap();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn pessimistic_ties_never_beat_optimistic(levels in prop::collection::vec(0u8..4, 4..30), picks in prop::collection::btree_set(0usize..30, 1..10), k in 1usize..30) {
        let n = levels.len();
        let names = ids(n);
        let relevant: BTreeSet<String> = picks.into_iter().filter(|&i| i < n).map(|i| names[i].clone()).collect();
        prop_assume!(!relevant.is_empty());
        let values: Vec<f32> = levels.iter().map(|&l| f32::from(l)).collect();
        let index = DescriptorIndex::new("MAC", 1, names.clone(), values).unwrap();
        let pessimistic = query(&index, &[0.0], n, Some(&relevant), None).unwrap();
        // optimistic order: nearest first (query sits at 0), relevant items first among ties
        let mut optimistic: Vec<(f64, bool, String)> = names
            .iter()
            .zip(&levels)
            .map(|(id, &l)| (f64::from(l), !relevant.contains(id), id.clone()))
            .collect();
        optimistic.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let ap_pes = average_precision_at_k(pessimistic.ids(), &relevant, k).unwrap();
        let ap_opt = average_precision_at_k(optimistic.iter().map(|t| t.2.as_str()), &relevant, k).unwrap();
        prop_assert!(ap_pes <= ap_opt + 1e-12);
    }

    #[test]
    fn query_is_sorted_and_excludes(v in vectors(12, 6), k in 1usize..15) {
        let names = ids(v.len());
        let index = DescriptorIndex::new("SPOC", 6, names.clone(), v.concat()).unwrap();
        let r = query(&index, &v[3], k, None, Some(&names[3])).unwrap();
        prop_assert_eq!(r.entries.len(), k.min(v.len() - 1));
        prop_assert!(r.entries.iter().all(|(id, _)| id != &names[3]));
        prop_assert!(r.entries.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn pixel_f1_is_symmetric_and_bounded(a in prop::collection::vec(any::<bool>(), 48), b in prop::collection::vec(any::<bool>(), 48)) {
        let to_mask = |bits: &[bool]| PixelMask::from_fn(8, 6, |x, y| bits[(y * 8 + x) as usize]);
        let (ma, mb) = (to_mask(&a), to_mask(&b));
        let ab = pixel_f1(&ma, &mb).unwrap();
        prop_assert_eq!(ab, pixel_f1(&mb, &ma).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(pixel_f1(&ma, &ma).unwrap(), 1.0);
    }

    #[test]
    fn focal_loss_falls_with_confidence(p in 0.01f64..0.98, gamma in 0.0f64..5.0, alpha in 0.05f64..1.0) {
        let lo = focal_loss(p, gamma, alpha).unwrap();
        let hi = focal_loss(p + 0.01, gamma, alpha).unwrap();
        prop_assert!(lo >= 0.0 && hi < lo);
        // gamma only ever down-weights
        prop_assert!(lo <= focal_loss(p, 0.0, alpha).unwrap() + 1e-15);
    }

    #[test]
    fn focal_loss_derivative_matches_finite_difference(p in 0.05f64..0.95, gamma in 0.0f64..4.0, alpha in 0.1f64..1.0) {
        // d/dp of -a (1-p)^g ln p
        let analytic = alpha * (gamma * (1.0 - p).powf(gamma - 1.0) * p.ln() - (1.0 - p).powf(gamma) / p);
        let h = 1e-6;
        let numeric = (focal_loss(p + h, gamma, alpha).unwrap() - focal_loss(p - h, gamma, alpha).unwrap()) / (2.0 * h);
        prop_assert!((analytic - numeric).abs() < 1e-5 * analytic.abs().max(1.0));
    }

    #[test]
    fn ssa_weights_take_two_values(bits in prop::collection::vec(any::<bool>(), 30), b in 0.0f32..2.0) {
        let mask = PixelMask::from_fn(6, 5, |x, y| bits[(y * 6 + x) as usize]);
        let att = ssa_weights(&mask, b).unwrap();
        for (w, &text) in att.values().iter().zip(&bits) {
            prop_assert_eq!(*w, if text { b } else { 1.0 + b });
        }
    }

    #[test]
    fn camsa_amplifies_above_tau_and_damps_below(values in prop::collection::vec(0.0f32..1.0, 20), beta in 1.0f32..4.0) {
        let cam = AttentionMap::new(5, 4, values.clone()).unwrap();
        let params = CamsaParams { beta, ..CamsaParams::default() };
        let out = camsa_weights(&cam, &params).unwrap();
        for (&m, &w) in values.iter().zip(out.values()) {
            if m > params.tau { prop_assert!(w >= m) } else { prop_assert!(w <= m) }
        }
    }

    #[test]
    fn mac_bounds_spoc_mean(v in prop::collection::vec(0.0f32..10.0, 3 * 4 * 5)) {
        let fmap = FeatureMap::new(3, 4, 5, v).unwrap();
        let m = mac(&fmap);
        let s = spoc(&fmap);
        for k in 0..3 {
            prop_assert!(s[k] / 20.0 <= m[k] + 1e-4);
        }
    }

    #[test]
    fn rmac_regions_fit_the_grid(h in 1usize..25, w in 1usize..25, scales in 1usize..5) {
        let regions = rmac_regions(h, w, scales);
        prop_assert!(!regions.is_empty());
        for r in &regions {
            prop_assert!(r.x0 < r.x1 && r.y0 < r.y1);
            prop_assert!(r.x1 as usize <= w && r.y1 as usize <= h);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn store_round_trips(v in vectors(7, 5)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let names = ids(7);
        write_store(&path, "ATRHA_MAC", 5, &names, &v.concat()).unwrap();
        let back = read_store(&path).unwrap();
        prop_assert_eq!(back.tag, "ATRHA_MAC");
        prop_assert_eq!(back.ids, names);
        prop_assert_eq!(back.values, v.concat());
    }
}
