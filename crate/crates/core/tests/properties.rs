mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regionedit::attention_mask::{BitMatrix, MaskFileError};
use regionedit::bench_eval::{self, BenchConfig, ReferringType, ScoreRecord, TaskType};
use regionedit::plan_format::{inspect_plan, PlanParseReport};
use regionedit::region_grid::ImageGeometry;
use regionedit::rl_rewards::{group_advantages, stage1_reward, Stage1Config};
use regionedit::{
    build_mask, map_bbox_to_patches, parse_plan, perturb_bbox, serialize_plan, verify_mask, AttentionMask, BBox,
    ImageSize, TokenLayout,
};

fn seeded_layout(max_tokens: usize) -> impl Strategy<Value = TokenLayout> {
    any::<u64>().prop_map(move |s| common::random_layout(&mut ChaCha8Rng::seed_from_u64(s), max_tokens))
}

fn geometry_and_box() -> impl Strategy<Value = (ImageGeometry, BBox)> {
    (1u32..200, 1u32..200, 1u32..40).prop_flat_map(|(w, h, p)| {
        (0..w, 0..h).prop_flat_map(move |(x1, y1)| {
            (x1 + 1..=w, y1 + 1..=h)
                .prop_map(move |(x2, y2)| (ImageGeometry::new(w, h, p).unwrap(), BBox::new(x1, y1, x2, y2)))
        })
    })
}

fn score_record() -> impl Strategy<Value = ScoreRecord> {
    (1u8..=5, 1u8..=5, 1u8..=5, 1u8..=5, 0..7usize, 0..16usize, 1u32..4).prop_map(|(t, c, q, e, r, k, n)| ScoreRecord {
        sample_id: String::new(),
        target: t.into(),
        consistency: c.into(),
        quality: q.into(),
        effect: e.into(),
        referring_type: ReferringType::ALL[r],
        task_type: TaskType::ALL[k],
        region_count: n,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn plans_round_trip(seed in any::<u64>(), w in 1u32..2000, h in 1u32..2000) {
        let size = ImageSize::new(w, h);
        let plan = common::random_plan(&mut ChaCha8Rng::seed_from_u64(seed), size);
        let text = serialize_plan(&plan);
        prop_assert_eq!(parse_plan(&text, size).unwrap(), plan);
    }

    #[test]
    fn inspect_never_panics(text in "(<think>|</think>|<global>|</global>|<region>|</region>|\\[|\\]|\\{|\\}|\"bbox\"|\"hint\"|:|,|[0-9]|[ a-z\\n])*") {
        let report = inspect_plan(&text);
        if report.is_valid() {
            prop_assert!(report.violations.is_empty());
        }
    }

    #[test]
    fn patches_are_exactly_the_overlapping_ones((geom, bbox) in geometry_and_box()) {
        let got = map_bbox_to_patches(bbox, &geom).unwrap();
        for i in 0..geom.rows() {
            for j in 0..geom.cols() {
                let (px1, py1) = (j as u32 * geom.patch_size, i as u32 * geom.patch_size);
                let (px2, py2) = ((px1 + geom.patch_size).min(geom.width), (py1 + geom.patch_size).min(geom.height));
                let overlap = bbox.x1.max(px1) < bbox.x2.min(px2) && bbox.y1.max(py1) < bbox.y2.min(py2);
                prop_assert_eq!(got.contains(&(i, j)), overlap);
            }
        }
    }

    #[test]
    fn growing_a_box_never_loses_patches((geom, bbox) in geometry_and_box(), dx in 0u32..50, dy in 0u32..50) {
        let grown = BBox::new(bbox.x1.saturating_sub(dx), bbox.y1.saturating_sub(dy), (bbox.x2 + dx).min(geom.width), (bbox.y2 + dy).min(geom.height));
        let small = map_bbox_to_patches(bbox, &geom).unwrap();
        let big = map_bbox_to_patches(grown, &geom).unwrap();
        prop_assert!(small.is_subset(&big));
    }

    #[test]
    fn regions_and_background_cover_every_patch(layout in seeded_layout(200)) {
        let mut covered: BTreeSet<usize> = layout.background().into_iter().collect();
        let bg = covered.clone();
        for k in 1..=layout.region_count() {
            for p in layout.region_patches(k) {
                prop_assert!(!bg.contains(&p));
                covered.insert(p);
            }
        }
        prop_assert_eq!(covered.len(), layout.patch_count());
        for p in 0..layout.patch_count() {
            prop_assert_eq!(layout.image_membership(p), layout.latent_membership(p));
        }
    }

    #[test]
    fn layout_json_round_trips(layout in seeded_layout(200)) {
        prop_assert_eq!(TokenLayout::from_json(&layout.to_json()).unwrap(), layout);
    }

    #[test]
    fn masks_match_the_oracle(layout in seeded_layout(96)) {
        for rules in common::all_rulesets(&layout) {
            let mask = build_mask(&layout, rules).unwrap();
            let report = verify_mask(&layout, &mask, rules);
            prop_assert!(report.is_exact(), "{} {:?}", rules, report.first_mismatch);
            prop_assert_eq!(mask.first_empty_row(), None);
            prop_assert_eq!(AttentionMask::decode(&mask.encode()).unwrap(), mask);
        }
    }

    #[test]
    fn mask_file_round_trips(n in 0usize..40, bits in proptest::collection::vec(any::<bool>(), 1600)) {
        let mut m = BitMatrix::zeros(n);
        for u in 0..n {
            for v in 0..n {
                m.set(u, v, bits[u * 40 + v]);
            }
        }
        let bytes = m.encode(7);
        let (back, flags) = BitMatrix::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(flags, 7);
        if (n * n) % 8 != 0 {
            let mut bad = bytes.clone();
            *bad.last_mut().unwrap() |= 0x80;
            prop_assert_eq!(BitMatrix::decode(&bad).unwrap_err(), MaskFileError::Padding);
        }
    }

    #[test]
    fn perturbation_stays_within_bound((geom, bbox) in geometry_and_box(), ratio in 0.0f64..1.0, seed in any::<u64>()) {
        if let Ok(p) = perturb_bbox(bbox, ratio, &geom, seed) {
            let dx = (ratio * f64::from(bbox.width())) as i64;
            let dy = (ratio * f64::from(bbox.height())) as i64;
            for (a, b, d) in [(bbox.x1, p.x1, dx), (bbox.y1, p.y1, dy), (bbox.x2, p.x2, dx), (bbox.y2, p.y2, dy)] {
                prop_assert!((i64::from(a) - i64::from(b)).abs() <= d);
            }
            prop_assert!(p.fits(geom.size()));
            prop_assert_eq!(perturb_bbox(bbox, ratio, &geom, seed).unwrap(), p);
        }
        prop_assert_eq!(perturb_bbox(bbox, 0.0, &geom, seed).unwrap(), bbox);
    }

    #[test]
    fn stage1_is_monotone_in_reasoning_length(a in 0usize..500, b in 0usize..500, cap in 1usize..300) {
        let cfg = Stage1Config { reasoning_cap_words: cap, ..Default::default() };
        let r = |w| stage1_reward(&PlanParseReport { tag_ok: true, region_json_ok: false, reasoning_word_count: w, violations: vec![] }, &cfg).r1_total;
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(r(lo) <= r(hi));
        prop_assert!(r(hi) <= 2.0);
    }

    #[test]
    fn advantages_ignore_affine_rescaling(rewards in proptest::collection::vec(-10.0f64..10.0, 2..16), scale in 0.5f64..4.0, shift in -5.0f64..5.0) {
        let a = group_advantages(&rewards);
        let b = group_advantages(&rewards.iter().map(|r| scale * r + shift).collect::<Vec<_>>());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn aggregates_ignore_record_order(records in proptest::collection::vec(score_record(), 1..40), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let cfg = BenchConfig::default();
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (o1, o2) = (bench_eval::overall_score(&records).unwrap(), bench_eval::overall_score(&shuffled).unwrap());
        let (w1, w2) = (bench_eval::weighted_score(&records, &cfg).unwrap(), bench_eval::weighted_score(&shuffled, &cfg).unwrap());
        prop_assert!((o1 - o2).abs() < 1e-12);
        prop_assert!((w1 - w2).abs() < 1e-12);
    }

    #[test]
    fn weighted_is_bounded_and_collapses_at_full_effect(mut r in score_record()) {
        let w = r.weighted(5.0);
        prop_assert!((0.75..=5.0).contains(&w));
        prop_assert!(w <= r.overall());
        r.effect = 5.0;
        prop_assert_eq!(r.weighted(5.0), r.overall());
    }
}
