use std::f64::consts::FRAC_PI_2;

use capt_numerics::{cosine_similarity, top_k};
use capt_world::*;

fn spec(seed: u64) -> WorldSpec {
    WorldSpec {
        seed,
        ..WorldSpec::default()
    }
}

/// (pair confusion rate, max non-pair confusion rate) over all samples of
/// paired categories, baseline classifier over all categories.
fn confusion_rates(w: &World) -> (f64, f64) {
    let pred = w.baseline_predictions().unwrap();
    let (mut n, mut to_partner, mut elsewhere) = (0, 0, 0);
    for s in &w.samples {
        if let Some(p) = w.partner(s.label) {
            n += 1;
            if pred[s.id] == p {
                to_partner += 1;
            } else if pred[s.id] != s.label {
                elsewhere += 1;
            }
        }
    }
    (to_partner as f64 / n as f64, elsewhere as f64 / n as f64)
}

#[test]
fn same_seed_is_bitwise_identical() {
    let a = generate_world(&spec(7)).unwrap();
    let b = generate_world(&spec(7)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_bytes(), b.to_bytes());
    let c = generate_world(&spec(8)).unwrap();
    assert_ne!(a.to_bytes(), c.to_bytes());
}

#[test]
fn prototype_geometry() {
    for seed in 0..5 {
        let w = generate_world(&spec(seed)).unwrap();
        let nc = w.num_categories();
        for i in 0..nc {
            for j in i + 1..nc {
                let c = cosine_similarity(w.prototypes.row(i), w.prototypes.row(j)).unwrap();
                let paired = w.partner(i) == Some(j);
                if paired {
                    assert!((c - w.spec.pair_angle.cos()).abs() < 1e-9);
                } else {
                    assert!(c.abs() < 0.15, "{i},{j}: {c}");
                }
            }
        }
    }
}

#[test]
fn split_is_a_disjoint_cover_and_keeps_pairs_together() {
    for seed in 0..10 {
        let w = generate_world(&spec(seed)).unwrap();
        let mut all: Vec<usize> = w.base.iter().chain(&w.novel).copied().collect();
        all.sort();
        assert_eq!(all, (0..32).collect::<Vec<_>>());
        assert_eq!(w.novel.len(), 8);
        for &(a, b) in &w.pairs {
            assert_eq!(w.is_base(a), w.is_base(b));
        }
    }
}

#[test]
fn encoders_are_frozen_and_normalized() {
    let w = generate_world(&spec(1)).unwrap();
    let (t1, f1) = w.encode_image(17).unwrap();
    let (t2, f2) = w.encode_image(17).unwrap();
    assert_eq!(t1, t2);
    assert_eq!(f1, f2);
    assert_eq!(t1.shape(), &[17, 32]);
    assert!((capt_numerics::l2_norm(&f1) - 1.0).abs() < 1e-12);

    let a = w.encode_text("a photo of a terrier").unwrap();
    assert_eq!(a, w.encode_text("a photo of a terrier").unwrap());
    assert!((capt_numerics::l2_norm(&a) - 1.0).abs() < 1e-12);
    assert!(matches!(w.encode_text(""), Err(WorldError::Parameter(_))));
    assert!(matches!(w.encode_text(" ,; "), Err(WorldError::Parameter(_))));
}

#[test]
fn category_text_features_are_distinct() {
    for seed in 0..5 {
        let w = generate_world(&spec(seed)).unwrap();
        let t = w.category_text_features().unwrap();
        for i in 0..32 {
            for j in i + 1..32 {
                let c = cosine_similarity(t.row(i), t.row(j)).unwrap();
                assert!(c.abs() < 0.9, "seed {seed} {i},{j}: {c}");
            }
        }
    }
}

#[test]
fn baseline_distribution_sums_to_one() {
    let w = generate_world(&spec(2)).unwrap();
    for id in [0, 99, 1000, 1599] {
        let p = w.baseline_classify(id, 0.07).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn sample_on_prototype_is_classified_as_its_category() {
    let w = generate_world(&spec(3)).unwrap();
    let text = w.category_text_features().unwrap();
    for c in 0..32 {
        let enc = w.encode_tokens(&capt_numerics::Tensor::from_rows(&[w.prototypes.row(c).to_vec()]).unwrap());
        let f = w.project(enc.row(0));
        let p = w.classify_feature(&f, &text, 0.07).unwrap();
        assert_eq!(capt_numerics::argmax(&p), c);
    }
}

#[test]
fn planted_confusion_rate_and_concentration() {
    let mut rates = Vec::new();
    for seed in 0..5 {
        let w = generate_world(&spec(seed)).unwrap();
        let (pair, other) = confusion_rates(&w);
        println!("seed {seed}: pair confusion {pair:.3}, other {other:.4}");
        rates.push(pair);
        assert!(other * 5.0 < pair);
    }
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    assert!(mean >= 0.40, "mean pair confusion {mean}");
}

#[test]
fn confused_pair_samples_rank_true_and_partner_on_top() {
    let mut hits = 0;
    let mut total = 0;
    for seed in 0..5 {
        let w = generate_world(&spec(seed)).unwrap();
        let text = w.category_text_features().unwrap();
        for s in &w.samples {
            let Some(p) = w.partner(s.label) else { continue };
            let (_, f) = w.encode_image(s.id).unwrap();
            let conf = w.classify_feature(&f, &text, 0.07).unwrap();
            let top = top_k(&conf, 2).unwrap();
            if top[0].0 == s.label {
                continue;
            }
            total += 1;
            let set = [top[0].0, top[1].0];
            if set.contains(&p) && set.contains(&s.label) {
                hits += 1;
            }
        }
    }
    assert!(total > 0);
    assert!(hits as f64 >= 0.8 * total as f64, "{hits}/{total}");
}

#[test]
fn orthogonal_pairs_nearly_remove_confusion() {
    let mut right = 0.0;
    let mut planted = 0.0;
    for seed in 0..5 {
        let w = generate_world(&WorldSpec { pair_angle: FRAC_PI_2, ..spec(seed) }).unwrap();
        right += confusion_rates(&w).0;
        planted += confusion_rates(&generate_world(&spec(seed)).unwrap()).0;
    }
    let (right, planted) = (right / 5.0, planted / 5.0);
    println!("pair confusion at pi/2: {right:.4}, at 0.15: {planted:.4}");
    assert!(right < 0.1);
    assert!(right * 5.0 < planted);
}

#[test]
fn invalid_specs_are_rejected() {
    let cases = [
        WorldSpec { num_confusable_pairs: 17, ..WorldSpec::default() },
        WorldSpec { pair_angle: 0.0, ..WorldSpec::default() },
        WorldSpec { pair_angle: 2.0, ..WorldSpec::default() },
        WorldSpec { feature_dim: 16, embed_dim: 16, ..WorldSpec::default() },
        WorldSpec { base_fraction: 0.0, ..WorldSpec::default() },
        WorldSpec { samples_per_category: 1, ..WorldSpec::default() },
        WorldSpec { patch_rows: 0, ..WorldSpec::default() },
    ];
    for c in cases {
        assert!(matches!(generate_world(&c), Err(WorldError::Config(_))), "{c:?}");
    }
}

#[test]
fn file_round_trip_is_bitwise() {
    let dir = std::env::temp_dir().join(format!("capt-world-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("w.bin");
    let w = generate_world(&spec(4)).unwrap();
    w.save(&path).unwrap();
    let back = World::load(&path).unwrap();
    assert_eq!(back, w);
    assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
    let side: WorldSpec = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
    assert_eq!(side, w.spec);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn corrupt_files_give_format_errors() {
    let w = generate_world(&WorldSpec { samples_per_category: 4, ..spec(5) }).unwrap();
    let bytes = w.to_bytes();
    for cut in [0, 3, 8, 11, 50, bytes.len() / 2, bytes.len() - 1] {
        let e = World::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(e.offset <= cut, "{e}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(World::from_bytes(&bad).unwrap_err().offset, 0);
    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(World::from_bytes(&bad).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(World::from_bytes(&extra).is_err());
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

    #[test]
    fn small_worlds_are_consistent(
        seed in 0u64..10_000,
        pairs in 0usize..4,
        angle in 0.05f64..FRAC_PI_2,
        base_fraction in 0.3f64..1.0,
    ) {
        let spec = WorldSpec {
            num_categories: 8,
            num_confusable_pairs: pairs,
            pair_angle: angle,
            samples_per_category: 4,
            base_fraction,
            feature_dim: 8,
            embed_dim: 8,
            patch_rows: 2,
            patch_cols: 2,
            text_hash_dim: 16,
            seed,
            ..WorldSpec::default()
        };
        let w = generate_world(&spec).unwrap();
        proptest::prop_assert_eq!(w.pairs.len(), pairs);
        for &(a, b) in &w.pairs {
            proptest::prop_assert_eq!(w.partner(a), Some(b));
            proptest::prop_assert_eq!(w.partner(b), Some(a));
            proptest::prop_assert_eq!(w.is_base(a), w.is_base(b));
        }
        proptest::prop_assert_eq!(w.base.len() + w.novel.len(), 8);
        for s in &w.samples {
            let (_, f) = w.encode_image(s.id).unwrap();
            let n: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            proptest::prop_assert!((n - 1.0).abs() < 1e-12);
        }
        proptest::prop_assert_eq!(World::from_bytes(&w.to_bytes()).unwrap(), w);
    }
}
