use capt_bank::{build_from_world, BaselineClassifier, ConfusionBank};
use capt_numerics::{cosine_similarity, l2_norm};
use capt_semantic::*;
use capt_world::{generate_world, World, WorldSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn world_and_bank(seed: u64) -> (World, ConfusionBank) {
    let w = generate_world(&WorldSpec { seed, ..WorldSpec::default() }).unwrap();
    let clf = BaselineClassifier::new(&w, Some(w.base.clone())).unwrap();
    let ids: Vec<usize> = w.train_ids().filter(|&i| w.is_base(w.samples[i].label)).collect();
    let bank = build_from_world(&w, &clf, &ids, 0.07, seed, "0").unwrap();
    (w, bank)
}

#[test]
fn pseudo_gt_examples() {
    assert_eq!(pseudo_gt(&[0.2, 0.5, 0.3]).unwrap(), 1);
    assert_eq!(pseudo_gt(&[0.5, 0.5]).unwrap(), 0);
    assert!(matches!(pseudo_gt(&[0.5, f64::NAN]), Err(SemanticError::Input(_))));
    assert!(matches!(pseudo_gt(&[f64::INFINITY, 0.1]), Err(SemanticError::Input(_))));
}

#[test]
fn pseudo_gt_matches_a_max_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in 0..10_000 {
        let n = 2 + t % 40;
        let mut c = random_dist(&mut rng, n);
        if t % 7 == 0 {
            // force a tie
            let j = rng.random_range(1..n);
            c[j] = c[0];
        }
        let mut best = 0;
        for i in 1..n {
            if c[i] > c[best] {
                best = i;
            }
        }
        assert_eq!(pseudo_gt(&c).unwrap(), best);
    }
}

#[test]
fn confusion_score_hand_case_is_exact() {
    let s = confusion_score(&[0.5, 0.3, 0.2], &[30, 10, 0]).unwrap();
    assert_eq!(s, vec![0.875, 0.375, 0.2]);
}

#[test]
fn confusion_score_edge_cases() {
    let c = [0.1, 0.6, 0.3];
    assert_eq!(confusion_score(&c, &[0, 0, 0]).unwrap(), c.to_vec());
    assert!(matches!(confusion_score(&c, &[1, -1, 0]), Err(SemanticError::Input(_))));
    assert!(matches!(confusion_score(&c, &[1, 1]), Err(SemanticError::Input(_))));
    let a = confusion_score(&c, &[3, 1, 2]).unwrap();
    let b = confusion_score(&c, &[300, 100, 200]).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn confusion_score_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in 0..10_000 {
        let n = 2 + t % 33;
        let c = random_dist(&mut rng, n);
        let counts: Vec<i64> = if t % 10 == 0 {
            vec![0; n]
        } else {
            (0..n).map(|_| if rng.random_bool(0.4) { rng.random_range(0..60) } else { 0 }).collect()
        };
        let s = confusion_score(&c, &counts).unwrap();
        let mut total = 0.0;
        for &k in &counts {
            total += k as f64;
        }
        for i in 0..n {
            let w = if total == 0.0 { 1.0 } else { 1.0 + counts[i] as f64 / total };
            assert!((s[i] - w * c[i]).abs() <= 1e-12);
        }
    }
}

#[test]
fn select_pairs_examples() {
    let p = select_pairs(&[0.2, 0.5, 0.3], 1, 5);
    assert_eq!(p, vec![(2, 0.3), (0, 0.2)]);
    let p = select_pairs(&[0.4, 0.1, 0.4, 0.1], 3, 2);
    assert_eq!(p, vec![(0, 0.4), (2, 0.4)]);
    assert!(select_pairs(&[1.0], 0, 3).is_empty());
}

#[test]
fn select_pairs_matches_sort_and_filter() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for t in 0..10_000 {
        let n = 1 + t % 20;
        // coarse values so ties are common
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
        let pg = rng.random_range(0..n);
        let c = 1 + t % 7;
        let mut oracle: Vec<(usize, f64)> = s.iter().copied().enumerate().filter(|&(i, _)| i != pg).collect();
        // stable sort keeps lower indices first among equals
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        oracle.truncate(c);
        let got = select_pairs(&s, pg, c);
        assert_eq!(got, oracle);
        assert!(got.iter().all(|&(i, _)| i != pg));
        assert_eq!(got.len(), c.min(n - 1));
    }
}

#[test]
fn template_prompts_are_deterministic_distinct_and_unit() {
    let w = generate_world(&WorldSpec { seed: 2, ..WorldSpec::default() }).unwrap();
    for &(a, b) in &w.pairs {
        for pair in [(a, b), (b, a)] {
            let (c1, d1) = prompt_embeddings(&w, pair, None).unwrap();
            let (c2, d2) = prompt_embeddings(&w, pair, None).unwrap();
            assert_eq!(c1, c2);
            assert_eq!(d1, d2);
            assert_eq!(c1.kind, PromptKind::Commonality);
            assert_eq!(d1.kind, PromptKind::Difference);
            assert_eq!(c1.source, PromptSource::Generated);
            assert!((l2_norm(&c1.vector) - 1.0).abs() < 1e-9);
            assert!((l2_norm(&d1.vector) - 1.0).abs() < 1e-9);
            let cos = cosine_similarity(&c1.vector, &d1.vector).unwrap();
            assert!(cos < 0.999, "{pair:?}: {cos}");
        }
    }
    assert!(prompt_embeddings(&w, (0, 32), None).is_err());
}

#[test]
fn external_texts_only_change_source_and_vector() {
    let w = generate_world(&WorldSpec { seed: 2, ..WorldSpec::default() }).unwrap();
    let (gc, gd) = prompt_embeddings(&w, (0, 1), None).unwrap();
    let (ec, ed) = prompt_embeddings(&w, (0, 1), Some(("both have fur", "one has a flat face"))).unwrap();
    for (g, e) in [(&gc, &ec), (&gd, &ed)] {
        assert_eq!(e.source, PromptSource::External);
        assert_eq!(g.kind, e.kind);
        assert_eq!(g.pair, e.pair);
        assert_eq!(g.vector.len(), e.vector.len());
        assert!((l2_norm(&e.vector) - 1.0).abs() < 1e-9);
        assert_ne!(g.vector, e.vector);
    }
}

#[test]
fn external_prompt_file_is_used_and_validated() {
    let w = generate_world(&WorldSpec { seed: 1, ..WorldSpec::default() }).unwrap();
    let d = w.spec.embed_dim;
    let mut cv = vec![0.0; d];
    cv[0] = 2.0;
    let mut dv = vec![0.0; d];
    dv[1] = -3.0;
    let json = serde_json::json!({
        "pairs": [{"a": w.names[3], "b": w.names[4], "commonality": cv, "difference": dv}]
    });
    let dir = std::env::temp_dir().join(format!("capt-sem-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("prompts.json");
    std::fs::write(&path, json.to_string()).unwrap();
    let ext = ExternalPrompts::load(&path).unwrap();
    let mut book = PromptBook::new(&w, Some(&ext)).unwrap();
    let (c, df) = book.get(&w, (3, 4)).unwrap();
    assert_eq!(c.source, PromptSource::External);
    assert_eq!(c.vector[0], 1.0);
    assert_eq!(df.vector[1], -1.0);
    // reverse order is a different pair
    assert_eq!(book.get(&w, (4, 3)).unwrap().0.source, PromptSource::Generated);

    let short = ExternalPrompts {
        pairs: vec![ExternalPair { a: "x".into(), b: "y".into(), commonality: vec![1.0], difference: vec![1.0] }],
    };
    assert!(matches!(PromptBook::new(&w, Some(&short)), Err(SemanticError::Config(_))));
    std::fs::write(&path, "{\"pairs\": [").unwrap();
    assert!(matches!(ExternalPrompts::load(&path), Err(SemanticError::Json { .. })));
    assert!(matches!(ExternalPrompts::load(&dir.join("missing.json")), Err(SemanticError::Io { .. })));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn mined_pair_sets_satisfy_invariants() {
    let (w, bank) = world_and_bank(0);
    let clf = BaselineClassifier::new(&w, Some(w.base.clone())).unwrap();
    let mut book = PromptBook::new(&w, None).unwrap();
    use capt_bank::Classifier;
    for id in w.train_ids().filter(|&i| w.is_base(w.samples[i].label)).take(200) {
        let conf = clf.confidences(&w, id, 0.07).unwrap();
        let set = mine_pairs(&w, &bank, &mut book, id, &conf, 5, PairScoring::ConfusionScore, None).unwrap();
        assert_eq!(set.pairs.len(), 5);
        assert!(!set.categories().contains(&set.pseudo_gt));
        for win in set.pairs.windows(2) {
            assert!(win[0].1 > win[1].1 || (win[0].1 == win[1].1 && win[0].0 < win[1].0));
        }
        for (c, d) in set.commonality.iter().zip(&set.difference) {
            assert!((l2_norm(&c.vector) - 1.0).abs() < 1e-9);
            assert!((l2_norm(&d.vector) - 1.0).abs() < 1e-9);
            assert_eq!(c.pair.0, set.pseudo_gt);
        }
    }
}

#[test]
fn pseudo_gt_and_real_gt_pair_sets_differ() {
    use capt_bank::Classifier;
    let (mut confused, mut differ) = (0, 0);
    for seed in 0..5 {
        let (w, bank) = world_and_bank(seed);
        let clf = BaselineClassifier::new(&w, Some(w.base.clone())).unwrap();
        let mut book = PromptBook::new(&w, None).unwrap();
        for id in w.train_ids().filter(|&i| w.is_base(w.samples[i].label)) {
            let conf = clf.confidences(&w, id, 0.07).unwrap();
            let label = w.samples[id].label;
            if pseudo_gt(&conf).unwrap() == label {
                continue;
            }
            confused += 1;
            let a = mine_pairs(&w, &bank, &mut book, id, &conf, 5, PairScoring::ConfusionScore, None).unwrap();
            let b = mine_pairs(&w, &bank, &mut book, id, &conf, 5, PairScoring::ConfusionScore, Some(label)).unwrap();
            if a.categories() != b.categories() || a.pseudo_gt != b.pseudo_gt {
                differ += 1;
            }
        }
    }
    assert!(confused > 0);
    assert!(differ as f64 >= 0.01 * confused as f64, "{differ}/{confused}");
}

#[test]
fn bank_counts_lift_the_planted_partner() {
    let (w, bank) = world_and_bank(3);
    let &(a, b) = w.pairs.iter().find(|&&(a, _)| w.is_base(a)).unwrap();
    let counts = bank_counts(&bank, a);
    assert!(counts[b] > 0);
    let mut c = vec![0.01; 32];
    c[a] = 0.5;
    c[b] = 0.05;
    c[(b + 1) % 32] = 0.06;
    let s = confusion_score(&c, &counts).unwrap();
    assert!(s[b] > c[b]);
}

proptest! {
    #[test]
    fn rank_is_monotone_in_own_count(
        seed in 0u64..100_000,
        n in 2usize..12,
        bump in 1i64..50,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_dist(&mut rng, n);
        let counts: Vec<i64> = (0..n).map(|_| rng.random_range(0..20)).collect();
        let i = rng.random_range(0..n);
        let rank = |s: &[f64]| s.iter().enumerate().filter(|&(j, &v)| v > s[i] || (v == s[i] && j < i)).count();
        let before = confusion_score(&c, &counts).unwrap();
        let mut more = counts.clone();
        more[i] += bump;
        let after = confusion_score(&c, &more).unwrap();
        prop_assert!(after[i] >= before[i] - 1e-15);
        // lower rank number = better; must not get worse
        prop_assert!(rank(&after) <= rank(&before));
    }

    #[test]
    fn pseudo_gt_never_selected(scores in proptest::collection::vec(0.0f64..1.0, 1..30), c in 1usize..10, pg_raw in 0usize..30) {
        let pg = pg_raw % scores.len();
        let p = select_pairs(&scores, pg, c);
        prop_assert!(p.iter().all(|&(i, _)| i != pg));
        prop_assert_eq!(p.len(), c.min(scores.len() - 1));
    }
}
