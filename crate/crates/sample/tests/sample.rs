use capt_bank::{ConfusionBank, ConfusionRecord, Provenance};
use capt_numerics::binio::{ByteReader, ByteWriter};
use capt_numerics::{check_tape_fn, l2_norm, normalized, FdConfig, GradRecord, Tensor, Var};
use capt_sample::*;
use capt_semantic::ConfusionPairSet;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn tokens(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::matrix(n, d, gauss(rng, n * d)).unwrap()
}

fn pair_set(pg: usize, cats: &[usize]) -> ConfusionPairSet {
    ConfusionPairSet {
        sample_id: usize::MAX,
        pseudo_gt: pg,
        pairs: cats.iter().map(|&c| (c, 0.0)).collect(),
        commonality: vec![],
        difference: vec![],
    }
}

fn empty_bank(n: usize) -> ConfusionBank {
    ConfusionBank::empty(
        n,
        vec![],
        Provenance {
            builder: "test".into(),
            seed: 0,
            timestamp: "0".into(),
        },
    )
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

#[test]
fn alpha_examples() {
    assert_eq!(dynamic_alpha(0.0, 5.0, 0.5).unwrap(), 0.0);
    assert_eq!(dynamic_alpha(1.0, 5.0, 0.5).unwrap(), 5.0);
    assert!((dynamic_alpha(0.25, 5.0, 0.5).unwrap() - 2.5).abs() < 1e-15);
    assert_eq!(dynamic_alpha(-0.4, 5.0, 0.5).unwrap(), 0.0);
    for (s, g) in [(1.0, 0.5), (0.5, 0.5), (5.0, 0.0), (5.0, -1.0), (f64::NAN, 0.5)] {
        assert!(matches!(dynamic_alpha(0.3, s, g), Err(SampleError::Config(_))));
    }
}

#[test]
fn alpha_is_monotone_on_grids() {
    for &g in &[0.1, 0.5, 1.0, 2.0, 4.0] {
        for &s in &[1.01, 2.0, 5.0, 20.0] {
            let mut prev = f64::NEG_INFINITY;
            for i in 0..=400 {
                let c = -1.0 + i as f64 / 200.0;
                let a = dynamic_alpha(c, s, g).unwrap();
                assert!(a >= prev);
                prev = a;
            }
        }
    }
}

/// Random bank over `n` categories, features in `dim` dims, with some
/// duplicated features to exercise the tie rule.
fn random_bank(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> ConfusionBank {
    let mut bank = empty_bank(n);
    let mut id = 0;
    let records = rng.random_range(1..60);
    let mut pool: Vec<Vec<f64>> = Vec::new();
    for _ in 0..records {
        let pg = rng.random_range(0..n);
        let mut truth = rng.random_range(0..n);
        if truth == pg {
            truth = (truth + 1) % n;
        }
        let feature = if !pool.is_empty() && rng.random_bool(0.2) {
            pool[rng.random_range(0..pool.len())].clone()
        } else {
            gauss(rng, dim)
        };
        pool.push(feature.clone());
        // ids are not in insertion order
        id += rng.random_range(1..5);
        let sample_id = if rng.random_bool(0.5) { id } else { 10_000 - id };
        bank.insert(ConfusionRecord {
            sample_id,
            pseudo_gt: pg,
            true_category: truth,
            feature,
        })
        .unwrap();
    }
    bank
}

#[test]
fn retrieval_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = RetrievalConfig::default();
    for _ in 0..1000 {
        let n = rng.random_range(2..7);
        let dim = rng.random_range(2..6);
        let bank = random_bank(&mut rng, n, dim);
        let pg = rng.random_range(0..n);
        let cats: Vec<usize> = (0..n).filter(|&c| c != pg).collect();
        let f = if rng.random_bool(0.2) {
            // query equal to a stored feature
            bank.records().next().unwrap().feature.clone()
        } else {
            gauss(&mut rng, dim)
        };
        let set = representative_samples(&f, &pair_set(pg, &cats), &bank, &cfg).unwrap();
        let mut k = 0;
        for &c in &cats {
            let mut best: Option<(f64, usize)> = None;
            for r in bank.records() {
                if r.pseudo_gt != pg || r.true_category != c {
                    continue;
                }
                let s = cos(&f, &r.feature);
                best = match best {
                    None => Some((s, r.sample_id)),
                    Some((bs, bid)) if s > bs || (s == bs && r.sample_id < bid) => Some((s, r.sample_id)),
                    keep => keep,
                };
            }
            match best {
                None => assert!(set.skipped.contains(&c)),
                Some((s, id)) => {
                    let got = &set.reps[k];
                    assert_eq!((got.category, got.sample_id), (c, id));
                    assert!((got.intensity - s).abs() < 1e-12);
                    k += 1;
                }
            }
        }
        assert_eq!(k, set.reps.len());
    }
}

#[test]
fn self_copy_and_single_candidate() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bank = empty_bank(4);
    let f = gauss(&mut rng, 6);
    for (id, truth, feat) in [(7, 1, f.clone()), (3, 1, gauss(&mut rng, 6)), (9, 2, gauss(&mut rng, 6))] {
        bank.insert(ConfusionRecord {
            sample_id: id,
            pseudo_gt: 0,
            true_category: truth,
            feature: feat,
        })
        .unwrap();
    }
    let set = representative_samples(&f, &pair_set(0, &[1, 2, 3]), &bank, &RetrievalConfig::default()).unwrap();
    assert_eq!(set.reps[0].sample_id, 7);
    assert!((set.reps[0].intensity - 1.0).abs() < 1e-12);
    assert!((set.reps[0].alpha - 5.0).abs() < 1e-9);
    assert_eq!(set.reps[1].sample_id, 9);
    assert_eq!(set.skipped, vec![3]);

    let excl = RetrievalConfig {
        exclude: Some(7),
        ..RetrievalConfig::default()
    };
    let set = representative_samples(&f, &pair_set(0, &[1]), &bank, &excl).unwrap();
    assert_eq!(set.reps[0].sample_id, 3);

    let set = representative_samples(&f, &pair_set(3, &[0, 1, 2]), &bank, &RetrievalConfig::default()).unwrap();
    assert!(set.is_empty());
    assert_eq!(set.skipped, vec![0, 1, 2]);
}

#[test]
fn several_reps_per_category_are_ranked() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bank = empty_bank(3);
    let f = gauss(&mut rng, 4);
    for id in 0..10 {
        bank.insert(ConfusionRecord {
            sample_id: id,
            pseudo_gt: 0,
            true_category: 1,
            feature: gauss(&mut rng, 4),
        })
        .unwrap();
    }
    let cfg = RetrievalConfig {
        reps_per_category: 3,
        ..RetrievalConfig::default()
    };
    let set = representative_samples(&f, &pair_set(0, &[1]), &bank, &cfg).unwrap();
    assert_eq!(set.len(), 3);
    let mut all: Vec<f64> = bank.retrieve(0, 1).iter().map(|r| cos(&f, &r.feature)).collect();
    all.sort_by(|a, b| b.total_cmp(a));
    for (r, s) in set.reps.iter().zip(&all) {
        assert!((r.intensity - s).abs() < 1e-12);
    }
    let one = representative_samples(&f, &pair_set(0, &[1]), &bank, &RetrievalConfig::default()).unwrap();
    assert_eq!(one.reps[0], set.reps[0]);
    assert!(matches!(
        representative_samples(&f, &pair_set(0, &[1]), &bank, &RetrievalConfig { reps_per_category: 0, ..cfg }),
        Err(SampleError::Config(_))
    ));
}

#[test]
fn random_choice_stays_inside_the_category_and_is_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let bank = random_bank(&mut rng, 4, 3);
    let f = gauss(&mut rng, 3);
    let ps = pair_set(0, &[1, 2, 3]);
    let cfg = RetrievalConfig::default();
    let a = random_representatives(&f, &ps, &bank, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = random_representatives(&f, &ps, &bank, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
    for r in &a.reps {
        assert!(bank.retrieve(0, r.category).iter().any(|x| x.sample_id == r.sample_id));
    }
}

#[test]
fn adapter_shapes_and_alpha_zero_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = AdapterParams::random(32, 4, 3, (4, 4), 1).unwrap();
    let t = tokens(&mut rng, 17, 32);
    let out = p.forward(&t, 0.0).unwrap();
    assert_eq!(out.shape(), &[17, 32]);
    for i in 1..17 {
        assert_eq!(out.row(i), t.row(i));
    }
    let out2 = p.forward(&t, 2.0).unwrap();
    assert_eq!(out.row(0), out2.row(0));
    assert_ne!(out.row(5), out2.row(5));
    assert!(matches!(p.forward(&tokens(&mut rng, 16, 32), 1.0), Err(SampleError::Config(_))));
    assert!(AdapterParams::random(32, 5, 3, (4, 4), 1).is_err());
    assert!(AdapterParams::random(32, 4, 2, (4, 4), 1).is_err());
}

#[test]
fn fresh_adapter_is_identity_on_cls() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = AdapterParams::new(32, 2, 3, (4, 4), 9).unwrap();
    let t = tokens(&mut rng, 17, 32);
    assert_eq!(p.cls_readout(&t).unwrap(), t.row(0).to_vec());
}

#[test]
fn tape_and_pure_forward_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for mode in [QueryMode::FullSequence, QueryMode::ClsOnly] {
        let mut p = AdapterParams::random(16, 2, 3, (3, 3), 4).unwrap();
        p.mode = mode;
        p.ln_gain = Tensor::matrix(1, 16, gauss(&mut rng, 16)).unwrap();
        let t = tokens(&mut rng, 10, 16);
        let pure = p.forward(&t, 1.3).unwrap();
        let mut rec = GradRecord::new();
        let vars = p.register(&mut rec, "");
        let tv = rec.constant(t.clone());
        let out = p.forward_tape(&mut rec, &vars, tv, 1.3).unwrap();
        assert!(rec.value(out).max_abs_diff(&pure) < 1e-12);
        let cls = p.cls_readout_tape(&mut rec, &vars, tv).unwrap();
        let pure_cls = p.cls_readout(&t).unwrap();
        for (a, b) in rec.value(cls).data().iter().zip(&pure_cls) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in pure.row(0).iter().zip(&pure_cls) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

/// Symmetric InfoNCE between the normalized output rows and fixed targets.
fn info_nce(rec: &mut GradRecord, rows: Var, targets: &Tensor, tau: f64) -> Var {
    let n = rec.value(rows).rows();
    let f = rec.normalize_rows(rows).unwrap();
    let t = rec.constant(targets.transpose());
    let s = rec.matmul(f, t).unwrap();
    let a = rec.log_softmax_rows(s, tau).unwrap();
    let st = rec.transpose(s);
    let b = rec.log_softmax_rows(st, tau).unwrap();
    let diag: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let da = rec.gather(a, &diag).unwrap();
    let db = rec.gather(b, &diag).unwrap();
    let tot = rec.add(da, db).unwrap();
    let tot = rec.sum(tot);
    rec.scale(tot, -1.0 / n as f64)
}

#[test]
fn adapter_gradients_match_finite_differences() {
    for seed in 0..6 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        for mode in [QueryMode::FullSequence, QueryMode::ClsOnly] {
            let mut p = AdapterParams::random(8, 2, 3, (2, 3), seed).unwrap();
            p.mode = mode;
            let t = tokens(&mut rng, 7, 8);
            let targets = Tensor::from_rows(&(0..7).map(|_| normalized(&gauss(&mut rng, 8))).collect::<Vec<_>>()).unwrap();
            let names: Vec<String> = ADAPTER_TENSORS.iter().map(|s| s.to_string()).collect();
            let params: Vec<Tensor> = p.tensors().iter().map(|t| (*t).clone()).collect();
            let report = check_tape_fn(
                &names,
                &params,
                |rec, ps| {
                    let mut q = p.clone();
                    for (dst, src) in q.tensors_mut().into_iter().zip(ps) {
                        *dst = src.clone();
                    }
                    let vars = q.register(rec, "");
                    let tv = rec.constant(t.clone());
                    let out = q.forward_tape(rec, &vars, tv, 0.8).map_err(|e| match e {
                        SampleError::Numerics(n) => n,
                        other => capt_numerics::NumericsError::Usage(other.to_string()),
                    })?;
                    Ok(info_nce(rec, out, &targets, 0.07))
                },
                FdConfig::default(),
            )
            .unwrap();
            assert!(report.passed(), "seed {seed} {mode:?}: {:?}", report.params);
        }
    }
}

#[test]
fn frozen_groups_do_not_move() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut p = AdapterParams::random(8, 2, 3, (2, 2), 3).unwrap();
    p.trainable = AdapterTrainable {
        norm: false,
        attention: true,
        kernel: false,
    };
    let before = p.clone();
    let t = tokens(&mut rng, 5, 8);
    let mut rec = GradRecord::new();
    let vars = p.register(&mut rec, "");
    let tv = rec.constant(t);
    let out = p.forward_tape(&mut rec, &vars, tv, 1.0).unwrap();
    let loss = rec.sum(out);
    let grads = rec.backward(loss).unwrap();
    assert!(grads.get(vars.ln_gain).unwrap().data().iter().all(|&g| g == 0.0));
    assert!(grads.get(vars.kernel).unwrap().data().iter().all(|&g| g == 0.0));
    p.sgd_step(&vars, &grads, 0.1);
    assert_eq!(p.ln_gain, before.ln_gain);
    assert_eq!(p.kernel, before.kernel);
    assert_ne!(p.wq, before.wq);
}

#[test]
fn adapter_round_trip() {
    let mut p = AdapterParams::random(8, 4, 5, (2, 3), 7).unwrap();
    p.mode = QueryMode::ClsOnly;
    p.trainable.kernel = false;
    let mut w = ByteWriter::new();
    p.write(&mut w);
    let bytes = w.finish();
    let mut r = ByteReader::new(&bytes);
    assert_eq!(AdapterParams::read(&mut r).unwrap(), p);
    r.finish().unwrap();
    for cut in 0..bytes.len() {
        assert!(AdapterParams::read(&mut ByteReader::new(&bytes[..cut])).is_err());
    }
}

fn rep(cat: usize, intensity: f64) -> Representative {
    Representative {
        category: cat,
        sample_id: cat,
        intensity,
        alpha: dynamic_alpha(intensity, 5.0, 0.5).unwrap(),
        feature: vec![],
    }
}

#[test]
fn fusion_degenerate_case_and_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let p = AdapterParams::random(16, 2, 3, (2, 2), 1).unwrap();
    let t = tokens(&mut rng, 5, 16);
    let set = RepresentativeSet {
        pseudo_gt: 0,
        reps: vec![rep(1, 1.0)],
        skipped: vec![],
    };
    let f = sample_confusion_feature(&t, &set, &[t.clone()], &p).unwrap();
    let cls = normalized(&p.cls_readout(&t).unwrap());
    for (a, b) in f.iter().zip(&cls) {
        assert!((a - b).abs() < 1e-12);
    }
    let empty = RepresentativeSet::default();
    assert!(matches!(sample_confusion_feature(&t, &empty, &[], &p), Err(SampleError::Contract(_))));
    assert!(matches!(sample_confusion_feature(&t, &set, &[], &p), Err(SampleError::Contract(_))));
}

#[test]
fn fusion_tape_matches_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let inst = gauss(&mut rng, 6);
    let reps: Vec<Vec<f64>> = (0..3).map(|_| gauss(&mut rng, 6)).collect();
    let c = [0.9, 0.2, -0.4];
    let pure = fuse(&inst, &reps, &c).unwrap();
    let mut rec = GradRecord::new();
    let iv = rec.constant(Tensor::row_vector(inst));
    let rv: Vec<Var> = reps.iter().map(|r| rec.constant(Tensor::row_vector(r.clone()))).collect();
    let out = fuse_tape(&mut rec, iv, &rv, &c).unwrap();
    for (a, b) in rec.value(out).data().iter().zip(&pure) {
        assert!((a - b).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn fused_feature_is_unit_and_order_free(seed in 0u64..10_000, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AdapterParams::random(8, 2, 3, (2, 2), seed).unwrap();
        let t = tokens(&mut rng, 5, 8);
        let reps: Vec<Representative> = (0..k).map(|i| rep(i + 1, rng.random_range(-1.0..1.0))).collect();
        let rep_tokens: Vec<Tensor> = (0..k).map(|_| tokens(&mut rng, 5, 8)).collect();
        let set = RepresentativeSet { pseudo_gt: 0, reps: reps.clone(), skipped: vec![] };
        let f = sample_confusion_feature(&t, &set, &rep_tokens, &p).unwrap();
        prop_assert!((l2_norm(&f) - 1.0).abs() < 1e-12);
        let mut order: Vec<usize> = (0..k).collect();
        order.reverse();
        order.rotate_left(seed as usize % k);
        let set2 = RepresentativeSet { pseudo_gt: 0, reps: order.iter().map(|&i| reps[i].clone()).collect(), skipped: vec![] };
        let tok2: Vec<Tensor> = order.iter().map(|&i| rep_tokens[i].clone()).collect();
        let g = sample_confusion_feature(&t, &set2, &tok2, &p).unwrap();
        for (a, b) in f.iter().zip(&g) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn retrieval_ignores_positive_rescaling(seed in 0u64..10_000, scale in 1e-3f64..1e3, fscale in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = random_bank(&mut rng, 4, 5);
        let mut scaled = empty_bank(4);
        for r in bank.records() {
            let mut r = r.clone();
            r.feature.iter_mut().for_each(|v| *v *= scale);
            scaled.insert(r).unwrap();
        }
        let f = gauss(&mut rng, 5);
        let fs: Vec<f64> = f.iter().map(|v| v * fscale).collect();
        let ps = pair_set(0, &[1, 2, 3]);
        let cfg = RetrievalConfig::default();
        let a = representative_samples(&f, &ps, &bank, &cfg).unwrap();
        let b = representative_samples(&fs, &ps, &scaled, &cfg).unwrap();
        let ids = |s: &RepresentativeSet| s.reps.iter().map(|r| (r.category, r.sample_id)).collect::<Vec<_>>();
        prop_assert_eq!(ids(&a), ids(&b));
    }
}
