//! Every recorded kernel against central differences, over many seeds.

use capt_numerics::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 100;

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0) * scale).collect()).unwrap()
}

/// Contracts an output with a fixed random weight so every entry matters.
fn contract(rec: &mut GradRecord, out: Var, rng_seed: u64) -> Result<Var> {
    let shape = rec.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x5eed);
    let w = rand_t(&mut rng, shape[0], shape[1], 1.0);
    let wv = rec.constant(w);
    let p = rec.mul(out, wv)?;
    Ok(rec.sum(p))
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p{i}")).collect()
}

fn run<B>(params: Vec<Tensor>, build: B) -> FdReport
where
    B: Fn(&mut GradRecord, &[Var]) -> Result<Var>,
{
    let n = names(params.len());
    check_tape_fn(
        &n,
        &params,
        |rec, ps| {
            let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| rec.param(&format!("p{i}"), p.clone())).collect();
            build(rec, &vars)
        },
        FdConfig::default(),
    )
    .unwrap()
}

fn assert_ok(kernel: &str, seed: u64, r: &FdReport) {
    assert!(
        r.passed(),
        "{kernel} seed {seed}: max rel error {:.3e} ({:?})",
        r.max_rel_error,
        r.params
    );
}

#[test]
fn matmul_transpose_add_sub() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_t(&mut rng, 3, 4, 1.0);
        let b = rand_t(&mut rng, 4, 2, 1.0);
        let c = rand_t(&mut rng, 2, 3, 1.0);
        let r = run(vec![a, b, c], |rec, v| {
            let ab = rec.matmul(v[0], v[1])?;
            let ct = rec.transpose(v[2]);
            let s = rec.add(ab, ct)?;
            let d = rec.sub(s, ct)?;
            let e = rec.mul(d, s)?;
            contract(rec, e, seed)
        });
        assert_ok("matmul", seed, &r);
    }
}

#[test]
fn softmax_and_log_softmax() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&mut rng, 3, 5, 2.0);
        let tau = rng.random_range(0.3..2.0);
        let r = run(vec![x.clone()], |rec, v| {
            let s = rec.softmax_rows(v[0], tau)?;
            contract(rec, s, seed)
        });
        assert_ok("softmax", seed, &r);
        let r = run(vec![x], |rec, v| {
            let s = rec.log_softmax_rows(v[0], tau)?;
            contract(rec, s, seed)
        });
        assert_ok("log_softmax", seed, &r);
    }
}

#[test]
fn layer_norm_gelu_normalize() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&mut rng, 4, 6, 1.5);
        let g = rand_t(&mut rng, 1, 6, 1.0);
        let b = rand_t(&mut rng, 1, 6, 1.0);
        let r = run(vec![x.clone(), g, b], |rec, v| {
            let y = rec.layer_norm(v[0], v[1], v[2])?;
            contract(rec, y, seed)
        });
        assert_ok("layer_norm", seed, &r);
        let r = run(vec![x.clone()], |rec, v| {
            let y = rec.gelu(v[0]);
            contract(rec, y, seed)
        });
        assert_ok("gelu", seed, &r);
        let r = run(vec![x], |rec, v| {
            let y = rec.normalize_rows(v[0])?;
            contract(rec, y, seed)
        });
        assert_ok("normalize_rows", seed, &r);
    }
}

#[test]
fn attention_all_inputs_and_projections() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let x = rand_t(&mut rng, 5, d, 1.0);
        let q = rand_t(&mut rng, 2, d, 1.0);
        let ws: Vec<Tensor> = (0..4).map(|_| rand_t(&mut rng, d, d, 0.8)).collect();
        let mut ps = vec![q, x];
        ps.extend(ws);
        let r = run(ps, |rec, v| {
            let y = rec.multi_head_attention(v[0], v[1], v[1], v[2], v[3], v[4], v[5], 2)?;
            contract(rec, y, seed)
        });
        assert_ok("attention", seed, &r);
    }
}

#[test]
fn depthwise_conv_grid_and_kernel() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = rand_t(&mut rng, 12, 3, 1.0);
        let kern = rand_t(&mut rng, 9, 3, 1.0);
        let r = run(vec![grid, kern], |rec, v| {
            let y = rec.dwconv(v[0], v[1], 3, 4)?;
            contract(rec, y, seed)
        });
        assert_ok("dwconv", seed, &r);
    }
}

#[test]
fn structural_ops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_t(&mut rng, 4, 3, 1.0);
        let row = rand_t(&mut rng, 1, 3, 1.0);
        let s = rand_t(&mut rng, 1, 1, 1.0);
        let r = run(vec![a, row, s], |rec, v| {
            let x = rec.add_row(v[0], v[1])?;
            let x = rec.scale_by(v[2], x)?;
            let top = rec.slice_rows(x, 0, 2)?;
            let bottom = rec.slice_rows(x, 2, 4)?;
            let left = rec.slice_cols(top, 0, 1)?;
            let right = rec.slice_cols(bottom, 1, 3)?;
            let cc = rec.concat_cols(&[left, right])?;
            let cr = rec.concat_rows(&[cc, top])?;
            let m = rec.mean_rows(cr);
            let g = rec.gather(x, &[(0, 0), (3, 2), (0, 0)])?;
            let both = rec.concat_cols(&[m, g])?;
            let sc = rec.scale(both, -1.3);
            contract(rec, sc, seed)
        });
        assert_ok("structural", seed, &r);
    }
}
