use capt_numerics::binio::{ByteReader, ByteWriter};
use capt_numerics::*;
use proptest::prelude::*;

fn finite_vec(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 1..max_len)
}

proptest! {
    #[test]
    fn softmax_sums_to_one(x in finite_vec(200), tau in 0.01f64..10.0) {
        let s = softmax(&Tensor::vector(x), tau).unwrap();
        prop_assert!((s.sum() - 1.0).abs() < 1e-12);
        prop_assert!(s.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn softmax_shift_invariant(x in finite_vec(30), c in -100.0f64..100.0) {
        let a = softmax(&Tensor::vector(x.clone()), 1.0).unwrap();
        let b = softmax(&Tensor::vector(x.iter().map(|v| v + c).collect()), 1.0).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn top_k_is_sort_prefix(x in prop::collection::vec(-5i32..5, 1..300), kf in 0.0f64..1.0) {
        let x: Vec<f64> = x.into_iter().map(f64::from).collect();
        let k = 1 + ((x.len() - 1) as f64 * kf) as usize;
        let got = top_k(&x, k).unwrap();
        let mut order: Vec<usize> = (0..x.len()).collect();
        // stable sort keeps lower indices first among equal values
        order.sort_by(|&a, &b| x[b].partial_cmp(&x[a]).unwrap());
        let want: Vec<(usize, f64)> = order.into_iter().take(k).map(|i| (i, x[i])).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn dwconv_channel_independence(
        vals in prop::collection::vec(-2.0f64..2.0, 4 * 3 * 5),
        kern in prop::collection::vec(-1.0f64..1.0, 3 * 3 * 5),
        ch in 0usize..5,
        cell in 0usize..12,
        delta in -3.0f64..3.0,
    ) {
        let grid = Tensor::new(vec![4, 3, 5], vals).unwrap();
        let k = Tensor::new(vec![3, 3, 5], kern).unwrap();
        let base = depthwise_conv2d(&grid, &k).unwrap();
        let mut g2 = grid.clone();
        g2.data_mut()[cell * 5 + ch] += delta;
        let out = depthwise_conv2d(&g2, &k).unwrap();
        for (i, (a, b)) in base.data().iter().zip(out.data()).enumerate() {
            if i % 5 != ch {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean(rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 8), 1..6)) {
        let x = Tensor::from_rows(&rows).unwrap();
        let y = layer_norm(&x, &[1.0; 8], &[0.0; 8]).unwrap();
        for i in 0..y.rows() {
            let m: f64 = y.row(i).iter().sum::<f64>() / 8.0;
            prop_assert!(m.abs() < 1e-10);
        }
    }

    #[test]
    fn cosine_bounded(u in prop::collection::vec(-5.0f64..5.0, 6), v in prop::collection::vec(-5.0f64..5.0, 6)) {
        prop_assume!(l2_norm(&u) > 1e-9 && l2_norm(&v) > 1e-9);
        let c = cosine_similarity(&u, &v).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn truncated_binary_never_panics(vals in prop::collection::vec(-1.0f64..1.0, 1..20), cut in 0usize..200) {
        let mut w = ByteWriter::new();
        w.bytes(b"MAGIC");
        w.tensor(&Tensor::vector(vals));
        w.str("tail");
        let bytes = w.finish();
        let cut = cut.min(bytes.len());
        let mut r = ByteReader::new(&bytes[..cut]);
        let res = r.magic(b"MAGIC").and_then(|_| r.tensor()).and_then(|_| r.str()).and_then(|_| r.finish());
        if cut < bytes.len() {
            prop_assert!(res.is_err());
        } else {
            prop_assert!(res.is_ok());
        }
    }
}

#[test]
fn softmax_large_n() {
    let x: Vec<f64> = (0..10_000).map(|i| ((i * 7919) % 1000) as f64 * 0.01 - 5.0).collect();
    let s = softmax(&Tensor::vector(x), 0.07).unwrap();
    assert!((s.sum() - 1.0).abs() < 1e-12);
}
