use super::gradcheck::{finite_difference_grad, max_relative_error, UnitMap};
use super::*;
use crate::rng;
use rand::Rng;

fn t1(data: Vec<f64>) -> TensorData<f64> {
    TensorData::new(vec![data.len()], data).unwrap()
}

fn t2(rows: usize, cols: usize, data: Vec<f64>) -> TensorData<f64> {
    TensorData::new(vec![rows, cols], data).unwrap()
}

#[test]
fn matmul_identity_passes_through() {
    let mut tape = Tape::<f64>::new();
    let eye = tape.constant(t2(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let a = tape.constant(t2(3, 3, vec![2., -1., 3., 0.5, 4., -2., 7., 0., 1.]));
    let out = tape.matmul(eye, a).unwrap();
    assert_eq!(tape.value(out).data(), tape.value(a).data());
}

#[test]
fn softmax_uniform_on_equal_logits() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t1(vec![0., 0., 0., 0.]));
    let y = tape.softmax(x).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 0.25).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng::stream(11, "softmax");
    for _ in 0..50 {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..12).map(|_| r.gen_range(-15.0..15.0)).collect();
        let x = tape.constant(t2(3, 4, data));
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }
}

#[test]
fn sigmoid_at_zero_is_half() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(TensorData::scalar(0.0));
    let y = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(y).item(), 0.5);
}

#[test]
fn backward_square_at_three() {
    // d/dx x^2 at x=3 is 6
    let mut tape = Tape::<f64>::new();
    let x = tape.named_leaf("x", TensorData::scalar(3.0));
    let sq = tape.mul(x, x).unwrap();
    let grads = tape.backward(sq).unwrap();
    assert!((grads["x"].item() - 6.0).abs() < 1e-12);
}

#[test]
fn backward_sum_of_log_softmax_symmetric_point() {
    // grad of sum_k log-softmax(x)_k = 1 - V*softmax(x); zero at x = [0, 0]
    let mut tape = Tape::<f64>::new();
    let x = tape.named_leaf("x", t1(vec![0.0, 0.0]));
    let ls = tape.log_softmax(x).unwrap();
    let s = tape.sum_all(ls).unwrap();
    let grads = tape.backward(s).unwrap();
    for &g in grads["x"].data() {
        assert!(g.abs() < 1e-12);
    }
}

#[test]
fn backward_mean_reduce_is_one_over_n() {
    let mut tape = Tape::<f64>::new();
    let x = tape.named_leaf("x", t1(vec![5.0, -2.0, 7.0, 0.0, 1.0]));
    let m = tape.mean_all(x).unwrap();
    let grads = tape.backward(m).unwrap();
    for &g in grads["x"].data() {
        assert!((g - 0.2).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.named_leaf("x", t1(vec![1.0, 2.0]));
    let y = tape.neg(x).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::InvalidInput(_))));
}

#[test]
fn shape_mismatch_names_the_op() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t2(2, 3, vec![0.0; 6]));
    let b = tape.constant(t2(2, 3, vec![0.0; 6]));
    let err = tape.matmul(a, b).unwrap_err();
    match err {
        Error::Shape { op, detail } => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("[2, 3]"));
        }
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn log_rejects_non_positive() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t1(vec![1.0, 0.0]));
    assert!(matches!(tape.log(x), Err(Error::InvalidInput(_))));
}

#[test]
fn replay_reproduces_forward_bits() {
    let mut r = rng::stream(3, "replay");
    let mut tape = Tape::<f32>::new();
    let x = tape.named_leaf(
        "x",
        TensorData::new(vec![4, 6], (0..24).map(|_| r.gen_range(-2.0..2.0f32)).collect()).unwrap(),
    );
    let w = tape.named_leaf(
        "w",
        TensorData::new(vec![6, 6], (0..36).map(|_| r.gen_range(-0.5..0.5f32)).collect()).unwrap(),
    );
    let g = tape.constant(TensorData::filled(vec![6], 1.0f32));
    let b = tape.constant(TensorData::zeros(vec![6]));
    let h = tape.matmul(x, w).unwrap();
    let n = tape.layer_norm(h, g, b).unwrap();
    let a = tape.gelu(n).unwrap();
    let sm = tape.softmax(a).unwrap();
    let _ = tape.sum_all(sm).unwrap();
    assert!(tape.replay_matches().unwrap());
}

#[test]
fn finite_difference_square() {
    let mut params = UnitMap::new();
    params.insert("x".into(), TensorData::scalar(3.0));
    let f = |p: &UnitMap| {
        let v = p["x"].item();
        Ok(v * v)
    };
    let g = finite_difference_grad(f, &params, 1e-5).unwrap();
    assert!((g["x"].item() - 6.0).abs() < 1e-6);
}

#[test]
fn finite_difference_constant_function_is_zero() {
    let mut params = UnitMap::new();
    params.insert("x".into(), t1(vec![1.0, -2.0, 0.5]));
    let g = finite_difference_grad(|_| Ok(4.25), &params, 1e-5).unwrap();
    assert!(g["x"].data().iter().all(|&v| v == 0.0));
}

#[test]
fn finite_difference_rejects_nondeterministic_f() {
    use std::cell::Cell;
    let calls = Cell::new(0u32);
    let mut params = UnitMap::new();
    params.insert("x".into(), TensorData::scalar(1.0));
    let f = |_: &UnitMap| {
        calls.set(calls.get() + 1);
        Ok(calls.get() as f64)
    };
    assert!(matches!(
        finite_difference_grad(f, &params, 1e-5),
        Err(Error::InvalidInput(_))
    ));
}

/// Builds a scalar loss exercising one primitive and checks backward against
/// central differences in 64-bit.
fn check_primitive<F>(name: &str, params: UnitMap, build: F)
where
    F: Fn(&mut Tape<f64>, &IndexMap<String, ValueId>) -> Result<ValueId>,
{
    let eval = |p: &UnitMap| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let mut ids = IndexMap::new();
        for (k, v) in p {
            ids.insert(k.clone(), tape.named_leaf(k, v.clone()));
        }
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).item())
    };

    let numeric = finite_difference_grad(eval, &params, 1e-5).unwrap();

    let mut tape = Tape::<f64>::new();
    let mut ids = IndexMap::new();
    for (k, v) in &params {
        ids.insert(k.clone(), tape.named_leaf(k, v.clone()));
    }
    let loss = build(&mut tape, &ids).unwrap();
    let analytic = tape.backward(loss).unwrap();

    let rel = max_relative_error(&analytic, &numeric, 1e-6);
    assert!(rel < 1e-6, "{name}: relative error {rel}");
}

#[test]
fn gradcheck_primitive_battery() {
    let mut r = rng::stream(99, "battery");
    let mut rand1 = |n: usize| -> TensorData<f64> {
        TensorData::new(vec![n], (0..n).map(|_| r.gen_range(-1.5..1.5)).collect()).unwrap()
    };
    let a3 = rand1(12);
    let mut prm = |pairs: Vec<(&str, TensorData<f64>)>| -> UnitMap {
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    };

    // matmul + bias-broadcast add + gelu + mean
    let w = TensorData::new(vec![4, 3], a3.data().to_vec()).unwrap();
    let x = rand1(8);
    let x2 = TensorData::new(vec![2, 4], x.data().to_vec()).unwrap();
    let b = rand1(3);
    check_primitive(
        "matmul/add/gelu",
        prm(vec![("x", x2.clone()), ("w", w.clone()), ("b", b.clone())]),
        |t, ids| {
            let h = t.matmul(ids["x"], ids["w"])?;
            let h = t.add(h, ids["b"])?;
            let h = t.gelu(h)?;
            t.mean_all(h)
        },
    );

    // matmul with transposed rhs
    check_primitive(
        "matmul_nt",
        prm(vec![("x", x2.clone()), ("w", TensorData::new(vec![3, 4], a3.data().to_vec()).unwrap())]),
        |t, ids| {
            let h = t.matmul_nt(ids["x"], ids["w"])?;
            let h = t.sigmoid(h)?;
            t.sum_all(h)
        },
    );

    // softmax / log-softmax with per-row picks
    check_primitive("softmax-pick", prm(vec![("x", x2.clone())]), |t, ids| {
        let sm = t.softmax(ids["x"])?;
        let picked = t.pick_per_row(sm, &[1, 3])?;
        let lg = t.log(picked)?;
        t.sum_all(lg)
    });
    check_primitive("log-softmax-pick", prm(vec![("x", x2.clone())]), |t, ids| {
        let ls = t.log_softmax(ids["x"])?;
        let picked = t.pick_per_row(ls, &[0, 2])?;
        t.sum_all(picked)
    });

    // layer-norm
    check_primitive(
        "layer-norm",
        prm(vec![("x", x2.clone()), ("g", rand1(4)), ("be", rand1(4))]),
        |t, ids| {
            let n = t.layer_norm(ids["x"], ids["g"], ids["be"])?;
            let n = t.mul(n, n)?;
            t.mean_all(n)
        },
    );

    // embedding gather + index-select + concat
    check_primitive(
        "gather/select/concat",
        prm(vec![("tbl", TensorData::new(vec![5, 4], (0..20).map(|i| (i as f64) * 0.1 - 0.7).collect()).unwrap())]),
        |t, ids| {
            let e = t.embed_gather(ids["tbl"], &[0, 3, 3, 1])?;
            let left = t.index_select(e, 1, &[0, 1])?;
            let right = t.index_select(e, 1, &[2, 3])?;
            let swapped = t.concat(&[right, left], 1)?;
            let rows = t.index_select(swapped, 0, &[2, 0])?;
            let s = t.softplus(rows)?;
            t.sum_all(s)
        },
    );

    // exp/log/neg/sub/scalar-mul/reshape chain
    check_primitive("scalar-chain", prm(vec![("x", rand1(6))]), |t, ids| {
        let e = t.exp(ids["x"])?;
        let l = t.log(e)?;
        let n = t.neg(l)?;
        let d = t.sub(n, ids["x"])?;
        let sq = t.mul(d, d)?;
        let r = t.reshape(sq, vec![2, 3])?;
        let sc = t.scalar_mul(r, 1.7)?;
        t.sum_all(sc)
    });
}

#[test]
fn f32_and_f64_tapes_agree_loosely() {
    // same graph in both widths; values should agree to f32 precision
    let build = |tape_f32: bool| -> f64 {
        if tape_f32 {
            let mut t = Tape::<f32>::new();
            let x = t.constant(TensorData::new(vec![2, 2], vec![0.3f32, -1.2, 2.0, 0.01]).unwrap());
            let s = t.softmax(x).unwrap();
            let m = t.mean_all(s).unwrap();
            t.value(m).item() as f64
        } else {
            let mut t = Tape::<f64>::new();
            let x = t.constant(TensorData::new(vec![2, 2], vec![0.3f64, -1.2, 2.0, 0.01]).unwrap());
            let s = t.softmax(x).unwrap();
            let m = t.mean_all(s).unwrap();
            t.value(m).item()
        }
    };
    assert!((build(true) - build(false)).abs() < 1e-6);
}
