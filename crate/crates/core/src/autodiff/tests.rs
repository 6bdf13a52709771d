use super::gradcheck::check_gradients;
use super::*;
use crate::rng::RandomStream;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data)
}

fn random(shape: &[usize], s: &mut RandomStream) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| s.normal()).collect())
}

#[test]
fn relu_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn identity_matmul_is_exact() {
    let mut s = RandomStream::new(1);
    let a = random(&[3, 3], &mut s).cast::<f32>();
    let mut eye = Tensor::<f32>::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let mut tape = Tape::<f32>::new();
    let (e, av) = (tape.constant(eye), tape.constant(a.clone()));
    let out = tape.matmul(e, av).unwrap();
    assert_eq!(tape.value(out), &a);
}

#[test]
fn mean_of_copies() {
    let v = [0.3, -1.25, 7.0];
    let data: Vec<f64> = (0..5).flat_map(|_| v).collect();
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[5, 3], &data));
    let m = tape.mean_over_axis(x, 0).unwrap();
    assert_eq!(tape.value(m).data(), &v);
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn least_squares_gradient_matches_formula() {
    let mut s = RandomStream::new(3);
    let x = random(&[5, 3], &mut s);
    let w = random(&[3, 1], &mut s);
    let y = random(&[5, 1], &mut s);
    let mut tape = Tape::<f64>::new();
    let (xv, wv, yv) = (tape.constant(x.clone()), tape.param(w.clone()), tape.constant(y.clone()));
    let p = tape.matmul(xv, wv).unwrap();
    let r = tape.sub(p, yv).unwrap();
    let sq = tape.mul(r, r).unwrap();
    let l = tape.sum(sq).unwrap();
    let g = tape.backward(l).unwrap();
    // 2 Xᵀ(Xw − y), evaluated by hand
    let (xd, wd, yd) = (x.data(), w.data(), y.data());
    let resid: Vec<f64> = (0..5).map(|i| (0..3).map(|c| xd[i * 3 + c] * wd[c]).sum::<f64>() - yd[i]).collect();
    for c in 0..3 {
        let expected: f64 = 2.0 * (0..5).map(|i| xd[i * 3 + c] * resid[i]).sum::<f64>();
        assert!((g.get(wv).unwrap().data()[c] - expected).abs() < 1e-12);
    }
}

#[test]
fn backward_errors() {
    let tape = Tape::<f64>::new();
    assert!(matches!(tape.backward(Var::from_raw_for_tests(0)), Err(AutogradError::EmptyTape)));
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(AutogradError::NotScalar(_))));
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    match tape.matmul(a, b) {
        Err(AutogradError::Shape { op, shapes, .. }) => {
            assert_eq!(op, "matmul");
            assert_eq!(shapes, vec![vec![2, 3], vec![4, 2]]);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(tape.add(b, a), Err(AutogradError::Shape { op: "add", .. })));
    assert!(matches!(tape.concat(a, b), Err(AutogradError::Shape { op: "concat", .. })));
    assert!(matches!(tape.sub(a, b), Err(AutogradError::Shape { op: "sub", .. })));
}

#[test]
fn causal_mask_softmax_rows_sum_to_one() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 3, 3], &[0.1, 0.5, 0.2, 1.0, -1.0, 3.0, 0.0, 0.0, 0.0]));
    let mask: Vec<bool> = (0..9).map(|i| i % 3 > i / 3).collect();
    let m = tape.masked_fill(x, &mask, f64::NEG_INFINITY).unwrap();
    let p = tape.softmax(m).unwrap();
    let v = tape.value(p).data();
    assert_eq!(v[1], 0.0);
    assert_eq!(v[2], 0.0);
    assert_eq!(v[5], 0.0);
    for r in 0..3 {
        assert!((v[r * 3..r * 3 + 3].iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}

#[test]
fn permute_round_trip() {
    let mut s = RandomStream::new(2);
    let x = random(&[2, 3, 4, 5], &mut s);
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(x.clone());
    let p = tape.permute(v, &[0, 2, 1, 3]).unwrap();
    assert_eq!(tape.shape(p), &[2, 4, 3, 5]);
    assert_eq!(tape.value(p).data()[5], x.data()[20]);
    let back = tape.permute(p, &[0, 2, 1, 3]).unwrap();
    assert_eq!(tape.value(back), &x);
    assert!(tape.permute(v, &[0, 0, 1, 2]).is_err());
}

#[test]
fn prefix_mean_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 4, 1], &[2.0, 4.0, 9.0, 100.0]));
    let p = tape.prefix_mean(x).unwrap();
    assert_eq!(tape.value(p).data(), &[0.0, 2.0, 3.0, 5.0]);
}

#[test]
fn batchnorm_eval_is_affine_per_feature() {
    let mut s = RandomStream::new(4);
    let mut state = BatchNormState::new(3);
    let gamma = random(&[3], &mut s);
    let beta = random(&[3], &mut s);
    for _ in 0..5 {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(random(&[16, 3], &mut s));
        let (g, b) = (tape.param(gamma.clone()), tape.param(beta.clone()));
        tape.batchnorm(x, g, b, &mut state).unwrap();
    }
    assert!(state.running_var().iter().all(|v| *v >= 0.0));
    state.set_training(false);
    let frozen = state.clone();
    let eval = |xs: &[f64]| {
        let mut st = frozen.clone();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[xs.len() / 3, 3], xs));
        let (g, b) = (tape.param(gamma.clone()), tape.param(beta.clone()));
        let y = tape.batchnorm(x, g, b, &mut st).unwrap();
        tape.value(y).data().to_vec()
    };
    let y0 = eval(&[0.0; 3]);
    let y1 = eval(&[1.0; 3]);
    let y2 = eval(&[2.5, -3.0, 0.7]);
    for c in 0..3 {
        let slope = y1[c] - y0[c];
        let x = [2.5, -3.0, 0.7][c];
        assert!((y2[c] - (y0[c] + slope * x)).abs() < 1e-12);
    }
    // eval output of a row does not depend on the rest of the batch
    let pair = eval(&[2.5, -3.0, 0.7, 100.0, 100.0, 100.0]);
    assert_eq!(&pair[..3], &y2[..]);
    assert_eq!(frozen, state);
}

/// Every primitive, composed into one scalar loss, checked against central differences.
#[test]
fn composite_gradcheck_all_primitives() {
    let mut s = RandomStream::new(10);
    let params = vec![
        random(&[2, 3, 4], &mut s), // x
        random(&[4, 4], &mut s),    // w
        random(&[4], &mut s),       // bias
        random(&[4], &mut s),       // ln gamma
        random(&[4], &mut s),       // ln beta
        random(&[6, 2], &mut s),    // w2
        random(&[2], &mut s),       // bn gamma
        random(&[2], &mut s),       // bn beta
    ];
    let bn = BatchNormState::new(2);
    let mask: Vec<bool> = (0..9).map(|i| i % 3 > i / 3).collect();
    let forward = |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var, AutogradError> {
        let mut bn = bn.clone();
        let h = tape.matmul(v[0], v[1])?;
        let h = tape.add(h, v[2])?;
        let h = tape.layer_norm(h, v[3], v[4])?;
        let h = tape.gelu(h)?;
        let ht = tape.transpose(h)?;
        let att = tape.matmul(h, ht)?;
        let att = tape.scale(att, 0.5)?;
        let att = tape.masked_fill(att, &mask, f64::NEG_INFINITY)?;
        let att = tape.softmax(att)?;
        let mixed = tape.matmul(att, h)?; // [2,3,4]
        let p = tape.permute(mixed, &[1, 0, 2])?; // [3,2,4]
        let p = tape.reshape(p, &[3, 2, 4])?;
        let pm = tape.prefix_mean(p)?;
        let sel = tape.index_select(pm, 1, &[1, 1])?; // [3,2,4]
        let c = tape.concat(sel, p)?; // [3,2,8]
        let c = tape.index_select(c, 2, &[0, 1, 2, 5, 6, 7])?; // [3,2,6]
        let r = tape.reshape(c, &[6, 6])?;
        let z = tape.matmul(r, v[5])?;
        let z = tape.batchnorm(z, v[6], v[7], &mut bn)?;
        let z = tape.relu(z)?;
        let m = tape.mean_over_axis(z, 0)?;
        let sq = tape.mul(m, m)?;
        let d = tape.sub(sq, m)?;
        tape.sum(d)
    };
    let report = check_gradients(&params, forward, 64, 1e-3, 1).unwrap();
    assert_eq!(report.coords.len(), 64);
    let worst = report.worst().unwrap();
    assert!(worst.rel_err < 1e-4, "worst coordinate {worst:?}");
}

#[test]
fn batched_matmul_and_eval_batchnorm_gradcheck() {
    let mut s = RandomStream::new(11);
    let params = vec![random(&[3, 2, 4], &mut s), random(&[3, 4, 5], &mut s), random(&[5], &mut s), random(&[5], &mut s)];
    let mut bn = BatchNormState::new(5);
    bn.set_training(false);
    let forward = |tape: &mut Tape<f64>, v: &[Var]| {
        let mut bn = bn.clone();
        let y = tape.matmul(v[0], v[1])?;
        let y = tape.reshape(y, &[6, 5])?;
        let y = tape.batchnorm(y, v[2], v[3], &mut bn)?;
        let t = tape.constant(Tensor::full(&[6, 5], 0.3));
        tape.mse(y, t)
    };
    let report = check_gradients(&params, forward, 40, 1e-3, 2).unwrap();
    assert!(report.max_rel_err() < 1e-4, "{:?}", report.worst());
}

#[test]
fn f32_and_f64_agree() {
    let mut s = RandomStream::new(12);
    let x = random(&[4, 3], &mut s);
    let w = random(&[3, 2], &mut s);
    let run = |x: Tensor<f64>, w: Tensor<f64>| -> Vec<f64> {
        let mut tape = Tape::<f32>::new();
        let (xv, wv) = (tape.constant(x.cast()), tape.param(w.cast()));
        let y = tape.matmul(xv, wv).unwrap();
        let y = tape.gelu(y).unwrap();
        tape.value(y).to_f64_vec()
    };
    let a = run(x.clone(), w.clone());
    let mut tape = Tape::<f64>::new();
    let (xv, wv) = (tape.constant(x), tape.param(w));
    let y = tape.matmul(xv, wv).unwrap();
    let y = tape.gelu(y).unwrap();
    for (p, q) in a.iter().zip(tape.value(y).data()) {
        assert!((p - q).abs() < 1e-5);
    }
}
