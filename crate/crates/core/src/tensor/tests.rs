use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, rel_err};
use super::*;
use crate::error::Error;

const TOL: f64 = 1e-3;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Non-scalar outputs go through the oracle's own f64 readout.
fn readout<'t>(_tape: &'t Tape, x: Var<'t>, _salt: u64) -> crate::Result<Var<'t>> {
    Ok(x)
}

#[test]
fn matmul_identity() {
    let tape = Tape::new();
    let i = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    assert_eq!(i.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_zero_seed_gives_zero_gradients() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let b = tape.leaf(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
    let c = a.matmul(b).unwrap();
    let zero = tape.constant(Tensor::zeros(&[2, 2]));
    let root = c.mul(zero).unwrap().sum_all().unwrap();
    let g = tape.backward(root).unwrap();
    assert!(g.wrt(a).data().iter().all(|&v| v == 0.0));
    assert!(g.wrt(b).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_mismatch() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(a.matmul(b), Err(Error::Shape { .. })));
}

#[test]
fn matmul_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for salt in 0..20 {
        let inputs = [random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2])];
        let err = check(&inputs, |t, v| {
            let c = v[0].matmul(v[1])?;
            readout(t, c, salt)
        });
        assert!(err <= TOL, "instance {salt}: rel err {err}");
    }
}

#[test]
fn sigmoid_value_and_gradient_at_zero() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0));
    let y = x.sigmoid().unwrap();
    assert_eq!(y.item(), 0.5);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).data(), &[0.25]);
}

#[test]
fn unary_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    type Build = for<'t> fn(Var<'t>) -> crate::Result<Var<'t>>;
    let cases: [(&str, Build); 7] = [
        ("sigmoid", |x| x.sigmoid()),
        ("exp", |x| x.exp()),
        ("gelu", |x| x.gelu()),
        ("softplus", |x| x.softplus()),
        ("log", |x| x.mul(x)?.add_scalar(0.5)?.log()),
        ("sqrt", |x| x.mul(x)?.add_scalar(0.5)?.sqrt()),
        ("tanh-free scale", |x| x.scale(-2.5)),
    ];
    for (name, f) in cases {
        for salt in 0..20 {
            let inputs = [random(&mut rng, &[6])];
            let err = check(&inputs, |t, v| readout(t, f(v[0])?, salt));
            assert!(err <= TOL, "{name} instance {salt}: rel err {err}");
        }
    }
}

#[test]
fn binary_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for salt in 0..20 {
        let a = random(&mut rng, &[2, 3]);
        let mut b = random(&mut rng, &[2, 3]);
        b.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
        let err = check(&[a, b], |t, v| {
            let s = v[0].add(v[1])?.mul(v[0])?.sub(v[1])?.div(v[1])?;
            readout(t, s, salt)
        });
        assert!(err <= TOL, "instance {salt}: rel err {err}");
    }
}

#[test]
fn binary_ops_require_equal_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(a.add(b).is_err());
    assert!(tape.elementwise(Elementwise::Mul, &[a, b]).is_err());
    assert!(tape.elementwise(Elementwise::Sigmoid, &[a, b]).is_err());
}

#[test]
fn log_of_non_positive_is_domain_error() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(x.log(), Err(Error::Domain { op: "log", .. })));
    let y = tape.leaf(Tensor::vector(vec![-1.0]));
    assert!(matches!(
        tape.elementwise(Elementwise::Log, &[y]),
        Err(Error::Domain { .. })
    ));
}

#[test]
fn overflow_fails_fast() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![100.0]));
    assert!(matches!(x.exp(), Err(Error::NonFinite { op: "exp" })));
    let z = tape.leaf(Tensor::vector(vec![0.0]));
    assert!(matches!(z.div(z), Err(Error::NonFinite { op: "div" })));
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0; 5]));
    let y = x.softmax(0).unwrap().value();
    assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-7));

    let big = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
    let y = big.softmax(0).unwrap().value();
    assert_eq!(y.data()[0], 1.0);
    assert!(y.data()[1] < 1e-30);
}

#[test]
fn softmax_sums_to_one_and_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for salt in 0..20 {
        let x = random(&mut rng, &[5]).reshape(vec![5]).unwrap();
        let tape = Tape::new();
        let s = tape.constant(x.clone()).softmax(0).unwrap().value();
        let total: f64 = s.data().iter().map(|&v| f64::from(v)).sum();
        assert!((total - 1.0).abs() <= 1e-6);
        let err = check(&[x.clone()], |t, v| readout(t, v[0].softmax(0)?, salt));
        assert!(err <= TOL, "softmax instance {salt}: rel err {err}");
        let err = check(&[x], |t, v| readout(t, v[0].log_softmax(0)?, salt));
        assert!(err <= TOL, "log_softmax instance {salt}: rel err {err}");
    }
}

#[test]
fn softmax_over_leading_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[3, 4]);
    let tape = Tape::new();
    let cols = tape.constant(x.clone()).softmax(0).unwrap().value();
    let rows = tape
        .constant(x)
        .transpose()
        .unwrap()
        .softmax(1)
        .unwrap()
        .transpose()
        .unwrap()
        .value();
    assert_eq!(cols, rows);
    let err = check(&[random(&mut rng, &[3, 4])], |t, v| readout(t, v[0].softmax(0)?, 3));
    assert!(err <= TOL);
}

#[test]
fn reduce_examples() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert_eq!(x.sum_all().unwrap().item(), 6.0);

    let v = tape.leaf(Tensor::vector(vec![3.0, -1.0, 4.0, 1.0]));
    let m = v.mean_all().unwrap();
    let g = tape.backward(m).unwrap();
    assert_eq!(g.wrt(v).data(), &[0.25; 4]);

    let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
    let direct = tape.constant(a.clone()).sum_axis(0).unwrap().value();
    let via_t = tape
        .constant(a)
        .transpose()
        .unwrap()
        .sum_axis(1)
        .unwrap()
        .value();
    assert_eq!(direct.data(), via_t.data());
    assert_eq!(direct.data(), &[5.0, 7.0, 9.0]);
}

#[test]
fn empty_reduction_is_domain_error() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[0]));
    assert!(matches!(x.sum_all(), Err(Error::Domain { .. })));
}

#[test]
fn reduce_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for salt in 0..20 {
        let x = random(&mut rng, &[3, 4]);
        let err = check(&[x], |t, v| {
            let a = v[0].mean_axis(0)?.reshape(&[4])?;
            let b = v[0].sum_axis(1)?.reshape(&[3])?;
            readout(t, t.concat(&[a, b], 0)?, salt)
        });
        assert!(err <= TOL, "instance {salt}: rel err {err}");
    }
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::new();
    let gain = tape.constant(Tensor::vector(vec![1.0; 4]));
    let bias = tape.constant(Tensor::vector(vec![0.0; 4]));
    let x = tape.constant(Tensor::from_rows(&[vec![3.0; 4]]).unwrap());
    let y = x.layer_norm(gain, bias, 1e-5).unwrap().value();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let gain = tape.constant(Tensor::vector(vec![1.0; 2]));
    let bias = tape.constant(Tensor::vector(vec![0.0; 2]));
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap());
    let y = x.layer_norm(gain, bias, 1e-12).unwrap().value();
    assert!((y.data()[0] - 1.0).abs() < 1e-6);
    assert!((y.data()[1] + 1.0).abs() < 1e-6);
}

#[test]
fn layer_norm_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for salt in 0..20 {
        let inputs = [
            random(&mut rng, &[3, 5]),
            random(&mut rng, &[5]),
            random(&mut rng, &[5]),
        ];
        let err = check(&inputs, |t, v| readout(t, v[0].layer_norm(v[1], v[2], 1e-5)?, salt));
        assert!(err <= TOL, "instance {salt}: rel err {err}");
    }
}

#[test]
fn structural_ops_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for salt in 0..20 {
        let inputs = [random(&mut rng, &[2, 3]), random(&mut rng, &[3])];
        let err = check(&inputs, |t, v| {
            let b = v[1].broadcast_to(&[2, 3])?;
            let x = v[0].add(b)?;
            let left = x.narrow(1, 0, 2)?;
            let right = x.narrow(1, 1, 2)?;
            let cat = t.concat(&[left, right.mul(right)?], 0)?;
            let r = cat.transpose()?.reshape(&[8])?;
            readout(t, r, salt)
        });
        assert!(err <= TOL, "instance {salt}: rel err {err}");
    }
}

#[test]
fn backward_requires_scalar_root() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
}

#[test]
fn backward_sum_and_unreachable() {
    let tape = Tape::new();
    let p = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let q = tape.leaf(Tensor::vector(vec![5.0, 6.0]));
    let root = p.sum_all().unwrap();
    let g = tape.backward(root).unwrap();
    assert_eq!(g.wrt(p).data(), &[1.0; 4]);
    assert_eq!(g.wrt(q).data(), &[0.0; 2]);
}

#[test]
fn backward_composite_sigmoid_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..20 {
        let inputs = [
            random(&mut rng, &[1, 4]),
            random(&mut rng, &[4, 1]),
            random(&mut rng, &[1, 1]),
        ];
        let err = check(&inputs, |_, v| v[0].matmul(v[1])?.add(v[2])?.sigmoid()?.sum_all());
        assert!(err <= TOL, "rel err {err}");
    }
}

#[test]
fn repeated_backward_is_bitwise_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let tape = Tape::new();
    let a = tape.leaf(random(&mut rng, &[4, 3]));
    let b = tape.leaf(random(&mut rng, &[3, 2]));
    let root = a.matmul(b).unwrap().gelu().unwrap().softmax(1).unwrap().mean_all().unwrap();
    let g1 = tape.backward(root).unwrap();
    let g2 = tape.backward(root).unwrap();
    assert_eq!(g1.wrt(a), g2.wrt(a));
    assert_eq!(g1.wrt(b), g2.wrt(b));
}

#[test]
fn renormalize_rows_handles_zero_rows() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 3.0], vec![0.0, 0.0]]).unwrap());
    let y = x.renormalize_rows().unwrap();
    assert_eq!(y.value().data(), &[0.25, 0.75, 0.5, 0.5]);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for salt in 0..20 {
        let mut x = random(&mut rng, &[2, 4]);
        x.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.1);
        let err = check(&[x], |t, v| readout(t, v[0].renormalize_rows()?, salt));
        assert!(err <= TOL);
    }
}

#[test]
fn param_store_rejects_duplicates() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::zeros(&[2])).unwrap();
    assert!(store.add("w", Tensor::zeros(&[3])).is_err());
}

#[test]
fn fd_helper_sanity() {
    assert_eq!(rel_err(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
}
