mod common;

use std::rc::Rc;

use common::{gradcheck, uniform_store};
use proptest::prelude::*;
use region_embed::tensor::{concat, ParamStore, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check<F>(store: &ParamStore, f: F)
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> region_embed::Result<Var<'t>>,
{
    let err = gradcheck(store, H, f);
    assert!(err <= TOL, "relative gradient error {err:e}");
}

#[test]
fn matmul_identity_and_hand_case() {
    let tape = Tape::new();
    let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let av = tape.constant(&a);
    let out = av.matmul(&tape.constant(&Tensor::identity(2))).unwrap().value();
    assert_eq!(out, a);
    let ones = tape.constant(&Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
    assert_eq!(av.matmul(&ones).unwrap().value().data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(2, 3));
    let b = tape.constant(&Tensor::zeros(2, 3));
    let msg = a.matmul(&b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn matmul_gradient() {
    let s = uniform_store(&[("a", 3, 4), ("b", 4, 2)], -2.0, 2.0, 1);
    check(&s, |t, s| {
        let a = t.param(s, s.find("a").unwrap());
        let b = t.param(s, s.find("b").unwrap());
        Ok(a.matmul(&b)?.sum())
    });
}

#[test]
fn softmax_values() {
    let tape = Tape::new();
    let s = |v: Vec<f64>| {
        let n = v.len();
        tape.constant(&Tensor::new(1, n, v).unwrap()).softmax(1).unwrap().value()
    };
    for p in s(vec![0.0; 3]).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    assert_eq!(s(vec![1000.0, 1000.0]).data(), &[0.5, 0.5]);
    let p = s(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]);
    for (got, want) in p.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((got - want).abs() < 1e-15);
    }
}

#[test]
fn softmax_and_log_softmax_gradients() {
    let s = uniform_store(&[("x", 3, 5), ("w", 3, 5)], -2.0, 2.0, 2);
    for axis in [0, 1] {
        check(&s, |t, s| {
            let x = t.param(s, s.find("x").unwrap());
            let w = t.param(s, s.find("w").unwrap());
            Ok(x.softmax(axis)?.mul(&w)?.sum())
        });
        check(&s, |t, s| {
            let x = t.param(s, s.find("x").unwrap());
            let w = t.param(s, s.find("w").unwrap());
            Ok(x.log_softmax(axis)?.mul(&w)?.sum())
        });
    }
}

#[test]
fn masked_softmax_zeroes_masked_entries_and_differentiates() {
    let mask: Rc<[bool]> = vec![true, false, true, false, true, true, true, false, false].into();
    let tape = Tape::new();
    let x = tape.constant(&Tensor::from_fn(3, 3, |i, j| (i + 2 * j) as f64 * 0.3));
    let y = x.masked_softmax(mask.clone()).unwrap().value();
    for (p, &open) in y.data().iter().zip(mask.iter()) {
        if !open {
            assert_eq!(*p, 0.0);
        }
    }
    for i in 0..3 {
        assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let s = uniform_store(&[("x", 3, 3), ("w", 3, 3)], -2.0, 2.0, 3);
    check(&s, |t, s| {
        let x = t.param(s, s.find("x").unwrap());
        let w = t.param(s, s.find("w").unwrap());
        Ok(x.masked_softmax(mask.clone())?.mul(&w)?.sum())
    });
}

#[test]
fn layer_norm_values() {
    let tape = Tape::new();
    let gain = tape.constant(&Tensor::filled(1, 2, 1.0));
    let bias = tape.constant(&Tensor::zeros(1, 2));
    let x = tape.constant(&Tensor::from_rows(&[vec![1.0, 3.0], vec![5.0, 5.0]]).unwrap());
    let y = x.layer_norm(&gain, &bias, 1e-12).unwrap().value();
    assert!((y.get(0, 0) + 1.0).abs() < 1e-9 && (y.get(0, 1) - 1.0).abs() < 1e-9);
    assert_eq!(y.row(1), &[0.0, 0.0]);
}

#[test]
fn layer_norm_gradient() {
    let s = uniform_store(&[("x", 4, 6), ("g", 1, 6), ("b", 1, 6), ("w", 4, 6)], -2.0, 2.0, 4);
    let err = gradcheck(&s, H, |t, s| {
        let x = t.param(s, s.find("x").unwrap());
        let g = t.param(s, s.find("g").unwrap());
        let b = t.param(s, s.find("b").unwrap());
        let w = t.param(s, s.find("w").unwrap());
        Ok(x.layer_norm(&g, &b, 1e-5)?.mul(&w)?.sum())
    });
    assert!(err <= 1e-5, "layer_norm gradcheck {err:e}");
}

#[test]
fn backward_simple_cases_and_accumulation() {
    let tape = Tape::new();
    let x = tape.var(&Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap().with_grad());
    let loss = x.sum();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    tape.zero_grad();
    let sq = x.mul(&x).unwrap().sum();
    tape.backward(sq).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.var(&Tensor::zeros(2, 2).with_grad());
    assert!(tape.backward(x).is_err());
}

#[test]
fn elementwise_gradients() {
    let s = uniform_store(&[("x", 3, 4), ("y", 3, 4)], -2.0, 2.0, 5);
    fn x<'t>(t: &'t Tape, s: &ParamStore) -> (Var<'t>, Var<'t>) {
        (t.param(s, s.find("x").unwrap()), t.param(s, s.find("y").unwrap()))
    }
    check(&s, |t, s| {
        let (a, b) = x(t, s);
        Ok(a.add(&b)?.mul(&a)?.sum())
    });
    check(&s, |t, s| {
        let (a, b) = x(t, s);
        Ok(a.sub(&b)?.mul(&b)?.sum())
    });
    check(&s, |t, s| {
        let (a, b) = x(t, s);
        Ok(a.sigmoid().mul(&b)?.sum())
    });
    check(&s, |t, s| {
        let (a, b) = x(t, s);
        Ok(a.tanh().mul(&b)?.sum())
    });
    check(&s, |t, s| {
        let (a, b) = x(t, s);
        Ok(a.exp().mul(&b)?.sum())
    });
    check(&s, |t, s| {
        let (a, b) = x(t, s);
        Ok(a.leaky_relu(0.2).mul(&b)?.sum())
    });
    check(&s, |t, s| {
        let (a, b) = x(t, s);
        Ok(a.elu().mul(&b)?.sum())
    });
    check(&s, |t, s| {
        let (a, b) = x(t, s);
        Ok(a.relu().mul(&b)?.sum())
    });
    check(&s, |t, s| {
        let (a, b) = x(t, s);
        Ok(a.mul(&a)?.add_scalar(1.0).ln().mul(&b)?.scale(0.7).mean())
    });
    check(&s, |t, s| {
        let (a, b) = x(t, s);
        a.squared_error(&b)
    });
}

#[test]
fn broadcast_gradients() {
    let s = uniform_store(&[("m", 4, 3), ("row", 1, 3), ("col", 4, 1), ("one", 1, 1)], -2.0, 2.0, 6);
    check(&s, |t, s| {
        let m = t.param(s, s.find("m").unwrap());
        let r = t.param(s, s.find("row").unwrap());
        let c = t.param(s, s.find("col").unwrap());
        let o = t.param(s, s.find("one").unwrap());
        Ok(m.add(&r)?.mul(&c)?.sub(&o)?.tanh().sum())
    });
    check(&s, |t, s| {
        let c = t.param(s, s.find("col").unwrap());
        let r = t.param(s, s.find("row").unwrap());
        Ok(c.add(&r)?.leaky_relu(0.2).exp().sum())
    });
}

#[test]
fn structural_gradients() {
    let s = uniform_store(&[("a", 3, 4), ("b", 3, 2), ("c", 2, 4), ("w", 5, 4)], -2.0, 2.0, 7);
    check(&s, |t, s| {
        let a = t.param(s, s.find("a").unwrap());
        let b = t.param(s, s.find("b").unwrap());
        let cat = concat(&[a, b], 1)?;
        Ok(cat.tanh().slice(1, 1, 4)?.t().sigmoid().sum())
    });
    check(&s, |t, s| {
        let a = t.param(s, s.find("a").unwrap());
        let c = t.param(s, s.find("c").unwrap());
        let w = t.param(s, s.find("w").unwrap());
        Ok(concat(&[a, c], 0)?.mul(&w)?.sum_axis(0)?.tanh().sum())
    });
    check(&s, |t, s| {
        let a = t.param(s, s.find("a").unwrap());
        let rows = a.gather_rows(vec![2, 0, 2, 1].into())?;
        Ok(rows.sum_axis(1)?.tanh().sum())
    });
}

#[test]
fn slice_out_of_bounds_is_error() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(2, 3));
    assert!(a.slice(1, 2, 2).is_err());
    assert!(a.gather_rows(vec![5].into()).is_err());
}

#[test]
fn forward_is_deterministic() {
    let s = uniform_store(&[("a", 5, 5)], -2.0, 2.0, 8);
    let run = || {
        let t = Tape::new();
        let a = t.param(&s, s.find("a").unwrap());
        a.matmul(&a).unwrap().softmax(1).unwrap().value()
    };
    assert_eq!(run(), run());
}

#[test]
fn param_gradients_flow_into_store() {
    let mut s = uniform_store(&[("w", 2, 2)], -1.0, 1.0, 9);
    s.zero_grads();
    let tape = Tape::new();
    let w = tape.param(&s, s.find("w").unwrap());
    let w_again = tape.param(&s, s.find("w").unwrap());
    tape.backward(w.mul(&w_again).unwrap().sum()).unwrap();
    s.accumulate_grads(&tape);
    let want: Vec<f64> = s.get(s.find("w").unwrap()).data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(s.get(s.find("w").unwrap()).grad.as_ref().unwrap(), &want);
}

#[test]
fn non_finite_node_is_reported() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::from_rows(&[vec![-1.0, 2.0]]).unwrap());
    let _ = x.ln();
    let msg = tape.first_non_finite(None).unwrap();
    assert!(msg.contains("log"), "{msg}");
}

proptest! {
    #[test]
    fn softmax_rows_are_stochastic(values in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let t = Tensor::new(3, 4, values).unwrap();
        let y = t.softmax_rows();
        for i in 0..3 {
            prop_assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(y.row(i).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn sigmoid_in_open_unit_interval(values in proptest::collection::vec(-30.0f64..30.0, 8)) {
        let tape = Tape::new();
        let y = tape.constant(&Tensor::new(2, 4, values).unwrap()).sigmoid().value();
        prop_assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
}
