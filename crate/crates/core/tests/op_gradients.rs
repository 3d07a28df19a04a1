//! Finite-difference checks of every tape operation's backward rule.

use npa_core::gradcheck::{check_gradients, FnObjective, GradCheckOptions};
use npa_core::tensor::{self, Mode};
use npa_core::{Grads, ParamStore, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contract `out` with a fixed random tensor so every output coordinate
/// carries a distinct upstream gradient.
fn contract(tape: &mut Tape<'_>, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let coeff = Tensor::uniform(&shape, 1.0, &mut rng(seed));
    let c = tape.constant(coeff);
    tape.dot_all(out, c).unwrap()
}

fn check<F>(store: &ParamStore, build: F) -> f64
where
    F: Fn(&mut Tape<'_>) -> Var,
{
    let mut f = FnObjective(|p: &ParamStore| {
        let mut tape = Tape::new(p);
        let out = build(&mut tape);
        let loss = contract(&mut tape, out, 99);
        let mut g = p.zero_grads();
        tape.backward(loss, &mut g);
        (tape.value(loss).item(), g)
    });
    check_gradients(store, &mut f, GradCheckOptions::default()).max_rel_error()
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut s = ParamStore::new();
    let a = s.push("a", Tensor::uniform(&[3, 3], 1.0, &mut rng(1)));
    let b = s.push("b", Tensor::uniform(&[3, 3], 1.0, &mut rng(2)));
    // Plain sum(a·b), as stated for the operation.
    let mut f = FnObjective(|p: &ParamStore| {
        let mut tape = Tape::new(p);
        let (va, vb) = (tape.param(a), tape.param(b));
        let prod = tape.matmul(va, vb).unwrap();
        let ones = tape.constant(Tensor::full(&[3, 3], 1.0));
        let loss = tape.dot_all(prod, ones).unwrap();
        let mut g = p.zero_grads();
        tape.backward(loss, &mut g);
        (tape.value(loss).item(), g)
    });
    let report = check_gradients(&s, &mut f, GradCheckOptions::default());
    assert!(report.max_rel_error() <= 1e-6, "{report:?}");

    let err = check(&s, |t| {
        let (va, vb) = (t.param(a), t.param(b));
        t.matmul(va, vb).unwrap()
    });
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn matmul_gradient_contract_is_transpose_products() {
    let mut s = ParamStore::new();
    let a = s.push("a", Tensor::uniform(&[2, 3], 1.0, &mut rng(3)));
    let b = s.push("b", Tensor::uniform(&[3, 4], 1.0, &mut rng(4)));
    let upstream = Tensor::uniform(&[2, 4], 1.0, &mut rng(5));
    let mut tape = Tape::new(&s);
    let (va, vb) = (tape.param(a), tape.param(b));
    let prod = tape.matmul(va, vb).unwrap();
    let c = tape.constant(upstream.clone());
    let loss = tape.dot_all(prod, c).unwrap();
    let mut g = s.zero_grads();
    tape.backward(loss, &mut g);

    let bt = transpose(s.get(b));
    let at = transpose(s.get(a));
    let want_a = tensor::matmul(&upstream, &bt).unwrap();
    let want_b = tensor::matmul(&at, &upstream).unwrap();
    assert_close(g.get(a), &want_a, 1e-12);
    assert_close(g.get(b), &want_b, 1e-12);
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let data = (0..c)
        .flat_map(|j| (0..r).map(move |i| (i, j)))
        .map(|(i, j)| t.data()[i * c + j])
        .collect();
    Tensor::new(vec![c, r], data).unwrap()
}

fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn matvec_and_add_gradients() {
    let mut s = ParamStore::new();
    let a = s.push("a", Tensor::uniform(&[4, 3], 1.0, &mut rng(6)));
    let x = s.push("x", Tensor::uniform(&[3], 1.0, &mut rng(7)));
    let b = s.push("b", Tensor::uniform(&[4], 1.0, &mut rng(8)));
    let err = check(&s, |t| {
        let (va, vx, vb) = (t.param(a), t.param(x), t.param(b));
        let y = t.matvec(va, vx).unwrap();
        t.add(y, vb).unwrap()
    });
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn conv1d_gradients_match_finite_differences() {
    let mut s = ParamStore::new();
    let e = s.push("embeds", Tensor::uniform(&[4, 3], 1.0, &mut rng(9)));
    let f = s.push("filters", Tensor::uniform(&[2, 9], 1.0, &mut rng(10)));
    let b = s.push("bias", Tensor::uniform(&[2], 1.0, &mut rng(11)));
    let err = check(&s, |t| {
        let (ve, vf, vb) = (t.param(e), t.param(f), t.param(b));
        t.conv1d_seq(ve, vf, vb).unwrap()
    });
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn conv1d_wide_window_gradients() {
    let mut s = ParamStore::new();
    let e = s.push("embeds", Tensor::uniform(&[3, 2], 1.0, &mut rng(12)));
    let f = s.push("filters", Tensor::uniform(&[3, 10], 1.0, &mut rng(13)));
    let b = s.push("bias", Tensor::uniform(&[3], 1.0, &mut rng(14)));
    let err = check(&s, |t| {
        let (ve, vf, vb) = (t.param(e), t.param(f), t.param(b));
        t.conv1d_seq(ve, vf, vb).unwrap()
    });
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn tanh_gradient_at_half() {
    let mut s = ParamStore::new();
    let x = s.push("x", Tensor::vector(vec![0.5]));
    let mut tape = Tape::new(&s);
    let v = tape.param(x);
    let y = tape.tanh(v);
    let mut g = s.zero_grads();
    tape.backward(y, &mut g);
    let analytic = g.get(x).item();
    let h = 1e-4;
    let numeric = (libm::tanh(0.5 + h) - libm::tanh(0.5 - h)) / (2.0 * h);
    let closed = 1.0 - libm::tanh(0.5).powi(2);
    assert!((analytic - closed).abs() <= 1e-12);
    assert!((analytic - numeric).abs() <= 1e-8);
}

#[test]
fn smooth_elementwise_gradients() {
    let mut s = ParamStore::new();
    let x = s.push("x", Tensor::uniform(&[6], 2.0, &mut rng(15)));
    let tanh_err = check(&s, |t| {
        let v = t.param(x);
        t.tanh(v)
    });
    let sig_err = check(&s, |t| {
        let v = t.param(x);
        t.sigmoid(v)
    });
    assert!(tanh_err <= 1e-6 && sig_err <= 1e-6, "{tanh_err} {sig_err}");
}

#[test]
fn relu_gradient_away_from_kink() {
    let mut s = ParamStore::new();
    let x = s.push("x", Tensor::vector(vec![-1.2, -0.3, 0.4, 0.9, 2.0, -0.05]));
    let err = check(&s, |t| {
        let v = t.param(x);
        t.relu(v)
    });
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut s = ParamStore::new();
    let x = s.push("x", Tensor::vector(vec![0.0]));
    let mut tape = Tape::new(&s);
    let v = tape.param(x);
    let y = tape.relu(v);
    let mut g = s.zero_grads();
    tape.backward(y, &mut g);
    assert_eq!(g.get(x).item(), 0.0);
}

#[test]
fn softmax_and_masked_softmax_gradients() {
    let mut s = ParamStore::new();
    let x = s.push("x", Tensor::uniform(&[5], 2.0, &mut rng(16)));
    let err = check(&s, |t| {
        let v = t.param(x);
        t.softmax(v).unwrap()
    });
    assert!(err <= 1e-6, "{err}");
    let masked = check(&s, |t| {
        let v = t.param(x);
        t.masked_softmax(v, Some(&[true, false, true, true, false]))
            .unwrap()
    });
    assert!(masked <= 1e-6, "{masked}");
}

#[test]
fn lookup_row_and_pooling_gradients() {
    let mut s = ParamStore::new();
    let table = s.push("table", Tensor::uniform(&[6, 3], 1.0, &mut rng(17)));
    let w = s.push("w", Tensor::uniform(&[4], 1.0, &mut rng(18)));
    let err = check(&s, |t| {
        let tv = t.param(table);
        let rows = t.embedding_lookup(tv, &[5, 1, 1, 3]).unwrap();
        let wv = t.param(w);
        let ws = t.weighted_sum(wv, rows).unwrap();
        let mean = t.mean_rows(rows).unwrap();
        let r = t.row(tv, 2).unwrap();
        t.sum(&[ws, mean, r]).unwrap()
    });
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn stack_select_and_losses() {
    let mut s = ParamStore::new();
    let a = s.push("a", Tensor::uniform(&[3], 1.0, &mut rng(19)));
    let b = s.push("b", Tensor::uniform(&[3], 1.0, &mut rng(20)));
    let err = check(&s, |t| {
        let (va, vb) = (t.param(a), t.param(b));
        let m = t.stack(&[va, vb, va]).unwrap();
        let scores = t.matvec(m, vb).unwrap();
        let p = t.softmax(scores).unwrap();
        let pick = t.select(p, 1).unwrap();
        let nll = t.neg_log(pick);
        let logit = t.select(scores, 0).unwrap();
        let bce = t.bce_with_logits(logit, 1.0);
        let bce0 = t.bce_with_logits(logit, 0.0);
        let scaled = t.scale(bce0, 0.3);
        t.sum(&[nll, bce, scaled]).unwrap()
    });
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn dropout_gradient_uses_mask() {
    let mut s = ParamStore::new();
    let x = s.push("x", Tensor::uniform(&[50], 1.0, &mut rng(21)));
    // The mask is drawn from a fixed seed on every call, so the function is
    // deterministic and finite differences apply.
    let err = check(&s, |t| {
        let v = t.param(x);
        let mut r = rng(77);
        t.dropout(v, 0.3, Mode::Train, &mut r).unwrap()
    });
    assert!(err <= 1e-6, "{err}");
}

fn lookup_grad(table: &Tensor, ids: &[usize], coeff: &Tensor) -> Grads {
    let mut s = ParamStore::new();
    let t = s.push("table", table.clone());
    let mut tape = Tape::new(&s);
    let tv = tape.param(t);
    let rows = tape.embedding_lookup(tv, ids).unwrap();
    let c = tape.constant(coeff.clone());
    let loss = tape.dot_all(rows, c).unwrap();
    let mut g = s.zero_grads();
    tape.backward(loss, &mut g);
    g
}

proptest! {
    #[test]
    fn lookup_gradient_is_linear(
        ids in prop::collection::vec(0usize..5, 1..8),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
        seed in 0u64..1000,
    ) {
        let table = Tensor::uniform(&[5, 3], 1.0, &mut rng(seed));
        let f = Tensor::uniform(&[ids.len(), 3], 1.0, &mut rng(seed + 1));
        let g = Tensor::uniform(&[ids.len(), 3], 1.0, &mut rng(seed + 2));
        let combo = Tensor::new(
            vec![ids.len(), 3],
            f.data().iter().zip(g.data()).map(|(x, y)| alpha * x + beta * y).collect(),
        ).unwrap();
        let gf = lookup_grad(&table, &ids, &f);
        let gg = lookup_grad(&table, &ids, &g);
        let gc = lookup_grad(&table, &ids, &combo);
        let id = npa_core::ParamId(0);
        for ((c, x), y) in gc.get(id).data().iter().zip(gf.get(id).data()).zip(gg.get(id).data()) {
            prop_assert!((c - (alpha * x + beta * y)).abs() <= 1e-10);
        }
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        logits in prop::collection::vec(-30.0f64..30.0, 1..20),
        shift in -100.0f64..100.0,
    ) {
        let p = tensor::softmax(&Tensor::vector(logits.clone()));
        let q = tensor::softmax(&Tensor::vector(logits.iter().map(|x| x + shift).collect()));
        prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!(*a > 0.0 && *a <= 1.0);
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv_preserves_sequence_length(len in 1usize..12, dim in 1usize..5, half in 0usize..3) {
        let w = 2 * half + 1;
        let e = Tensor::uniform(&[len, dim], 1.0, &mut rng(len as u64));
        let f = Tensor::uniform(&[2, w * dim], 1.0, &mut rng(3));
        let b = Tensor::zeros(&[2]);
        let out = tensor::conv1d_seq(&e, &f, &b).unwrap();
        prop_assert_eq!(out.shape(), &[len, 2][..]);
    }
}
