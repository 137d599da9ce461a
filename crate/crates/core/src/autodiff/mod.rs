//! Array engine with reverse-mode differentiation, the layer primitives the
//! neural classifiers are built from, cross-entropy and Adam.

mod adam;
mod array;
pub mod gradcheck;
mod param;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use array::{argmax, Array};
pub use param::{Checkpoint, CheckpointEntry, Gradients, ParamId, ParamStore, Parameter, CHECKPOINT_FORMAT_VERSION};
pub use tape::{softmax_in_place, Tape, Var};

use thiserror::Error;

/// Seeded generator used for every random draw in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("target class {target} out of range for {classes} classes")]
    InvalidTarget { target: usize, classes: usize },
    #[error("no recorded forward pass for the requested node")]
    NoTape,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check_param_gradients;
    use super::*;
    use super::Rng;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};

    fn arr(shape: &[usize], data: &[f64]) -> Array {
        Array::from_vec(shape, data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut Rng) -> Array {
        let n = shape.iter().product();
        Array::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_arithmetic() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(Array::identity(2));
        let ai = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(ai), tape.value(a));
        let ones = tape.constant(arr(&[2, 1], &[1.0, 1.0]));
        let r = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(r).data(), &[3.0, 7.0]);
        let x = tape.constant(Array::zeros(&[2, 3]));
        let y = tape.constant(Array::zeros(&[4, 2]));
        assert!(matches!(tape.matmul(x, y), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_closed_forms() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let cases: [(&[f64], &[f64]); 3] = [
            (&[0.0, 0.0], &[0.5, 0.5]),
            (&[1000.0, 1000.0], &[0.5, 0.5]),
            (&[0.0, 3f64.ln()], &[0.25, 0.75]),
        ];
        for (input, expected) in cases {
            let x = tape.constant(arr(&[1, 2], input));
            let y = tape.softmax(x);
            for (a, b) in tape.value(y).data().iter().zip(expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv1d_small_cases() {
        let mut store = ParamStore::new();
        let ident = store.add("ident", arr(&[1, 1, 1], &[1.0]));
        let ones = store.add("ones", arr(&[1, 1, 3], &[1.0, 1.0, 1.0]));
        let taps = store.add("taps", arr(&[1, 1, 3], &[1.0, 0.0, 1.0]));
        let mut tape = Tape::new(&store);
        let x = tape.constant(arr(&[1, 4], &[0.0, 1.0, 0.0, 0.0]));
        let w = tape.param(ident);
        let y = tape.conv1d(x, w, None, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 0.0, 0.0]);
        let w = tape.param(ones);
        let y = tape.conv1d(x, w, None, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 1.0, 0.0]);
        let x = tape.constant(arr(&[1, 5], &[1.0, 0.0, 0.0, 0.0, 1.0]));
        let w = tape.param(taps);
        let y = tape.conv1d(x, w, None, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_values_and_errors() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let logits = tape.constant(Array::zeros(&[2, 4]));
        let loss = tape.cross_entropy(logits, &[0, 3]).unwrap();
        assert!((tape.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let l = tape.constant(arr(&[1, 3], &[margin, 0.0, 0.0]));
            let loss = tape.cross_entropy(l, &[0]).unwrap();
            let v = tape.value(loss).data()[0];
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-20);
        assert_eq!(
            tape.cross_entropy(logits, &[0, 4]),
            Err(TensorError::InvalidTarget { target: 4, classes: 4 })
        );
    }

    #[test]
    fn backward_simple_cases() {
        let mut store = ParamStore::new();
        let p = store.add("p", arr(&[3], &[0.1, -2.0, 5.0]));
        let q = store.add("q", Array::scalar(3.0));
        let mut tape = Tape::new(&store);
        let pv = tape.param(p);
        let s = tape.sum(pv);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new(&store);
        let qv = tape.param(q);
        let sq = tape.mul(qv, qv).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get(q).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let store = ParamStore::new();
        let tape = Tape::new(&store);
        let mut other = Tape::new(&store);
        let c = other.constant(Array::scalar(1.0));
        assert_eq!(tape.backward(c).unwrap_err(), TensorError::NoTape);
        let v = other.constant(Array::zeros(&[2]));
        assert!(matches!(other.backward(v), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn dropout_modes() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Array::full(&[4, 5], 2.0));
        let eval = tape.dropout(x, 0.5, None).unwrap();
        assert_eq!(tape.value(eval), tape.value(x));
        let mut rng = Rng::seed_from_u64(3);
        let zero = tape.dropout(x, 0.0, Some(&mut rng)).unwrap();
        assert_eq!(tape.value(zero), tape.value(x));
        assert!(tape.dropout(x, 1.0, Some(&mut rng)).is_err());
    }

    #[test]
    fn dropout_survivor_fraction() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Array::full(&[1_000_000], 1.0));
        let mut rng = Rng::seed_from_u64(11);
        let y = tape.dropout(x, 0.5, Some(&mut rng)).unwrap();
        let survivors = tape.value(y).data().iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / 1e6;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    /// Weighted sum with random weights so that no gradient vanishes by symmetry.
    fn probe_loss(tape: &mut Tape, y: Var, seed: u64) -> Var {
        let mut rng = Rng::seed_from_u64(seed);
        let w = random(tape.value(y).shape(), &mut rng);
        let w = tape.constant(w);
        let prod = tape.mul(y, w).unwrap();
        tape.sum(prod)
    }

    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, shape: &[usize], seed: u64) {
        let mut rng = Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let x = store.add("x", random(shape, &mut rng));
        let forward = |s: &ParamStore| {
            let mut tape = Tape::new(s);
            let xv = tape.param(x);
            let y = build(&mut tape, xv);
            let loss = probe_loss(&mut tape, y, seed + 1);
            (tape.value(loss).data()[0], tape.backward(loss).unwrap())
        };
        let err = check_param_gradients(&store, 1e-5, forward);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn gradients_of_every_primitive_match_finite_differences() {
        check_unary(|t, x| t.relu(x), &[3, 4], 1);
        check_unary(|t, x| t.softmax(x), &[3, 5], 2);
        check_unary(|t, x| t.scale(x, -1.7), &[2, 3], 3);
        check_unary(|t, x| t.transpose(x).unwrap(), &[2, 3], 4);
        check_unary(|t, x| t.mean_axis(x, 0).unwrap(), &[4, 3], 5);
        check_unary(|t, x| t.mean_axis(x, 1).unwrap(), &[4, 3], 6);
        check_unary(|t, x| t.slice_cols(x, 1, 3).unwrap(), &[3, 4], 7);
        check_unary(|t, x| t.reshape(x, &[6, 2]).unwrap(), &[3, 4], 8);
        check_unary(
            |t, x| {
                let a = t.slice_cols(x, 0, 2).unwrap();
                let b = t.slice_cols(x, 2, 4).unwrap();
                t.concat_cols(&[b, a, b]).unwrap()
            },
            &[3, 4],
            9,
        );
        check_unary(
            |t, x| {
                let a = t.slice_cols(x, 0, 2).unwrap();
                let b = t.slice_cols(x, 2, 4).unwrap();
                t.concat_rows(&[a, b, a]).unwrap()
            },
            &[3, 4],
            10,
        );
        check_unary(|t, x| t.mul(x, x).unwrap(), &[2, 2], 11);
        check_unary(
            |t, x| {
                let logits = t.scale(x, 2.0);
                t.cross_entropy(logits, &[0, 2, 1]).unwrap()
            },
            &[3, 4],
            12,
        );
    }

    #[test]
    fn gradients_of_parameterized_primitives() {
        let mut rng = Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&[3, 4], &mut rng));
        let b = store.add("b", random(&[4, 5], &mut rng));
        let bias = store.add("bias", random(&[5], &mut rng));
        let gamma = store.add("gamma", random(&[5], &mut rng));
        let beta = store.add("beta", random(&[5], &mut rng));
        let x = store.add("x", random(&[3, 9], &mut rng));
        let w = store.add("w", random(&[2, 3, 3], &mut rng));
        let cb = store.add("cb", random(&[2], &mut rng));
        let forward = |s: &ParamStore| {
            let mut tape = Tape::new(s);
            let (av, bv, biasv) = (tape.param(a), tape.param(b), tape.param(bias));
            let m = tape.matmul(av, bv).unwrap();
            let m = tape.add_bias(m, biasv).unwrap();
            let (g, bt) = (tape.param(gamma), tape.param(beta));
            let n = tape.layer_norm(m, g, bt).unwrap();
            let l1 = probe_loss(&mut tape, n, 31);
            let (xv, wv, cbv) = (tape.param(x), tape.param(w), tape.param(cb));
            let c = tape.conv1d(xv, wv, Some(cbv), 2).unwrap();
            let l2 = probe_loss(&mut tape, c, 32);
            let c1 = tape.conv1d(xv, wv, None, 1).unwrap();
            let l3 = probe_loss(&mut tape, c1, 33);
            let s = tape.add(l1, l2).unwrap();
            let loss = tape.add(s, l3).unwrap();
            (tape.value(loss).data()[0], tape.backward(loss).unwrap())
        };
        let err = check_param_gradients(&store, 1e-5, forward);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn conv_impulse_stays_within_reach() {
        let mut rng = Rng::seed_from_u64(5);
        for (k, d) in [(3usize, 1usize), (3, 4), (5, 2)] {
            let mut store = ParamStore::new();
            let w = store.add("w", random(&[2, 1, k], &mut rng));
            let mut tape = Tape::new(&store);
            let t_len = 41;
            let p = 20;
            let mut impulse = Array::zeros(&[1, t_len]);
            impulse.data_mut()[p] = 1.0;
            let x = tape.constant(impulse);
            let wv = tape.param(w);
            let y = tape.conv1d(x, wv, None, d).unwrap();
            let reach = (k - 1) * d / 2;
            for c in 0..2 {
                for t in 0..t_len {
                    if t.abs_diff(p) > reach {
                        assert_eq!(tape.value(y).get2(c, t), 0.0);
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            row in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let store = ParamStore::new();
            let mut tape = Tape::new(&store);
            let n = row.len();
            let x = tape.constant(arr(&[1, n], &row));
            let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
            let xs = tape.constant(arr(&[1, n], &shifted));
            let y = tape.softmax(x);
            let ys = tape.softmax(xs);
            prop_assert!((tape.value(y).sum() - 1.0).abs() < 1e-9);
            prop_assert!(tape.value(y).max_abs_diff(tape.value(ys)) < 1e-9);
        }

        #[test]
        fn forward_ops_stay_finite(seed in 0u64..1000, scale in 0.1f64..1e3) {
            let mut rng = Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let x = store.add("x", random(&[4, 6], &mut rng).map(|v| v * scale));
            let g = store.add("g", Array::full(&[6], 1.0));
            let b = store.add("b", Array::zeros(&[6]));
            let w = store.add("w", random(&[3, 4, 3], &mut rng));
            let mut tape = Tape::new(&store);
            let (xv, gv, bv, wv) = (tape.param(x), tape.param(g), tape.param(b), tape.param(w));
            let sm = tape.softmax(xv);
            let ln = tape.layer_norm(xv, gv, bv).unwrap();
            let cv = tape.conv1d(xv, wv, None, 2).unwrap();
            let ce = tape.cross_entropy(xv, &[0, 1, 2, 5]).unwrap();
            for v in [sm, ln, cv, ce] {
                prop_assert!(tape.value(v).all_finite());
            }
        }
    }
}
