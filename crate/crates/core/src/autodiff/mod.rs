//! Reverse-mode automatic differentiation, parameters and Adam.

pub mod adam;
pub mod params;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use params::{Binding, Param, ParamId, ParamStore};
pub use tape::{sigmoid, Gradients, Segments, Tape, Var};

use crate::tensor::Tensor;

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn numeric_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::rng::chacha;

    const H: f64 = 1e-6;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = chacha(seed);
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(sum(w ⊙ f(inputs)))/d(input) for every input against
    /// central differences, with a random projection `w`.
    fn check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |xs: &[Tensor]| -> (Tape, Vec<Var>, Var) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
            let out = f(&mut tape, &vars);
            let w = random(tape.value(out).shape(), 99);
            let wv = tape.constant(w);
            let prod = tape.mul(out, wv);
            let loss = tape.sum(prod);
            (tape, vars, loss)
        };
        let (tape, vars, loss) = eval(inputs);
        let grads = tape.backward(loss).unwrap();
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).unwrap().clone();
            let numeric = numeric_gradient(
                |probe| {
                    let mut xs = inputs.to_vec();
                    xs[k] = probe.clone();
                    let (tape, _, loss) = eval(&xs);
                    tape.value(loss).item()
                },
                x,
                H,
            );
            for i in 0..x.len() {
                let (a, n) = (analytic.data()[i], numeric.data()[i]);
                assert!(
                    relative_error(a, n, 1e-4) < 1e-4,
                    "input {k} elem {i}: analytic {a} numeric {n}"
                );
            }
        }
    }

    #[test]
    fn forward_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let i = t.constant(Tensor::identity(2));
        let p = t.matmul(a, i);
        assert_eq!(t.value(p), t.value(a));
        let z = t.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]));
        let s = t.softmax_rows(z);
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let y = t.sigmoid(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2, 2]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn disconnected_leaf_gets_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[2], 3.0));
        let y = t.leaf(Tensor::full(&[3], 1.0));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(y).unwrap(), &Tensor::zeros(&[3]));
        assert_eq!(g.get(x).unwrap(), &Tensor::full(&[2], 1.0));
    }

    #[test]
    fn linear_sum_gradient_is_outer_product() {
        // loss = sum(W x): dW_ij = x_j for every row i.
        let w = random(&[3, 4], 1);
        let x = random(&[4, 1], 2);
        let mut t = Tape::new();
        let wv = t.leaf(w.clone());
        let xv = t.constant(x.clone());
        let y = t.matmul(wv, xv);
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        let gw = g.get(wv).unwrap();
        let numeric = numeric_gradient(|p| p.matmul(&x).sum(), &w, H);
        for i in 0..3 {
            for j in 0..4 {
                assert!((gw.at(i, j) - x.data()[j]).abs() < 1e-12);
                assert!((gw.at(i, j) - numeric.at(i, j)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn shared_subexpression_gradients_sum() {
        check(&[random(&[3, 3], 5)], |t, v| {
            let a = t.matmul(v[0], v[0]);
            let b = t.mul(v[0], a);
            t.add(b, v[0])
        });
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        let a = random(&[3, 4], 10);
        let b = random(&[4, 2], 11);
        let bt = random(&[5, 4], 12);
        let same = random(&[3, 4], 13);
        let row = random(&[4], 14);
        check(&[a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]));
        check(&[a.clone(), bt.clone()], |t, v| t.matmul_t(v[0], v[1]));
        check(&[a.clone()], |t, v| t.transpose(v[0]));
        check(&[a.clone(), same.clone()], |t, v| t.add(v[0], v[1]));
        check(&[a.clone(), same.clone()], |t, v| t.sub(v[0], v[1]));
        check(&[a.clone(), same.clone()], |t, v| t.mul(v[0], v[1]));
        check(&[a.clone(), row.clone()], |t, v| t.add_row(v[0], v[1]));
        check(&[a.clone()], |t, v| t.scale(v[0], -2.5));
        check(&[a.clone(), random(&[3, 2], 15)], |t, v| t.concat(&[v[0], v[1]]));
        check(&[a.clone()], |t, v| t.softmax_rows(v[0]));
        check(&[a.clone()], |t, v| t.relu(v[0]));
        check(&[a.clone()], |t, v| t.sigmoid(v[0]));
        check(&[a.clone(), random(&[4], 16), row.clone()], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        });
        check(&[a.clone()], |t, v| t.mean(v[0]));
        check(&[a.clone()], |t, v| t.sum(v[0]));
        check(&[a.clone()], |t, v| t.frob_sq(v[0]));
        check(&[a.clone()], |t, v| t.row_norm(v[0]));
        check(&[a.clone()], |t, v| t.row_normalize(v[0]));
        check(&[a.clone()], |t, v| t.cosine_similarity_matrix(v[0]));
        check(&[a.clone(), same.clone()], |t, v| t.row_dot(v[0], v[1]));
        check(&[a.clone(), random(&[3, 1], 17)], |t, v| t.scale_rows(v[0], v[1]));
        let idx: Rc<[usize]> = vec![2, 0, 2, 1, 0].into();
        check(&[a.clone()], |t, v| t.gather_rows(v[0], idx.clone()));
        let dst: Rc<[usize]> = vec![1, 1, 0].into();
        check(&[a.clone()], |t, v| t.scatter_add_rows(v[0], dst.clone(), 3));
        let labels = [0usize, 3, 1];
        check(&[a.clone()], |t, v| t.cross_entropy(v[0], &labels));
    }

    #[test]
    fn bce_gradient() {
        let p = Tensor::vector(vec![0.2, 0.7, 0.5, 0.9]);
        let target = [1.0, 0.0, 1.0, 0.0];
        check(&[p], |t, v| t.bce_sum(v[0], &target, 1e-6));
    }

    #[test]
    fn bce_closed_forms() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::vector(vec![0.5]));
        let l = t.bce_sum(p, &[1.0], 1e-6);
        assert!((t.value(l).item() - 0.693_147_180_56).abs() < 1e-10);
        let q = t.constant(Tensor::vector(vec![0.9]));
        let l = t.bce_sum(q, &[0.0], 1e-6);
        assert!((t.value(l).item() - 2.302_585_093).abs() < 1e-8);
    }

    #[test]
    fn masked_softmax_gradients() {
        let segs = Rc::new(Segments::from_offsets(vec![0, 3, 4, 6]));
        let s = random(&[6, 1], 20);
        check(&[s.clone()], |t, v| t.masked_softmax(v[0], None, segs.clone()));
        let w = Tensor::matrix(6, 1, vec![0.3, 1.0, 0.0, 1.0, 0.7, 0.2]);
        check(&[s, w], |t, v| t.masked_softmax(v[0], Some(v[1]), segs.clone()));
    }

    #[test]
    fn masked_softmax_zero_weight_drops_entry() {
        let segs = Rc::new(Segments::from_offsets(vec![0, 3]));
        let mut t = Tape::new();
        let s = t.constant(Tensor::matrix(3, 1, vec![0.4, 2.0, -1.0]));
        let w = t.constant(Tensor::matrix(3, 1, vec![1.0, 0.0, 1.0]));
        let a = t.masked_softmax(s, Some(w), segs);
        let v = t.value(a).data();
        assert_eq!(v[1], 0.0);
        let z = 0.4f64.exp() + (-1.0f64).exp();
        assert!((v[0] - 0.4f64.exp() / z).abs() < 1e-15);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn straight_through_routes_gradient() {
        let mut t = Tape::new();
        let soft = t.leaf(Tensor::vector(vec![0.3, 0.8]));
        let st = t.straight_through(soft, Tensor::vector(vec![0.0, 1.0]));
        assert_eq!(t.value(st).data(), &[0.0, 1.0]);
        let w = t.constant(Tensor::vector(vec![2.0, -3.0]));
        let m = t.mul(st, w);
        let l = t.sum(m);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(soft).unwrap().data(), &[2.0, -3.0]);
    }

    #[test]
    fn dropout_modes() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[1000], 1.0));
        let same = t.dropout(x, 0.1, false, 3);
        assert_eq!(same, x);
        let d = t.dropout(x, 0.1, true, 3);
        let vals = t.value(d).data().to_vec();
        let zeros = vals.iter().filter(|&&v| v == 0.0).count();
        assert!((50..150).contains(&zeros), "{zeros} zeros");
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12));
        let l = t.sum(d);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data()[..10], vals[..10]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..10_000, rows in 1usize..5, cols in 1usize..6) {
            let mut t = Tape::new();
            let x = t.constant(random(&[rows, cols], seed).map(|v| v * 20.0));
            let s = t.softmax_rows(x);
            for r in 0..rows {
                let sum: f64 = t.value(s).row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn matmul_chain_gradient(seed in 0u64..10_000) {
            let a = random(&[2, 3], seed);
            let b = random(&[3, 3], seed + 1);
            check(&[a, b], |t, v| {
                let m = t.matmul(v[0], v[1]);
                let r = t.sigmoid(m);
                t.layer_norm_free(r)
            });
        }
    }

    impl Tape {
        fn layer_norm_free(&mut self, x: Var) -> Var {
            let c = self.value(x).cols();
            let g = self.constant(Tensor::full(&[c], 1.0));
            let b = self.constant(Tensor::zeros(&[c]));
            self.layer_norm(x, g, b, 1e-5)
        }
    }
}
