//! Dense tensors, reverse-mode differentiation and random streams.

mod array;
mod graph;
mod kernels;
mod rng;

pub use array::Tensor;
pub use graph::{sigmoid, softplus, softplus_inv, xlogx, Graph, Var};
pub use rng::{sample_gaussian, RngState};

pub(crate) use graph::softmax_row;

/// Softmax over the last axis of a plain tensor.
pub fn softmax(t: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(t.numel());
    for row in t.rows() {
        out.extend(softmax_row(row));
    }
    Tensor::new(t.shape(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn random(rng: &mut RngState, shape: &[usize]) -> Tensor {
        sample_gaussian(rng, shape)
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close_grad(analytic: &[f64], numeric: &[f64], what: &str) {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let err = (a - n).abs();
            let rel = err / a.abs().max(n.abs());
            assert!(
                err < 1e-6 || rel < 1e-4,
                "{what}[{i}]: analytic {a} numeric {n}"
            );
        }
    }

    /// Checks d(sum(w * op(x)))/dx for a random projection `w`.
    fn check_unary(
        x: Tensor,
        op: &dyn Fn(&mut Graph, Var) -> Var,
        what: &str,
    ) {
        let mut g = Graph::new();
        let xv = g.param(x.clone()).unwrap();
        let y = op(&mut g, xv);
        let proj = random(&mut RngState::new(99), g.value(y).shape());
        let pv = g.constant(proj.clone()).unwrap();
        let m = g.mul(y, pv).unwrap();
        let loss = g.sum(m);
        g.backward(loss).unwrap();
        let analytic = g.grad(xv).unwrap().data().to_vec();
        let f = |xx: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(xx.clone()).unwrap();
            let y = op(&mut g, xv);
            g.value(y)
                .data()
                .iter()
                .zip(proj.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        assert_close_grad(&analytic, &numeric_grad(&x, &f), what);
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let b = g.constant(Tensor::from_vec(vec![3.0, 4.0])).unwrap();
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2])).unwrap();
        let b = g.constant(Tensor::zeros(vec![3])).unwrap();
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]") && err.contains("[3]"), "{err}");
        let m = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let err = g.matmul(m, m).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn matmul_identity() {
        let mut rng = RngState::new(1);
        let a = random(&mut rng, &[3, 3]);
        let mut eye = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let mut g = Graph::new();
        let e = g.constant(eye).unwrap();
        let av = g.constant(a.clone()).unwrap();
        let p = g.matmul(e, av).unwrap();
        assert_eq!(g.value(p), &a);
    }

    #[test]
    fn conv_of_ones_sums_the_window() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(vec![1, 1, 4, 4])).unwrap();
        let w = g.constant(Tensor::ones(vec![1, 1, 3, 3])).unwrap();
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[9.0; 4]);
    }

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (xs, ws) = (x.shape(), w.shape());
        let oh = (xs[2] + 2 * pad - ws[2]) / stride + 1;
        let ow = (xs[3] + 2 * pad - ws[3]) / stride + 1;
        let mut out = Tensor::zeros(vec![xs[0], ws[0], oh, ow]);
        for n in 0..xs[0] {
            for o in 0..ws[0] {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut s = b.data()[o];
                        for c in 0..xs[1] {
                            for ki in 0..ws[2] {
                                for kj in 0..ws[3] {
                                    let r = (i * stride + ki) as isize - pad as isize;
                                    let q = (j * stride + kj) as isize - pad as isize;
                                    if r < 0 || q < 0 || r >= xs[2] as isize || q >= xs[3] as isize {
                                        continue;
                                    }
                                    s += x.get(&[n, c, r as usize, q as usize])
                                        * w.get(&[o, c, ki, kj]);
                                }
                            }
                        }
                        let off = out.offset(&[n, o, i, j]);
                        out.data_mut()[off] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = RngState::new(3);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let x = random(&mut rng, &[2, 3, 8, 8]);
            let w = random(&mut rng, &[4, 3, 3, 3]);
            let b = random(&mut rng, &[4]);
            let mut g = Graph::new();
            let (xv, wv, bv) = (
                g.constant(x.clone()).unwrap(),
                g.constant(w.clone()).unwrap(),
                g.constant(b.clone()).unwrap(),
            );
            let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
            let want = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(g.value(y).shape(), want.shape());
            assert!(g.value(y).max_abs_diff(&want) < 1e-10);
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = RngState::new(4);
        let x = random(&mut rng, &[2, 2, 5, 5]);
        let w = random(&mut rng, &[3, 2, 3, 3]);
        let b = random(&mut rng, &[3]);
        for &(stride, pad) in &[(1, 1), (2, 0)] {
            let (w2, b2) = (w.clone(), b.clone());
            check_unary(
                x.clone(),
                &move |g, xv| {
                    let wv = g.constant(w2.clone()).unwrap();
                    let bv = g.constant(b2.clone()).unwrap();
                    g.conv2d(xv, wv, Some(bv), stride, pad).unwrap()
                },
                "conv dx",
            );
            let (x2, b2) = (x.clone(), b.clone());
            check_unary(
                w.clone(),
                &move |g, wv| {
                    let xv = g.constant(x2.clone()).unwrap();
                    let bv = g.constant(b2.clone()).unwrap();
                    g.conv2d(xv, wv, Some(bv), stride, pad).unwrap()
                },
                "conv dw",
            );
            let (x2, w2) = (x.clone(), w.clone());
            check_unary(
                b.clone(),
                &move |g, bv| {
                    let xv = g.constant(x2.clone()).unwrap();
                    let wv = g.constant(w2.clone()).unwrap();
                    g.conv2d(xv, wv, Some(bv), stride, pad).unwrap()
                },
                "conv db",
            );
        }
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = RngState::new(5);
        let x = random(&mut rng, &[3, 4]);
        let other = random(&mut rng, &[3, 4]);
        let o1 = other.clone();
        check_unary(x.clone(), &move |g, v| {
            let c = g.constant(o1.clone()).unwrap();
            g.mul(v, c).unwrap()
        }, "mul");
        let o2 = other.clone();
        check_unary(x.clone(), &move |g, v| {
            let c = g.constant(o2.clone()).unwrap();
            g.sub(c, v).unwrap()
        }, "sub");
        check_unary(x.clone(), &|g, v| g.mul(v, v).unwrap(), "square");
        check_unary(x.clone(), &|g, v| g.scale(v, -2.5), "scale");
        check_unary(x.clone(), &|g, v| g.add_scalar(v, 0.7), "add_scalar");
        check_unary(x.clone(), &|g, v| g.relu(v), "relu");
        check_unary(x.clone(), &|g, v| g.softplus(v), "softplus");
        check_unary(x.clone(), &|g, v| g.softmax(v).unwrap(), "softmax");
        check_unary(x.clone(), &|g, v| g.log_softmax(v).unwrap(), "log_softmax");
        let pos = x.map(|v| v.abs() + 0.1);
        check_unary(pos.clone(), &|g, v| g.log(v), "log");
        check_unary(pos, &|g, v| g.xlogx(v), "xlogx");
        check_unary(x.clone(), &|g, v| g.sum(v), "sum");
        check_unary(x.clone(), &|g, v| g.mean(v).unwrap(), "mean");
        check_unary(x.clone(), &|g, v| g.reshape(v, &[4, 3]).unwrap(), "reshape");
        check_unary(x.clone(), &|g, v| g.slice(v, 1, 1, 3).unwrap(), "slice");
        check_unary(x.clone(), &|g, v| g.slice(v, 0, 2, 3).unwrap(), "slice rows");
        let row = random(&mut rng, &[4]);
        check_unary(row, &|g, v| g.broadcast(v, &[3, 4]).unwrap(), "broadcast");
        let col = random(&mut rng, &[3, 1]);
        check_unary(col, &|g, v| g.broadcast(v, &[2, 3, 4]).unwrap(), "broadcast col");
    }

    #[test]
    fn matmul_and_pool_gradients() {
        let mut rng = RngState::new(6);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let b2 = b.clone();
        check_unary(a.clone(), &move |g, v| {
            let c = g.constant(b2.clone()).unwrap();
            g.matmul(v, c).unwrap()
        }, "matmul da");
        check_unary(b, &move |g, v| {
            let c = g.constant(a.clone()).unwrap();
            g.matmul(c, v).unwrap()
        }, "matmul db");
        let x = random(&mut rng, &[2, 3, 6, 6]);
        check_unary(x.clone(), &|g, v| g.max_pool2d(v, 2, 2).unwrap(), "max_pool");
        check_unary(x.clone(), &|g, v| g.mean_pool2d(v, 2, 2).unwrap(), "mean_pool");
        check_unary(x, &|g, v| g.mean_pool2d(v, 3, 1).unwrap(), "mean_pool overlap");
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn inactive_relu_has_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(-5.0)).unwrap();
        let y = g.relu(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        assert!(g.backward(x).is_err(), "non-scalar loss");
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.backward(s).is_err(), "second backward");
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let mut g = Graph::new();
        assert!(g.leaf(Tensor::from_vec(vec![f64::NAN]), true).is_err());
        assert!(g.leaf(Tensor::from_vec(vec![f64::INFINITY]), false).is_err());
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0])).unwrap();
        let b = g.relu(a);
        assert!(!g.requires_grad(b));
        let p = g.param(Tensor::from_vec(vec![1.0])).unwrap();
        let c = g.add(b, p).unwrap();
        assert!(g.requires_grad(c));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = RngState::new(8);
        let x = random(&mut rng, &[50, 7]).map(|v| v * 30.0);
        let s = softmax(&x);
        for row in s.rows() {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let big = t(&[1, 2], &[1000.0, 0.0]);
        let s = softmax(&big);
        assert!(s.is_finite());
        assert_eq!(s.data()[0], 1.0);
    }

    /// Random 3-layer MLP, gradients of every weight against finite
    /// differences.
    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = RngState::new(11);
        let x = random(&mut rng, &[4, 5]);
        let ws: Vec<Tensor> = vec![
            random(&mut rng, &[5, 6]),
            random(&mut rng, &[6, 6]),
            random(&mut rng, &[6, 3]),
        ];
        let labels = [0usize, 2, 1, 2];
        let loss_of = |ws: &[Tensor], g: &mut Graph, vars: &mut Vec<Var>| -> Var {
            let mut h = g.constant(x.clone()).unwrap();
            for (i, w) in ws.iter().enumerate() {
                let wv = g.param(w.clone()).unwrap();
                vars.push(wv);
                h = g.matmul(h, wv).unwrap();
                if i < 2 {
                    h = g.relu(h);
                }
            }
            let ls = g.log_softmax(h).unwrap();
            let mut onehot = Tensor::zeros(vec![4, 3]);
            for (r, &l) in labels.iter().enumerate() {
                onehot.data_mut()[r * 3 + l] = 1.0;
            }
            let oh = g.constant(onehot).unwrap();
            let picked = g.mul(ls, oh).unwrap();
            let s = g.sum(picked);
            g.scale(s, -0.25)
        };
        let mut g = Graph::new();
        let mut vars = Vec::new();
        let loss = loss_of(&ws, &mut g, &mut vars);
        g.backward(loss).unwrap();
        for (li, w) in ws.iter().enumerate() {
            let analytic = g.grad(vars[li]).unwrap().data().to_vec();
            let numeric = numeric_grad(w, &|wi: &Tensor| {
                let mut all = ws.clone();
                all[li] = wi.clone();
                let mut g = Graph::new();
                let l = loss_of(&all, &mut g, &mut Vec::new());
                g.value(l).item().unwrap()
            });
            for (a, n) in analytic.iter().zip(&numeric) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-12);
                assert!(rel < 1e-5 || (a - n).abs() < 1e-9, "layer {li}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = RngState::new(21);
            let x = random(&mut rng, &[3, 2, 6, 6]);
            let w = random(&mut rng, &[4, 2, 3, 3]);
            let mut g = Graph::new();
            let xv = g.param(x).unwrap();
            let wv = g.param(w).unwrap();
            let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
            let y = g.relu(y);
            let y = g.max_pool2d(y, 2, 2).unwrap();
            let l = g.sum(y);
            g.backward(l).unwrap();
            (g.grad(xv).unwrap().clone(), g.grad(wv).unwrap().clone())
        };
        let (a, b) = run();
        let (c, d) = run();
        assert_eq!(a.data(), c.data());
        assert_eq!(b.data(), d.data());
    }
}
