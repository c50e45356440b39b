use ndauto::gradcheck::{check_input_grad, check_param_grads};
use ndauto::tol::GRAD_REL;
use ndauto::{Categorical, ConvGeom, Graph, ParamStore, Real, Tensor, Var};
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0..2.0f64, rows * cols).prop_map(move |d| Tensor::from_rows(rows, cols, d))
}

/// Weights the output so the loss is not symmetric in its entries.
fn weighted<'g>(g: &'g Graph, y: Var<'g>) -> ndauto::Result<Var<'g>> {
    let n = y.value().len();
    let (r, c) = (y.rows(), n / y.rows());
    let w = Tensor::from_rows(r, c, (0..n).map(|i| ((i * 7 % 11) as Real - 5.0) / 5.0).collect());
    Ok(y.mul(g.constant(w))?.sum())
}

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(24)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn matmul_grad(a in tensor(3, 4), b in tensor(4, 2)) {
        let err = check_input_grad(&a, |g, x| weighted(g, x.matmul(g.constant(b.clone()))?)).unwrap();
        prop_assert!(err < GRAD_REL, "{err}");
        let err = check_input_grad(&b, |g, x| weighted(g, g.constant(a.clone()).matmul(x)?)).unwrap();
        prop_assert!(err < GRAD_REL, "{err}");
    }

    #[test]
    fn elementwise_grads(a in tensor(2, 5), b in tensor(2, 5)) {
        let err = check_input_grad(&a, |g, x| {
            let y = x.mul(g.constant(b.clone()))?.add(x.square())?.sub(x.softplus())?;
            weighted(g, y.add(x.exp().scale(0.3))?)
        })
        .unwrap();
        prop_assert!(err < GRAD_REL, "{err}");
    }

    #[test]
    fn ln_grad(a in tensor(2, 3)) {
        let pos = a.map(|v| v.abs() + 0.5);
        let err = check_input_grad(&pos, |g, x| weighted(g, x.ln())).unwrap();
        prop_assert!(err < GRAD_REL, "{err}");
    }

    #[test]
    fn row_broadcast_grads(a in tensor(3, 4), r in tensor(1, 4)) {
        let err = check_input_grad(&r, |g, x| {
            let c = g.constant(a.clone());
            weighted(g, c.mul_row(x)?.add_row(x)?)
        })
        .unwrap();
        prop_assert!(err < GRAD_REL, "{err}");
    }

    #[test]
    fn reductions_grad(a in tensor(3, 4), b in tensor(3, 4)) {
        let err = check_input_grad(&a, |g, x| {
            let d = x.row_dot(g.constant(b.clone()))?;
            d.square().mean().add(x.row_sum().square().sum())
        })
        .unwrap();
        prop_assert!(err < GRAD_REL, "{err}");
    }

    #[test]
    fn layer_norm_grad(a in tensor(3, 6), gain in tensor(1, 6), bias in tensor(1, 6)) {
        let err = check_input_grad(&a, |g, x| {
            weighted(g, x.layer_norm(g.constant(gain.clone()), g.constant(bias.clone()))?)
        })
        .unwrap();
        prop_assert!(err < GRAD_REL, "{err}");
        let mut store = ParamStore::new();
        let gid = store.add("g", gain.clone());
        let bid = store.add("b", bias.clone());
        let err = check_param_grads(&store, |g, s| {
            weighted(g, g.constant(a.clone()).layer_norm(g.param(s, gid), g.param(s, bid))?)
        })
        .unwrap();
        prop_assert!(err < GRAD_REL, "{err}");
    }

    #[test]
    fn l2_normalize_grad(a in tensor(3, 5)) {
        prop_assume!((0..3).all(|r| a.row_slice(r).iter().map(|v| v * v).sum::<Real>() > 0.1));
        let err = check_input_grad(&a, |g, x| weighted(g, x.l2_normalize())).unwrap();
        prop_assert!(err < GRAD_REL, "{err}");
    }

    #[test]
    fn log_softmax_gather_grad(a in tensor(4, 5), idx in prop::collection::vec(0..5usize, 4)) {
        let err = check_input_grad(&a, |g, x| {
            let lp = x.log_softmax();
            lp.gather_cols(&idx)?.sum().add(weighted(g, lp)?)
        })
        .unwrap();
        prop_assert!(err < GRAD_REL, "{err}");
    }

    #[test]
    fn concat_and_index_grad(a in tensor(3, 2), b in tensor(3, 3), idx in prop::collection::vec(0..3usize, 5)) {
        let err = check_input_grad(&a, |g, x| {
            let y = x.concat_cols(g.constant(b.clone()))?.index_rows(&idx)?;
            weighted(g, y)
        })
        .unwrap();
        prop_assert!(err < GRAD_REL, "{err}");
    }

    #[test]
    fn categorical_grads(a in tensor(3, 4), b in tensor(3, 4)) {
        let err = check_input_grad(&a, |g, x| {
            let p = Categorical::new(x)?;
            let q = Categorical::new(g.constant(b.clone()))?;
            weighted(g, p.entropy().add(q.kl_to(&p)?)?.add(p.log_prob(&[0, 3, 1])?)?)
        })
        .unwrap();
        prop_assert!(err < GRAD_REL, "{err}");
    }

    #[test]
    fn conv_grad(x in tensor(2, 2 * 3 * 3), w in tensor(2 * 9, 3), b in tensor(1, 3)) {
        let geom = ConvGeom { in_channels: 2, out_channels: 3, height: 3, width: 3, kernel: 3 };
        let err = check_input_grad(&x, |g, v| {
            weighted(g, v.conv2d(g.constant(w.clone()), g.constant(b.clone()), geom)?)
        })
        .unwrap();
        prop_assert!(err < GRAD_REL, "{err}");
        let mut store = ParamStore::new();
        let wid = store.add("w", w.clone());
        let bid = store.add("b", b.clone());
        let err = check_param_grads(&store, |g, s| {
            weighted(g, g.constant(x.clone()).conv2d(g.param(s, wid), g.param(s, bid), geom)?)
        })
        .unwrap();
        prop_assert!(err < GRAD_REL, "{err}");
    }

    #[test]
    fn minimum_and_clamp_grad(a in tensor(3, 3), b in tensor(3, 3)) {
        // Ties and clamp edges have no derivative.
        prop_assume!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() > 1e-3));
        prop_assume!(a.data().iter().all(|x| (x.abs() - 1.0).abs() > 1e-3));
        let err = check_input_grad(&a, |g, x| {
            weighted(g, x.minimum(g.constant(b.clone()))?.add(x.clamp(-1.0, 1.0))?)
        })
        .unwrap();
        prop_assert!(err < GRAD_REL, "{err}");
    }

    #[test]
    fn detach_blocks_gradient(a in tensor(2, 2)) {
        let g = Graph::new();
        let x = g.leaf(a.clone().requiring_grad());
        let loss = x.detach().square().sum().add(x.sum()).unwrap();
        let grads = g.backward(loss).unwrap();
        prop_assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
    }
}

#[test]
fn l2_normalized_rows_have_unit_norm() {
    let g = Graph::new();
    let x = g.constant(Tensor::from_rows(2, 3, vec![3.0, 0.0, 4.0, -1.0, 2.0, 2.0]));
    let y = x.l2_normalize().to_tensor();
    for r in 0..2 {
        let n: Real = y.row_slice(r).iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-6);
    }
}
