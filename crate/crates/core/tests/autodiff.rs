mod common;

use common::{gradcheck, randn, FD_REL_TOL};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use signtok::autodiff::{ConvGeom, Tape};
use signtok::nn::{Linear, ParamStore, Session};
use signtok::optim::{Adam, AdamConfig};
use signtok::Tensor;

const POINTS: usize = 12;

fn check(name: &str, worst: f64) {
    assert!(worst < FD_REL_TOL, "{name}: worst rel err {worst:e}");
}

#[test]
fn matmul_identity_and_gradient() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::identity(2));
    let b = t.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    // d/dA sum(A B) = row sums of B^T, i.e. every row of the gradient is B's row sums.
    let mut t = Tape::new();
    let a = t.variable(Tensor::identity(2));
    let b = t.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let c = t.matmul(a, b).unwrap();
    let s = t.sum(c).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[3.0, 7.0, 3.0, 7.0]);

    let worst = gradcheck(&[randn(&[3, 4], 1), randn(&[4, 2], 2)], POINTS, 3, |t, v| t.matmul(v[0], v[1]));
    check("matmul", worst);
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros([2, 3]));
    let b = t.constant(Tensor::zeros([2, 3]));
    assert!(matches!(t.matmul(a, b), Err(signtok::Error::Shape(_))));
}

#[test]
fn bmm_gradient() {
    let worst = gradcheck(&[randn(&[2, 3, 4], 4), randn(&[2, 4, 5], 5)], POINTS, 6, |t, v| t.bmm(v[0], v[1]));
    check("bmm", worst);
}

#[test]
fn conv_identity_zero_and_gradient() {
    let x = randn(&[1, 1, 5, 5], 7);
    let mut t = Tape::new();
    let xi = t.constant(x.clone());
    let k = t.constant(Tensor::full([1, 1, 1, 1], 1.0));
    let y = t.conv2d(xi, k, ConvGeom::new((1, 1), (0, 0))).unwrap();
    assert_eq!(t.value(y), &x);

    let zi = t.constant(Tensor::zeros([1, 2, 6, 6]));
    let k = t.constant(randn(&[3, 2, 3, 3], 8));
    let y = t.conv2d(zi, k, ConvGeom::same(3)).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));

    let worst = gradcheck(&[randn(&[1, 2, 8, 8], 9), randn(&[3, 2, 3, 3], 10)], POINTS, 11, |t, v| {
        t.conv2d(v[0], v[1], ConvGeom::same(3))
    });
    check("conv2d same", worst);

    let worst = gradcheck(&[randn(&[2, 2, 8, 8], 12), randn(&[3, 2, 3, 3], 13)], POINTS, 14, |t, v| {
        t.conv2d(v[0], v[1], ConvGeom::new((2, 1), (1, 1)))
    });
    check("conv2d strided", worst);
}

#[test]
fn conv_output_dims_and_errors() {
    let g = ConvGeom::new((2, 2), (1, 1));
    assert_eq!(g.output_dims(8, 8, 3, 3).unwrap(), (4, 4));
    let tight = ConvGeom::new((1, 1), (0, 0));
    assert!(tight.output_dims(2, 2, 3, 3).is_err());
    assert!(ConvGeom::new((0, 1), (0, 0)).output_dims(4, 4, 1, 1).is_err());
}

#[test]
fn activation_values() {
    let mut t = Tape::new();
    let z = t.constant(Tensor::scalar(0.0));
    let s = t.sigmoid(z).unwrap();
    assert_eq!(t.value(s).item().unwrap(), 0.5);

    let c = t.constant(Tensor::full([3, 7], 2.5));
    let p = t.softmax(c).unwrap();
    for &v in t.value(p).data() {
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }
    let r = t.constant(randn(&[4, 9], 15));
    let p = t.softmax(r).unwrap();
    for row in t.value(p).data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn elementwise_gradients() {
    let x = || randn(&[17], 16);
    check("sigmoid", gradcheck(&[x()], POINTS, 1, |t, v| t.sigmoid(v[0])));
    check("silu", gradcheck(&[x()], POINTS, 2, |t, v| t.silu(v[0])));
    check("gelu", gradcheck(&[x()], 17, 3, |t, v| t.gelu(v[0])));
    check("tanh", gradcheck(&[x()], POINTS, 4, |t, v| t.tanh(v[0])));
    check("scale", gradcheck(&[x()], POINTS, 5, |t, v| t.scale(v[0], -1.7)));
    check("add_scalar", gradcheck(&[x()], POINTS, 6, |t, v| t.add_scalar(v[0], 0.3)));
    let y = || randn(&[17], 17);
    check("add", gradcheck(&[x(), y()], POINTS, 7, |t, v| t.add(v[0], v[1])));
    check("sub", gradcheck(&[x(), y()], POINTS, 8, |t, v| t.sub(v[0], v[1])));
    check("mul", gradcheck(&[x(), y()], POINTS, 9, |t, v| t.mul(v[0], v[1])));
}

#[test]
fn softmax_and_layer_norm_gradients() {
    check("softmax", gradcheck(&[randn(&[3, 6], 20)], POINTS, 1, |t, v| t.softmax(v[0])));
    let worst = gradcheck(&[randn(&[4, 6], 21), randn(&[6], 22), randn(&[6], 23)], POINTS, 2, |t, v| {
        t.layer_norm(v[0], v[1], v[2])
    });
    check("layer_norm", worst);
}

#[test]
fn bias_and_shape_op_gradients() {
    check(
        "add_row_bias",
        gradcheck(&[randn(&[3, 4], 30), randn(&[4], 31)], POINTS, 1, |t, v| t.add_row_bias(v[0], v[1])),
    );
    check(
        "add_channel_bias",
        gradcheck(&[randn(&[2, 3, 2, 2], 32), randn(&[3], 33)], POINTS, 2, |t, v| {
            t.add_channel_bias(v[0], v[1])
        }),
    );
    check("reshape", gradcheck(&[randn(&[2, 6], 34)], POINTS, 3, |t, v| t.reshape(v[0], &[3, 4])));
    check(
        "permute",
        gradcheck(&[randn(&[2, 3, 4], 35)], POINTS, 4, |t, v| t.permute(v[0], &[2, 0, 1])),
    );
    check(
        "concat",
        gradcheck(&[randn(&[2, 3, 2], 36), randn(&[2, 1, 2], 37)], POINTS, 5, |t, v| {
            t.concat(&[v[0], v[1]], 1)
        }),
    );
    check("narrow", gradcheck(&[randn(&[3, 5], 38)], POINTS, 6, |t, v| t.narrow(v[0], 1, 1, 3)));
    check("gather", gradcheck(&[randn(&[5, 3], 39)], POINTS, 7, |t, v| t.gather(v[0], &[4, 0, 4, 2])));
    check("tile", gradcheck(&[randn(&[1, 2, 3], 40)], POINTS, 8, |t, v| t.tile(v[0], 3)));
    check("upsample", gradcheck(&[randn(&[1, 2, 2, 3], 41)], POINTS, 9, |t, v| t.upsample(v[0], 2, 1)));
    check("sum", gradcheck(&[randn(&[4, 2], 42)], POINTS, 10, |t, v| t.sum(v[0])));
    check("mean", gradcheck(&[randn(&[4, 2], 43)], POINTS, 11, |t, v| t.mean(v[0])));
}

#[test]
fn loss_values_and_gradients() {
    let mut t = Tape::new();
    let x = t.constant(randn(&[5, 3], 50));
    let l = t.mse(x, x).unwrap();
    assert_eq!(t.value(l).item().unwrap(), 0.0);

    let u = t.constant(Tensor::zeros([1, 625]));
    let ce = t.cross_entropy(u, &[17]).unwrap();
    assert!((t.value(ce).item().unwrap() - 625f64.ln()).abs() < 1e-12);
    assert!((t.value(ce).item().unwrap() - 6.4378).abs() < 1e-4);
    assert!(matches!(t.cross_entropy(u, &[625]), Err(signtok::Error::Argument(_))));

    check("mse", gradcheck(&[randn(&[3, 4], 51), randn(&[3, 4], 52)], POINTS, 1, |t, v| t.mse(v[0], v[1])));
    check(
        "cross_entropy",
        gradcheck(&[randn(&[4, 7], 53)], POINTS, 2, |t, v| t.cross_entropy(v[0], &[0, 6, 3, 3])),
    );
    check(
        "weighted_cross_entropy",
        gradcheck(&[randn(&[3, 5], 54)], POINTS, 3, |t, v| {
            t.weighted_cross_entropy(v[0], &[1, 2, 4], &[0.2, 0.5, 0.3])
        }),
    );
}

#[test]
fn attention_gradient() {
    let worst = gradcheck(
        &[randn(&[2, 3, 4], 60), randn(&[2, 5, 4], 61), randn(&[2, 5, 4], 62)],
        POINTS,
        1,
        |t, v| t.attention(v[0], v[1], v[2], None),
    );
    check("attention", worst);
}

#[test]
fn sum_gradient_is_ones_and_backward_needs_scalar() {
    let mut t = Tape::new();
    let x = t.variable(randn(&[3, 3], 70));
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(matches!(t.backward(x), Err(signtok::Error::Contract(_))));
}

#[test]
fn non_finite_values_are_rejected() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full([2], 1e308));
    assert!(matches!(t.scale(x, 10.0), Err(signtok::Error::NonFinite(_))));
}

/// Whole-graph backward of `sum(tanh(A x) * w)` versus chaining the three
/// per-op backward rules by hand.
#[test]
fn composed_graph_matches_manual_chain_rule() {
    let a = randn(&[3, 4], 80);
    let x = randn(&[4, 1], 81);
    let w = randn(&[3, 1], 82);

    let mut t = Tape::new();
    let av = t.variable(a.clone());
    let xv = t.variable(x.clone());
    let wv = t.constant(w.clone());
    let h = t.matmul(av, xv).unwrap();
    let y = t.tanh(h).unwrap();
    let z = t.mul(y, wv).unwrap();
    let loss = t.sum(z).unwrap();
    let g = t.backward(loss).unwrap();

    // Manual: dL/dz = 1, dL/dy = w, dL/dh = w * (1 - tanh^2), dA = dh x^T, dx = A^T dh.
    let hval = t.value(h).data().to_vec();
    let dh: Vec<f64> = (0..3).map(|i| w.data()[i] * (1.0 - hval[i].tanh().powi(2))).collect();
    for i in 0..3 {
        for j in 0..4 {
            let expect = dh[i] * x.data()[j];
            assert!((g.get(av).unwrap().data()[i * 4 + j] - expect).abs() < 1e-14);
        }
    }
    for j in 0..4 {
        let expect: f64 = (0..3).map(|i| a.data()[i * 4 + j] * dh[i]).sum();
        assert!((g.get(xv).unwrap().data()[j] - expect).abs() < 1e-14);
    }
}

fn train_mlp(seed: u64, steps: usize) -> (Vec<f64>, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let l1 = Linear::new(&mut store, "l1", 3, 16, &mut rng);
    let l2 = Linear::new(&mut store, "l2", 16, 1, &mut rng);
    let xs = Tensor::randn([8, 3], 1.0, &mut rng);
    let ys = Tensor::from_fn([8, 1], |i| (xs.data()[i * 3] - 0.5 * xs.data()[i * 3 + 2]).sin());
    let mut opt = Adam::new(&store, AdamConfig::with_lr(1e-2));
    let mut losses = Vec::new();
    for _ in 0..steps {
        let grads = {
            let mut s = Session::training(&store);
            let x = s.constant(xs.clone());
            let y = s.constant(ys.clone());
            let h = l1.forward(&mut s, x).unwrap();
            let h = s.silu(h).unwrap();
            let p = l2.forward(&mut s, h).unwrap();
            let loss = s.mse(p, y).unwrap();
            losses.push(s.value(loss).item().unwrap());
            s.param_grads(loss).unwrap()
        };
        opt.step(&mut store, &grads).unwrap();
    }
    (losses, store)
}

#[test]
fn mlp_loss_decreases_over_fifty_steps() {
    let (losses, _) = train_mlp(3, 50);
    assert!(losses[49] < losses[0], "{} !< {}", losses[49], losses[0]);
}

#[test]
fn identical_seed_gives_bit_identical_training() {
    let (la, sa) = train_mlp(11, 20);
    let (lb, sb) = train_mlp(11, 20);
    assert_eq!(la, lb);
    assert_eq!(sa, sb);
}
