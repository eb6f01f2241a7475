use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slotgen_tensor::gradcheck::check;
use slotgen_tensor::{ParamId, ParamStore, Tensor, Vars};

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn store_with(shapes: &[&[usize]], seed: u64) -> (ParamStore, Vec<ParamId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, sh)| s.add(format!("p{i}"), sh, randn(&mut rng, sh.iter().product())))
        .collect();
    (s, ids)
}

/// Weighted sum so that every output coordinate gets a distinct cotangent.
fn probe(t: &Tensor) -> Tensor {
    let w: Vec<f64> = (0..t.numel()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
    t.mul(&Tensor::from_vec(w, t.shape())).sum_all()
}

fn assert_grad(shapes: &[&[usize]], f: impl Fn(&Vars, &[ParamId]) -> Tensor) {
    let (store, ids) = store_with(shapes, 11);
    let r = check(&store, &ids, 64, 1e-5, 1e-4, |v| probe(&f(v, &ids)));
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn binary_broadcast_ops() {
    assert_grad(&[&[2, 3, 4], &[3, 1]], |v, p| v[p[0]].mul(&v[p[1]]).add(&v[p[1]]).sub(&v[p[0]]));
    assert_grad(&[&[2, 3], &[3]], |v, p| v[p[0]].div(&v[p[1]].square().add_scalar(1.0)));
}

#[test]
fn unary_ops() {
    assert_grad(&[&[5, 4]], |v, p| v[p[0]].exp().add(&v[p[0]].tanh()).add(&v[p[0]].sigmoid()));
    assert_grad(&[&[5, 4]], |v, p| v[p[0]].gelu());
    assert_grad(&[&[5, 4]], |v, p| v[p[0]].square().add_scalar(0.5).ln().add(&v[p[0]].square().add_scalar(0.1).sqrt()));
}

#[test]
fn reductions_and_shapes() {
    assert_grad(&[&[2, 3, 4]], |v, p| v[p[0]].sum_axis(1, false).mul(&v[p[0]].mean_axis(1, false)));
    assert_grad(&[&[2, 3, 4]], |v, p| v[p[0]].permute(&[2, 0, 1]).reshape(&[4, 6]).narrow(1, 1, 3));
    assert_grad(&[&[2, 3], &[2, 2]], |v, p| Tensor::cat(&[v[p[0]].clone(), v[p[1]].clone()], 1).square());
    assert_grad(&[&[3, 1]], |v, p| v[p[0]].broadcast_to(&[2, 3, 4]).square());
    assert_grad(&[&[5, 3]], |v, p| v[p[0]].index_select_rows(&[4, 0, 4, 2]).square());
    assert_grad(&[&[3, 5]], |v, p| v[p[0]].log_softmax_last().gather_last(&[1, 4, 0]));
}

#[test]
fn matmuls() {
    assert_grad(&[&[2, 3, 4], &[4, 5]], |v, p| v[p[0]].matmul(&v[p[1]]));
    assert_grad(&[&[2, 3, 4], &[2, 4, 5]], |v, p| v[p[0]].matmul(&v[p[1]]));
    assert_grad(&[&[2, 3, 4], &[2, 5, 4]], |v, p| v[p[0]].matmul_nt(&v[p[1]]));
    assert_grad(&[&[3, 4], &[5, 4]], |v, p| v[p[0]].matmul_nt(&v[p[1]]));
}

#[test]
fn softmax_and_layer_norm() {
    assert_grad(&[&[4, 6]], |v, p| v[p[0]].softmax_last());
    assert_grad(&[&[4, 6]], |v, p| v[p[0]].log_softmax_last());
    assert_grad(&[&[3, 6], &[6], &[6]], |v, p| v[p[0]].layer_norm(&v[p[1]], &v[p[2]], 1e-5));
}

#[test]
fn convolutions() {
    assert_grad(&[&[2, 3, 6, 5], &[4, 3, 3, 3], &[4]], |v, p| {
        v[p[0]].conv2d(&v[p[1]], Some(&v[p[2]]), 1, 1)
    });
    assert_grad(&[&[2, 3, 8, 8], &[4, 3, 2, 2], &[4]], |v, p| {
        v[p[0]].conv2d(&v[p[1]], Some(&v[p[2]]), 2, 0)
    });
    assert_grad(&[&[2, 3, 4, 3], &[3, 2, 2, 2], &[2]], |v, p| {
        v[p[0]].conv_transpose2d(&v[p[1]], Some(&v[p[2]]), 2, 0)
    });
    assert_grad(&[&[1, 2, 4, 4], &[2, 3, 4, 4]], |v, p| v[p[0]].conv_transpose2d(&v[p[1]], None, 2, 1));
}

#[test]
fn pooling() {
    assert_grad(&[&[2, 2, 5, 5]], |v, p| v[p[0]].max_pool2d(3, 2, 1));
    assert_grad(&[&[2, 2, 5, 5]], |v, p| v[p[0]].avg_pool2d(3, 1, 1, false));
    assert_grad(&[&[2, 2, 6, 6]], |v, p| v[p[0]].avg_pool2d(2, 2, 0, true));
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_transpose(y)> for shared weights
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_vec(randn(&mut rng, 2 * 3 * 8 * 8), &[2, 3, 8, 8]);
    let w = Tensor::from_vec(randn(&mut rng, 4 * 3 * 4 * 4), &[4, 3, 4, 4]);
    let cx = x.conv2d(&w, None, 2, 1);
    let y = Tensor::from_vec(randn(&mut rng, cx.numel()), cx.shape());
    let ty = y.conv_transpose2d(&w, None, 2, 1);
    assert_eq!(ty.shape(), x.shape());
    let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
}

#[test]
fn no_grad_builds_no_graph() {
    let (store, ids) = store_with(&[&[3]], 1);
    let vars = store.bind();
    let y = slotgen_tensor::no_grad(|| vars[ids[0]].square().sum_all());
    assert!(!y.requires_grad());
}
