use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check_inputs, GradCheckOptions};

const TOL: f64 = 1e-4;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), &mut ChaCha8Rng::seed_from_u64(seed))
}

fn assert_grad(f: impl Fn(&[Var]) -> Result<Var>, inputs: &[Tensor]) {
    let report = check_inputs(f, inputs, &GradCheckOptions::default()).unwrap();
    for e in &report.entries {
        assert!(e.rel_err < TOL, "{} rel err {}", e.name, e.rel_err);
        assert!(e.analytic_norm > 0.0, "{} has zero gradient", e.name);
    }
}

#[test]
fn broadcast_arithmetic_grads() {
    let a = rand_t(&[2, 3, 4, 4], 1);
    let b = rand_t(&[2, 3, 1, 1], 2);
    let c = rand_t(&[2, 1, 4, 4], 3);
    assert_grad(
        |v| Ok(v[0].mul(&v[1])?.add(&v[2])?.sub(&v[1])?.square().mean()),
        &[a, b, c],
    );
}

#[test]
fn unary_grads() {
    let x = rand_t(&[3, 5], 4);
    assert_grad(|v| Ok(v[0].leaky_relu(0.2).sigmoid().tanh().square().sum()), std::slice::from_ref(&x));
    assert_grad(|v| Ok(v[0].abs().mul_scalar(1.5).add_scalar(0.3).square().sum()), std::slice::from_ref(&x));
    assert_grad(|v| Ok(v[0].mul_scalar(0.5).clamp(-0.7, 0.7).square().sum()), std::slice::from_ref(&x));
    assert_grad(|v| Ok(v[0].square().add_scalar(0.5).reciprocal()?.sum()), &[x]);
    assert!(Var::constant(Tensor::zeros([2])).reciprocal().is_err());
}

#[test]
fn linear_and_matmul_grads() {
    let x = rand_t(&[3, 4], 5);
    let w = rand_t(&[6, 4], 6);
    let b = rand_t(&[6], 7);
    assert_grad(|v| Ok(v[0].linear(&v[1], Some(&v[2]))?.tanh().sum()), &[x.clone(), w, b]);
    let m = rand_t(&[4, 2], 8);
    assert_grad(|v| Ok(v[0].matmul(&v[1])?.square().sum()), &[x, m]);
}

#[test]
fn conv_grads_over_specs() {
    for (i, &(k, s, p)) in [(3, 1, 1), (4, 2, 1), (1, 1, 0), (3, 2, 1)].iter().enumerate() {
        let x = rand_t(&[2, 3, 6, 5], 10 + i as u64);
        let w = rand_t(&[4, 3, k, k], 20 + i as u64);
        let b = rand_t(&[4], 30 + i as u64);
        assert_grad(
            |v| Ok(v[0].conv2d(&v[1], Some(&v[2]), Conv2dSpec::new(s, p))?.square().mean()),
            &[x, w, b],
        );
    }
}

#[test]
fn resampling_grads() {
    let x = rand_t(&[1, 2, 3, 5], 40);
    assert_grad(|v| Ok(v[0].upsample_nearest(2)?.square().sum()), std::slice::from_ref(&x));
    assert_grad(|v| Ok(v[0].resize_bilinear(7, 4)?.square().sum()), std::slice::from_ref(&x));
    assert_grad(|v| Ok(v[0].resize_bilinear(2, 2)?.square().sum()), &[x]);
}

#[test]
fn fused_grads() {
    let x = rand_t(&[2, 3, 4, 4], 50);
    let w = rand_t(&[2, 3, 4, 4], 51);
    assert_grad(|v| Ok(v[0].instance_norm(1e-5)?.mul(&v[1])?.sum()), &[x, w]);
    let r = rand_t(&[3, 6], 52);
    let s = rand_t(&[3, 6], 53);
    assert_grad(|v| Ok(v[0].l2_normalize_rows()?.row_dot(&v[1])?.sum()), &[r, s]);
    let wt = rand_t(&[4, 3, 3, 3], 54);
    let u = rand_t(&[4], 55);
    let probe = rand_t(&[4, 3, 3, 3], 56);
    assert_grad(
        move |v| Ok(v[0].spectral_normalize(&u)?.mul(&Var::constant(probe.clone()))?.sum()),
        &[wt],
    );
}

#[test]
fn shape_ops_grads() {
    let a = rand_t(&[2, 2, 3, 3], 60);
    let b = rand_t(&[2, 1, 3, 3], 61);
    let e = rand_t(&[2, 3], 62);
    assert_grad(
        |v| {
            let t = v[2].tile_spatial(3, 3)?;
            Ok(Var::concat(&[v[0].clone(), v[1].clone(), t], 1)?
                .gather_rows(&[1, 0, 1])?
                .square()
                .sum())
        },
        &[a, b, e],
    );
    let m = rand_t(&[2, 3, 4, 5], 63);
    assert_grad(|v| Ok(v[0].mean_axes(&[1, 3])?.square().sum()), std::slice::from_ref(&m));
    assert_grad(|v| Ok(v[0].reshape([6, 20])?.square().mean()), &[m]);
}

#[test]
fn constants_do_not_track() {
    let a = Var::constant(Tensor::ones([2]));
    let b = a.mul_scalar(2.0).square().sum();
    assert!(!b.requires_grad());
    assert_eq!(b.backward().unwrap().param_count(), 0);
}

#[test]
fn shared_leaf_accumulates() {
    let x = Var::leaf(Tensor::scalar(3.0));
    let y = x.mul(&x).unwrap().add(&x).unwrap();
    let g = y.backward().unwrap();
    assert_eq!(g.wrt(&x).unwrap().item(), 7.0);
}

#[test]
fn backward_requires_scalar() {
    let x = Var::leaf(Tensor::ones([2]));
    assert!(x.square().backward().is_err());
}
