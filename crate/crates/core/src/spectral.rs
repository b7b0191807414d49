//! Spectral normalization by power iteration.
//!
//! Each normalized weight `W` (viewed as `(out, rest)`) carries a persistent
//! block of up to [`SN_BLOCK`] orthonormal left-vector estimates, stored as
//! rows. [`power_iterate`] refines the block by subspace iteration and rotates
//! it so that the first row is the best top-vector estimate `u`. The forward
//! pass divides `W` by `sigma = |W^T u|`, which equals `u^T W v` with
//! `v = W^T u / |W^T u|`.
//!
//! A single vector stalls when the two largest singular values are close or
//! swap during training; the extra rows keep the top few directions in play.

use nalgebra::DMatrix;

use crate::autograd::fused_right_vector;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, MatRef, Tensor};

/// Largest number of left vectors tracked per normalized weight.
pub const SN_BLOCK: usize = 4;

fn as_matrix(w: &Tensor) -> (usize, usize) {
    let rows = w.shape()[0];
    (rows, w.len() / rows.max(1))
}

/// One power-iteration step: `v = norm(W^T u)`, returns `norm(W v)`.
pub fn power_iteration_step(w: &Tensor, u: &[f64]) -> Vec<f64> {
    let (rows, cols) = as_matrix(w);
    let (v, _) = fused_right_vector(w.data(), rows, cols, u);
    let wd = w.data();
    let mut next: Vec<f64> = (0..rows)
        .map(|i| wd[i * cols..(i + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum())
        .collect();
    let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        next.iter_mut().for_each(|x| *x /= norm);
        next
    } else {
        u.to_vec()
    }
}

/// The singular value estimate `|W^T u|` used by the forward pass.
pub fn estimate_sigma(w: &Tensor, u: &[f64]) -> f64 {
    let (rows, cols) = as_matrix(w);
    fused_right_vector(w.data(), rows, cols, u).1
}

/// Runs `iters` power iterations and returns `(W / sigma, sigma, u)`.
pub fn spectral_normalize(w: &Tensor, u: &[f64], iters: usize) -> (Tensor, f64, Vec<f64>) {
    let mut u = u.to_vec();
    for _ in 0..iters {
        u = power_iteration_step(w, &u);
    }
    let sigma = estimate_sigma(w, &u);
    (w.scale(1.0 / sigma.max(1e-12)), sigma, u)
}

/// Block size used for a weight with `rows` output channels.
pub fn block_size(rows: usize) -> usize {
    rows.clamp(1, SN_BLOCK)
}

/// `iters` subspace-iteration steps on the `(k, rows)` block `u`, followed by
/// a Rayleigh-Ritz rotation that orders the rows by singular value estimate.
pub fn block_power_iterate(w: &Tensor, u: &Tensor, iters: usize) -> Result<Tensor> {
    let (rows, cols) = as_matrix(w);
    let k = u.len() / rows.max(1);
    if k == 0 || u.len() != k * rows {
        return Err(Error::shape(format!(
            "spectral block of {} values for weight {:?}",
            u.len(),
            w.shape()
        )));
    }
    if iters == 0 {
        return Ok(u.clone());
    }
    let m = DMatrix::from_row_slice(rows, cols, w.data());
    // Columns of `q` are the block vectors.
    let mut q = DMatrix::from_row_slice(k, rows, u.data()).transpose();
    for _ in 0..iters {
        let y = &m * (m.transpose() * &q);
        if y.norm() < 1e-12 {
            return Ok(u.clone());
        }
        q = y.qr().q();
    }
    let b = q.transpose() * &m;
    let eig = (&b * b.transpose()).symmetric_eigen();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let rot = DMatrix::from_fn(k, k, |i, j| eig.eigenvectors[(i, order[j])]);
    let ritz = q * rot;
    // Column-major storage lists the Ritz vectors one after another.
    Tensor::new(u.shape().to_vec(), ritz.iter().copied().collect())
}

/// Advances every registered block of `store` by `iters` steps.
pub fn power_iterate(store: &mut ParamStore, iters: usize) -> Result<()> {
    for &(w, u) in store.spectral_pairs().to_vec().iter() {
        let next = block_power_iterate(store.value(w), store.value(u), iters)?;
        store.set(u, next)?;
    }
    Ok(())
}

/// The `k` leading unit left singular vectors as rows of a `(k, rows)`
/// tensor, from the eigendecomposition of `W W^T`.
pub fn top_left_singular_vectors(w: &Tensor, k: usize) -> Tensor {
    let (rows, cols) = as_matrix(w);
    let k = k.clamp(1, rows.max(1));
    let mut gram = vec![0.0; rows * rows];
    gemm(
        rows,
        cols,
        rows,
        1.0,
        MatRef::row_major(w.data(), cols),
        MatRef::transposed(w.data(), cols),
        0.0,
        &mut gram,
        rows,
    );
    let eig = DMatrix::from_row_slice(rows, rows, &gram).symmetric_eigen();
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let mut out = Vec::with_capacity(k * rows);
    for &c in &order[..k] {
        out.extend(eig.eigenvectors.column(c).iter());
    }
    Tensor::from_parts(vec![k, rows], out)
}

/// Unit left singular vector for the largest singular value.
pub fn top_left_singular_vector(w: &Tensor) -> Vec<f64> {
    let rows = as_matrix(w).0;
    let mut u = top_left_singular_vectors(w, 1).data().to_vec();
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        u.iter_mut().for_each(|x| *x /= norm);
    } else {
        u = vec![0.0; rows];
        u[0] = 1.0;
    }
    u
}

/// Largest singular value by full SVD.
pub fn top_singular_value(w: &Tensor) -> f64 {
    let (rows, cols) = as_matrix(w);
    let m = DMatrix::from_row_slice(rows, cols, w.data());
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scaled_identity_normalizes_to_identity() {
        let w = Tensor::from_fn([4, 4], |i| if i % 5 == 0 { 3.0 } else { 0.0 });
        let (wn, sigma, _) = spectral_normalize(&w, &[0.5, 0.5, 0.5, 0.5], 1);
        assert!((sigma - 3.0).abs() < 1e-12);
        let eye = Tensor::from_fn([4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        assert!(wn.max_abs_diff(&eye) < 1e-12);
    }

    #[test]
    fn rank_one_is_exact_after_one_step() {
        let a = [1.0, -2.0, 0.5];
        let b = [0.3, 0.4, 1.2, -0.7];
        let c = 2.5;
        let w = Tensor::from_fn([3, 4], |i| c * a[i / 4] * b[i % 4]);
        let (_, sigma, _) = spectral_normalize(&w, &[0.2, 0.9, -0.1], 1);
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((sigma - c * na * nb).abs() < 1e-12);
    }

    #[test]
    fn exact_vector_gives_exact_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Tensor::uniform([32, 256], -0.1, 0.1, &mut rng);
        let u = top_left_singular_vector(&w);
        assert!((estimate_sigma(&w, &u) - top_singular_value(&w)).abs() < 1e-10);
        let zero = top_left_singular_vector(&Tensor::zeros([3, 2]));
        assert!((zero.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fifty_iterations_match_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Tensor::randn([8, 8], &mut rng);
        let u0 = Tensor::randn([8], &mut rng);
        let (wn, sigma, _) = spectral_normalize(&w, u0.data(), 50);
        assert!((sigma - top_singular_value(&w)).abs() < 1e-4);
        assert!(top_singular_value(&wn) <= 1.0 + 1e-3);
    }

    #[test]
    fn block_escapes_a_near_degenerate_top_pair() {
        // Singular values 1.0 and 0.998 on the first two axes; start on the
        // second one, where a single vector barely moves in 50 steps.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let diag = [1.0, 0.998, 0.5, 0.4, 0.3, 0.2];
        let w = Tensor::from_fn([6, 6], |i| if i % 7 == 0 { diag[i / 7] } else { 0.0 });
        let mut start = Tensor::randn([4, 6], &mut rng).scale(1e-3);
        start.data_mut()[1] = 1.0;
        let (_, single, _) = spectral_normalize(&w, &start.data()[..6], 50);
        assert!(single < 0.9995, "{single}");
        let block = block_power_iterate(&w, &start, 50).unwrap();
        assert_eq!(block.shape(), &[4, 6]);
        assert!((estimate_sigma(&w, &block.data()[..6]) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn block_rows_stay_orthonormal_and_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::randn([7, 20], &mut rng);
        let u = block_power_iterate(&w, &Tensor::randn([4, 7], &mut rng), 30).unwrap();
        let rows: Vec<&[f64]> = u.data().chunks(7).collect();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
        let sig: Vec<f64> = rows.iter().map(|r| estimate_sigma(&w, r)).collect();
        assert!(sig.windows(2).all(|p| p[0] >= p[1]), "{sig:?}");
        assert!(block_power_iterate(&w, &Tensor::zeros([3, 5]), 1).is_err());
    }

    #[test]
    fn warm_start_block_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::uniform([16, 40], -0.2, 0.2, &mut rng);
        let u = top_left_singular_vectors(&w, 4);
        assert_eq!(u.shape(), &[4, 16]);
        assert!((estimate_sigma(&w, &u.data()[..16]) - top_singular_value(&w)).abs() < 1e-10);
        assert_eq!(top_left_singular_vectors(&Tensor::zeros([2, 3]), 4).shape(), &[2, 2]);
    }
}
