//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the function on perturbed constant
//! inputs, so it shares no code with the backward rules it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::Result;
use crate::params::{Param, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates probed per tensor; all of them when the tensor is smaller.
    pub max_coords: usize,
    pub seed: u64,
    /// Norm floor under which both gradients count as zero.
    pub zero_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            max_coords: 24,
            seed: 0,
            zero_floor: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub coords: usize,
    pub analytic_norm: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn merge(&mut self, other: GradReport) {
        self.entries.extend(other.entries);
    }

    /// Entries whose relative error reaches `tol` or is NaN.
    pub fn failures(&self, tol: f64) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| e.rel_err.is_nan() || e.rel_err >= tol).collect()
    }
}

/// `|a - n| / max(|a|, |n|)` over the probed coordinates.
fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < floor {
        0.0
    } else {
        diff / scale
    }
}

fn probe_coords(len: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    if len <= opts.max_coords {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut idx = sample(&mut rng, len, opts.max_coords).into_vec();
    idx.sort_unstable();
    idx
}

/// Checks gradients of scalar `f` with respect to each input tensor.
pub fn check_inputs(
    f: impl Fn(&[Var]) -> Result<Var>,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradReport> {
    let leaves: Vec<Var> = inputs.iter().cloned().map(Var::leaf).collect();
    let grads = f(&leaves)?.backward()?;
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let consts: Vec<Var> = vals.iter().cloned().map(Var::constant).collect();
        Ok(f(&consts)?.item())
    };
    let mut report = GradReport::default();
    for (i, leaf) in leaves.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape().to_vec());
        let analytic = grads.wrt(leaf).unwrap_or(&zero);
        let coords = probe_coords(inputs[i].len(), opts, i as u64);
        let mut vals = inputs.to_vec();
        let mut a = Vec::with_capacity(coords.len());
        let mut n = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = inputs[i].data()[c];
            vals[i].data_mut()[c] = orig + opts.step;
            let plus = eval(&vals)?;
            vals[i].data_mut()[c] = orig - opts.step;
            let minus = eval(&vals)?;
            vals[i].data_mut()[c] = orig;
            n.push((plus - minus) / (2.0 * opts.step));
            a.push(analytic.data()[c]);
        }
        report.entries.push(GradCheckEntry {
            name: format!("input{i}"),
            coords: coords.len(),
            analytic_norm: a.iter().map(|v| v * v).sum::<f64>().sqrt(),
            rel_err: relative_error(&a, &n, opts.zero_floor),
        });
    }
    Ok(report)
}

/// Checks gradients of scalar `f(store)` with respect to trainable parameters.
///
/// `f` must bind the store with tracking enabled. `only`, when given, limits
/// the check to those parameters.
pub fn check_params(
    store: &mut ParamStore,
    f: impl Fn(&ParamStore) -> Result<Var>,
    only: Option<&[Param]>,
    opts: &GradCheckOptions,
) -> Result<GradReport> {
    let grads = f(store)?.backward()?;
    let targets: Vec<Param> = match only {
        Some(list) => list.to_vec(),
        None => store.trainable().collect(),
    };
    let mut report = GradReport::default();
    for (k, p) in targets.into_iter().enumerate() {
        let zero = Tensor::zeros(store.value(p).shape().to_vec());
        let analytic = grads.param(store.id(p)).cloned().unwrap_or(zero);
        let coords = probe_coords(analytic.len(), opts, 1000 + k as u64);
        let mut a = Vec::with_capacity(coords.len());
        let mut n = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = store.value(p).data()[c];
            store.value_mut(p).data_mut()[c] = orig + opts.step;
            let plus = f(store)?.item();
            store.value_mut(p).data_mut()[c] = orig - opts.step;
            let minus = f(store)?.item();
            store.value_mut(p).data_mut()[c] = orig;
            n.push((plus - minus) / (2.0 * opts.step));
            a.push(analytic.data()[c]);
        }
        report.entries.push(GradCheckEntry {
            name: store.name(p).to_string(),
            coords: coords.len(),
            analytic_norm: a.iter().map(|v| v * v).sum::<f64>().sqrt(),
            rel_err: relative_error(&a, &n, opts.zero_floor),
        });
    }
    Ok(report)
}
