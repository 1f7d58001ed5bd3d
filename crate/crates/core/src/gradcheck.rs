//! Finite-difference gradient oracle.
//!
//! The oracle only ever calls the forward loss. Analytical gradients come
//! from a separate closure, so the two routes never share code beyond the
//! parameter storage.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::ParamTensor;

/// Anything that owns named parameter tensors.
pub trait HasParams {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ParamTensor)>);
    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut ParamTensor)>,
    );

    fn params(&self) -> Vec<(String, &ParamTensor)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut ParamTensor)> {
        let mut out = Vec::new();
        self.collect_params_mut("", &mut out);
        out
    }

    fn zero_grads(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }
}

impl HasParams for ParamTensor {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ParamTensor)>) {
        out.push((prefix.to_string(), self));
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut ParamTensor)>,
    ) {
        out.push((prefix.to_string(), self));
    }
}

impl<T: HasParams> HasParams for Option<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ParamTensor)>) {
        if let Some(inner) = self {
            inner.collect_params(prefix, out);
        }
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut ParamTensor)>,
    ) {
        if let Some(inner) = self {
            inner.collect_params_mut(prefix, out);
        }
    }
}

/// Joins a parent prefix and a child name with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates probed per tensor; tensors smaller than this are probed exhaustively.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            samples_per_tensor: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub trainable: bool,
    pub coords_checked: usize,
    /// Worst `|g_a − g_fd| / max(1e-8, |g_a| + |g_fd|)` over probed coordinates.
    pub max_rel_err: f64,
    /// Largest accumulated gradient magnitude; must be zero for frozen tensors.
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.tensors
            .iter()
            .filter(|t| t.trainable)
            .fold(0.0, |m, t| m.max(t.max_rel_err))
    }

    pub fn frozen_grads_zero(&self) -> bool {
        self.tensors
            .iter()
            .filter(|t| !t.trainable)
            .all(|t| t.max_abs_grad == 0.0)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.worst() < tol && self.frozen_grads_zero()
    }

    pub fn get(&self, name: &str) -> Option<&TensorCheck> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares analytical gradients against central differences.
///
/// `loss` must be a pure function of the model's parameter values.
/// `backward` must leave `dL/dθ` in every trainable tensor's `grad`
/// (grads are zeroed before it runs).
pub fn check_gradient<M: HasParams>(
    model: &mut M,
    loss: impl Fn(&M) -> f64,
    backward: impl FnOnce(&mut M),
    opts: GradCheckOptions,
) -> Result<GradReport> {
    let base = loss(model);
    let again = loss(model);
    if base.to_bits() != again.to_bits() {
        return Err(Error::OracleInvalid(format!(
            "loss is not deterministic: {base} then {again}"
        )));
    }
    if !base.is_finite() {
        return Err(Error::OracleInvalid(format!("loss is not finite: {base}")));
    }

    model.zero_grads();
    backward(model);

    let grads: Vec<(String, bool, Vec<f64>)> = model
        .params()
        .into_iter()
        .map(|(n, p)| (n, p.trainable, p.grad.data().to_vec()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradReport::default();
    for (idx, (name, trainable, grad)) in grads.iter().enumerate() {
        let max_abs_grad = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !trainable {
            report.tensors.push(TensorCheck {
                name: name.clone(),
                trainable: false,
                coords_checked: 0,
                max_rel_err: 0.0,
                max_abs_grad,
            });
            continue;
        }
        let coords: Vec<usize> = if grad.len() <= opts.samples_per_tensor {
            (0..grad.len()).collect()
        } else {
            sample(&mut rng, grad.len(), opts.samples_per_tensor).into_vec()
        };
        let mut worst = 0.0f64;
        for &c in &coords {
            let orig = nudge(model, idx, c, None);
            nudge(model, idx, c, Some(orig + opts.step));
            let plus = loss(model);
            nudge(model, idx, c, Some(orig - opts.step));
            let minus = loss(model);
            nudge(model, idx, c, Some(orig));
            let fd = (plus - minus) / (2.0 * opts.step);
            worst = worst.max(relative_error(grad[c], fd));
        }
        report.tensors.push(TensorCheck {
            name: name.clone(),
            trainable: true,
            coords_checked: coords.len(),
            max_rel_err: worst,
            max_abs_grad,
        });
    }
    Ok(report)
}

/// Reads coordinate `c` of parameter `idx`, optionally overwriting it.
fn nudge<M: HasParams>(model: &mut M, idx: usize, c: usize, value: Option<f64>) -> f64 {
    let mut params = model.params_mut();
    let p = &mut params[idx].1;
    let old = p.value.data()[c];
    if let Some(v) = value {
        p.value.data_mut()[c] = v;
    }
    old
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct Quadratic {
        x: ParamTensor,
        frozen: ParamTensor,
    }

    impl HasParams for Quadratic {
        fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ParamTensor)>) {
            self.x.collect_params(&join(prefix, "x"), out);
            self.frozen.collect_params(&join(prefix, "frozen"), out);
        }
        fn collect_params_mut<'a>(
            &'a mut self,
            prefix: &str,
            out: &mut Vec<(String, &'a mut ParamTensor)>,
        ) {
            self.x.collect_params_mut(&join(prefix, "x"), out);
            self.frozen.collect_params_mut(&join(prefix, "frozen"), out);
        }
    }

    fn quadratic() -> Quadratic {
        Quadratic {
            x: ParamTensor::trainable(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()),
            frozen: ParamTensor::frozen(Tensor::new(vec![1], vec![3.0]).unwrap()),
        }
    }

    fn loss(q: &Quadratic) -> f64 {
        q.x.value.data().iter().map(|v| v * v).sum::<f64>() * q.frozen.scalar_value()
    }

    #[test]
    fn quadratic_is_exact() {
        let mut q = quadratic();
        let report = check_gradient(
            &mut q,
            loss,
            |q| {
                let g = q.x.value.scale(2.0 * q.frozen.scalar_value());
                q.x.accumulate(&g);
                q.frozen.accumulate(&Tensor::scalar(5.0));
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(q.x.grad.data(), &[6.0, 12.0]);
        assert!(report.get("x").unwrap().max_rel_err < 1e-6);
        let frozen = report.get("frozen").unwrap();
        assert!(!frozen.trainable);
        assert_eq!(frozen.max_abs_grad, 0.0);
        assert!(report.passes(1e-4));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut q = quadratic();
        let report = check_gradient(
            &mut q,
            loss,
            |q| q.x.accumulate(&Tensor::new(vec![2], vec![6.0, 11.0]).unwrap()),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passes(1e-4));
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0u32);
        let mut q = quadratic();
        let err = check_gradient(
            &mut q,
            |q| {
                calls.set(calls.get() + 1);
                loss(q) + calls.get() as f64
            },
            |_| {},
            GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::OracleInvalid(_)));
    }
}
