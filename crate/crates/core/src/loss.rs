//! Similarity distribution matching (bidirectional row KL over in-batch
//! cosine similarities) and the symmetric contrastive baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, softmax_rows, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Sdm,
    Itc,
    SdmPlusItc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub epsilon: f64,
    pub kind: LossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.02,
            epsilon: 1e-8,
            kind: LossKind::Sdm,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::config(format!(
                "tau ({}) and epsilon ({}) must be positive",
                self.tau, self.epsilon
            )));
        }
        Ok(())
    }
}

/// Row-wise softmax of `S/τ`.
pub fn match_probabilities(s: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("tau must be positive, got {tau}")));
    }
    Ok(softmax_rows(&s.scale(1.0 / tau)))
}

/// Row-wise log-softmax of `S/τ`, computed without forming `p` first.
fn log_match_probabilities(s: &Tensor, tau: f64) -> Tensor {
    let mut out = s.scale(1.0 / tau);
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Row-normalized labels.
pub fn true_distribution(y: &Tensor) -> Result<Tensor> {
    let mut q = y.clone();
    for i in 0..q.rows() {
        let row = q.row_mut(i);
        if row.iter().any(|&v| v < 0.0) {
            return Err(Error::Label(format!("row {i} has a negative label")));
        }
        let total: f64 = row.iter().sum();
        if total == 0.0 {
            return Err(Error::Label(format!("row {i} has no positive match")));
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(q)
}

/// `(1/N)·Σᵢ Σⱼ pᵢⱼ·log(pᵢⱼ / (qᵢⱼ + ε))`.
pub fn kl_rows(p: &Tensor, q: &Tensor, epsilon: f64) -> Result<f64> {
    check_square_pair(p, q)?;
    let n = p.rows() as f64;
    let total: f64 = p
        .data()
        .iter()
        .zip(q.data())
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv / (qv + epsilon)).ln())
        .sum();
    Ok(total / n)
}

/// Row-averaged `KL(q‖p) = Σ q·log(q/p)` with `0·log 0 = 0`.
///
/// For one-hot `q` this is exactly the cross-entropy `−log p_target`; it is
/// the definition under which the contrastive loss and a KL objective
/// coincide (the forward direction `KL(p‖q)` differs by the entropy of `p`).
pub fn reverse_kl_rows(p: &Tensor, q: &Tensor) -> Result<f64> {
    check_square_pair(p, q)?;
    let n = p.rows() as f64;
    let total: f64 = p
        .data()
        .iter()
        .zip(q.data())
        .filter(|(_, &qv)| qv > 0.0)
        .map(|(&pv, &qv)| qv * (qv / pv).ln())
        .sum();
    Ok(total / n)
}

fn check_square_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "expected matching matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// One-directional SDM on similarities `s` against target rows `q`.
/// Returns the loss and `dL/dS`.
pub fn sdm_loss(s: &Tensor, q: &Tensor, tau: f64, epsilon: f64) -> Result<(f64, Tensor)> {
    check_square_pair(s, q)?;
    let p = match_probabilities(s, tau)?;
    let log_p = log_match_probabilities(s, tau);
    let n = s.rows();
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(s.shape());
    for i in 0..n {
        let a: Vec<f64> = log_p
            .row(i)
            .iter()
            .zip(q.row(i))
            .map(|(lp, qv)| lp - (qv + epsilon).ln())
            .collect();
        let pr = p.row(i);
        let mean: f64 = pr.iter().zip(&a).map(|(pv, av)| pv * av).sum();
        loss += mean;
        for (g, (pv, av)) in grad.row_mut(i).iter_mut().zip(pr.iter().zip(&a)) {
            *g = pv * (av - mean) / (tau * n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}

/// Symmetric cross-entropy against the diagonal, one direction.
fn itc_direction(s: &Tensor, tau: f64) -> (f64, Tensor) {
    let n = s.rows();
    let p = softmax_rows(&s.scale(1.0 / tau));
    let log_p = log_match_probabilities(s, tau);
    let loss = -(0..n).map(|i| log_p.at(i, i)).sum::<f64>() / n as f64;
    let mut grad = p;
    for i in 0..n {
        let v = grad.at(i, i) - 1.0;
        grad.set(i, i, v);
    }
    (loss, grad.scale(1.0 / (tau * n as f64)))
}

/// Loss value with gradients for both embedding matrices.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    pub image_to_text: f64,
    pub text_to_image: f64,
    pub d_image: Tensor,
    pub d_text: Tensor,
}

fn check_embeddings(fv: &Tensor, ft: &Tensor) -> Result<()> {
    if fv.shape() != ft.shape() || fv.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "embedding batches differ: {:?} vs {:?}",
            fv.shape(),
            ft.shape()
        )));
    }
    for (name, f) in [("image", fv), ("text", ft)] {
        for i in 0..f.rows() {
            let norm = f.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!(
                    "{name} embedding {i} has norm {norm}, expected 1"
                )));
            }
        }
    }
    Ok(())
}

fn embedding_grads(fv: &Tensor, ft: &Tensor, ds: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((matmul(ds, ft)?, matmul(&ds.transpose(), fv)?))
}

/// Bidirectional SDM on unit-norm embeddings.
pub fn bidirectional_sdm(fv: &Tensor, ft: &Tensor, y: &Tensor, cfg: &LossConfig) -> Result<LossOutput> {
    check_embeddings(fv, ft)?;
    bidirectional_sdm_raw(fv, ft, y, cfg)
}

/// As [`bidirectional_sdm`] without the unit-norm contract, for probing
/// the loss at perturbed embeddings.
pub fn bidirectional_sdm_raw(
    fv: &Tensor,
    ft: &Tensor,
    y: &Tensor,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let s = matmul_nt(fv, ft)?;
    let (i2t, ds_i2t) = sdm_loss(&s, &true_distribution(y)?, cfg.tau, cfg.epsilon)?;
    let (t2i, ds_t2i) = sdm_loss(
        &s.transpose(),
        &true_distribution(&y.transpose())?,
        cfg.tau,
        cfg.epsilon,
    )?;
    let ds = ds_i2t.add(&ds_t2i.transpose())?;
    let (d_image, d_text) = embedding_grads(fv, ft, &ds)?;
    Ok(LossOutput {
        total: i2t + t2i,
        image_to_text: i2t,
        text_to_image: t2i,
        d_image,
        d_text,
    })
}

/// Symmetric InfoNCE with the i-th image matching the i-th text.
pub fn itc_loss(fv: &Tensor, ft: &Tensor, tau: f64) -> Result<LossOutput> {
    check_embeddings(fv, ft)?;
    itc_loss_raw(fv, ft, tau)
}

pub fn itc_loss_raw(fv: &Tensor, ft: &Tensor, tau: f64) -> Result<LossOutput> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("tau must be positive, got {tau}")));
    }
    let s = matmul_nt(fv, ft)?;
    let (i2t, ds_i2t) = itc_direction(&s, tau);
    let (t2i, ds_t2i) = itc_direction(&s.transpose(), tau);
    let ds = ds_i2t.add(&ds_t2i.transpose())?;
    let (d_image, d_text) = embedding_grads(fv, ft, &ds)?;
    Ok(LossOutput {
        total: i2t + t2i,
        image_to_text: i2t,
        text_to_image: t2i,
        d_image,
        d_text,
    })
}

/// Dispatches on `cfg.kind`. ITC uses the diagonal as its targets; `y`
/// must then carry the diagonal as a positive.
pub fn batch_loss(fv: &Tensor, ft: &Tensor, y: &Tensor, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    match cfg.kind {
        LossKind::Sdm => bidirectional_sdm(fv, ft, y, cfg),
        LossKind::Itc => itc_loss(fv, ft, cfg.tau),
        LossKind::SdmPlusItc => {
            let a = bidirectional_sdm(fv, ft, y, cfg)?;
            let b = itc_loss(fv, ft, cfg.tau)?;
            Ok(LossOutput {
                total: a.total + b.total,
                image_to_text: a.image_to_text + b.image_to_text,
                text_to_image: a.text_to_image + b.text_to_image,
                d_image: a.d_image.add(&b.d_image)?,
                d_text: a.d_text.add(&b.d_text)?,
            })
        }
    }
}

/// `yᵢⱼ = 1` iff the i-th image and j-th text share an identity.
pub fn identity_labels(image_ids: &[usize], text_ids: &[usize]) -> Tensor {
    let mut y = Tensor::zeros(&[image_ids.len(), text_ids.len()]);
    for (i, a) in image_ids.iter().enumerate() {
        for (j, b) in text_ids.iter().enumerate() {
            if a == b {
                y.set(i, j, 1.0);
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::randn(&[n, d], 1.0, &mut r);
        for i in 0..n {
            let norm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            t.row_mut(i).iter_mut().for_each(|v| *v /= norm);
        }
        t
    }

    fn fd_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor) -> Tensor {
        let h = 1e-5;
        let mut g = Tensor::zeros(x.shape());
        for k in 0..x.len() {
            let mut a = x.clone();
            a.data_mut()[k] += h;
            let mut b = x.clone();
            b.data_mut()[k] -= h;
            g.data_mut()[k] = (f(&a) - f(&b)) / (2.0 * h);
        }
        g
    }

    fn rel(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| crate::gradcheck::relative_error(*x, *y))
            .fold(0.0, f64::max)
    }

    #[test]
    fn equal_similarities_give_uniform_rows() {
        let p = match_probabilities(&Tensor::filled(&[3, 4], 0.3), 0.02).unwrap();
        assert!(p.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn sharp_two_by_two() {
        let p = match_probabilities(&Tensor::identity(2), 0.02).unwrap();
        let expected = 1.0 / (1.0 + (-50.0f64).exp());
        assert!((p.at(0, 0) - expected).abs() < 1e-16);
        assert!((p.at(0, 1) - (-50.0f64).exp() / (1.0 + (-50.0f64).exp())).abs() < 1e-30);
    }

    #[test]
    fn huge_temperature_is_uniform() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let s = Tensor::randn(&[5, 5], 0.5, &mut r).map(|v| v.clamp(-1.0, 1.0));
        let p = match_probabilities(&s, 1e6).unwrap();
        assert!(p.data().iter().all(|v| (v - 0.2).abs() < 1e-6));
    }

    #[test]
    fn label_rows_normalize() {
        let y = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![1.0, 0.0, 1.0, 0.0],
            vec![1.0, 1.0, 1.0, 1.0],
        ]);
        let q = true_distribution(&y).unwrap();
        assert_eq!(q.row(0), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(q.row(1), &[0.5, 0.0, 0.5, 0.0]);
        assert_eq!(q.row(2), &[0.25; 4]);
        let bad = Tensor::from_rows(&[vec![0.0, 0.0]]);
        assert!(matches!(true_distribution(&bad), Err(Error::Label(_))));
    }

    #[test]
    fn two_by_two_reference_value() {
        let p = Tensor::filled(&[2, 2], 0.5);
        let q = Tensor::identity(2);
        let eps = 1e-8;
        let row = 0.5 * (0.5f64 / (1.0 + eps)).ln() + 0.5 * (0.5f64 / eps).ln();
        assert!((kl_rows(&p, &q, eps).unwrap() - row).abs() < 1e-14);
        // Same value through the similarity route with equal similarities.
        let (l, _) = sdm_loss(&Tensor::zeros(&[2, 2]), &q, 0.02, eps).unwrap();
        assert!((l - row).abs() < 1e-12);
    }

    #[test]
    fn self_divergence_is_near_zero() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let s = Tensor::randn(&[6, 6], 0.3, &mut r);
        let p = match_probabilities(&s, 0.1).unwrap();
        let (l, _) = sdm_loss(&s, &p, 0.1, 1e-8).unwrap();
        assert!(l.abs() <= 1e-5, "{l}");
    }

    #[test]
    fn sdm_gradient_matches_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let s = Tensor::randn(&[5, 5], 0.3, &mut r);
        let y = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0, 1.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 1.0],
        ]);
        let q = true_distribution(&y).unwrap();
        for tau in [1.0, 0.1] {
            let (_, g) = sdm_loss(&s, &q, tau, 1e-8).unwrap();
            let fd = fd_grad(|x| sdm_loss(x, &q, tau, 1e-8).unwrap().0, &s);
            assert!(rel(&g, &fd) < 1e-4, "tau {tau}: {}", rel(&g, &fd));
        }
    }

    #[test]
    fn bidirectional_gradients_match_differences() {
        let fv = unit_rows(4, 6, 3);
        let ft = unit_rows(4, 6, 4);
        let y = identity_labels(&[0, 1, 0, 2], &[0, 1, 0, 2]);
        let cfg = LossConfig {
            tau: 0.5,
            ..LossConfig::default()
        };
        let out = bidirectional_sdm(&fv, &ft, &y, &cfg).unwrap();
        let fd_v = fd_grad(|x| bidirectional_sdm_raw(x, &ft, &y, &cfg).unwrap().total, &fv);
        let fd_t = fd_grad(|x| bidirectional_sdm_raw(&fv, x, &y, &cfg).unwrap().total, &ft);
        assert!(rel(&out.d_image, &fd_v) < 1e-4);
        assert!(rel(&out.d_text, &fd_t) < 1e-4);
    }

    #[test]
    fn itc_gradients_match_differences() {
        let fv = unit_rows(4, 6, 5);
        let ft = unit_rows(4, 6, 6);
        let out = itc_loss(&fv, &ft, 0.3).unwrap();
        let fd_v = fd_grad(|x| itc_loss_raw(x, &ft, 0.3).unwrap().total, &fv);
        let fd_t = fd_grad(|x| itc_loss_raw(&fv, x, 0.3).unwrap().total, &ft);
        assert!(rel(&out.d_image, &fd_v) < 1e-4);
        assert!(rel(&out.d_text, &fd_t) < 1e-4);
    }

    #[test]
    fn symmetric_setup_has_equal_directions() {
        let f = unit_rows(5, 8, 7);
        let out = bidirectional_sdm(&f, &f, &Tensor::identity(5), &LossConfig::default()).unwrap();
        assert_eq!(out.image_to_text, out.text_to_image);
    }

    #[test]
    fn swapping_towers_keeps_total() {
        let fv = unit_rows(5, 8, 8);
        let ft = unit_rows(5, 8, 9);
        let y = identity_labels(&[0, 1, 2, 1, 3], &[0, 1, 2, 1, 3]);
        let cfg = LossConfig::default();
        let a = bidirectional_sdm(&fv, &ft, &y, &cfg).unwrap().total;
        let b = bidirectional_sdm(&ft, &fv, &y, &cfg).unwrap().total;
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
    }

    /// Orthonormal rows: matched cosine 1, unmatched 0.
    fn separated(n: usize) -> Tensor {
        Tensor::identity(n)
    }

    #[test]
    fn separated_batch_has_negligible_loss() {
        let fv = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let cfg = LossConfig::default();
        let y = Tensor::identity(2);
        assert!(bidirectional_sdm(&fv, &fv, &y, &cfg).unwrap().total < 1e-6);
        assert!(itc_loss(&fv, &fv, cfg.tau).unwrap().total < 1e-6);
        let f = separated(4);
        assert!(bidirectional_sdm(&f, &f, &Tensor::identity(4), &cfg).unwrap().total < 1e-6);
    }

    #[test]
    fn contract_rejects_unnormalized_embeddings() {
        let f = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]);
        let err = bidirectional_sdm(&f, &f, &Tensor::identity(2), &LossConfig::default());
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn itc_orthonormal_reference() {
        let n = 4;
        let f = separated(n);
        let tau = 0.5;
        let margin: f64 = 1.0 / tau;
        let expected = 2.0 * -(margin - (margin.exp() + (n - 1) as f64).ln());
        assert!((itc_loss(&f, &f, tau).unwrap().total - expected).abs() < 1e-12);
    }

    #[test]
    fn single_pair_itc_is_zero() {
        let f = Tensor::from_rows(&[vec![0.6, 0.8]]);
        assert_eq!(itc_loss(&f, &f, 0.02).unwrap().total, 0.0);
    }

    #[test]
    fn itc_equals_kl_on_matched_definition() {
        let fv = unit_rows(6, 5, 10);
        let ft = unit_rows(6, 5, 11);
        let tau = 0.2;
        let s = matmul_nt(&fv, &ft).unwrap();
        let p = match_probabilities(&s, tau).unwrap();
        let pt = match_probabilities(&s.transpose(), tau).unwrap();
        let q = Tensor::identity(6);
        let kl = reverse_kl_rows(&p, &q).unwrap() + reverse_kl_rows(&pt, &q).unwrap();
        assert!((itc_loss(&fv, &ft, tau).unwrap().total - kl).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn probabilities_rows_sum_to_one(vals in prop::collection::vec(-1.0f64..1.0, 16), tau in 0.01f64..2.0) {
            let p = match_probabilities(&Tensor::new(vec![4, 4], vals).unwrap(), tau).unwrap();
            for i in 0..4 {
                prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn sdm_is_bounded_below(vals in prop::collection::vec(-1.0f64..1.0, 25), mask in prop::collection::vec(any::<bool>(), 25)) {
            let s = Tensor::new(vec![5, 5], vals).unwrap();
            let mut y = Tensor::identity(5);
            for (k, m) in mask.iter().enumerate() {
                if *m { y.data_mut()[k] = 1.0; }
            }
            let q = true_distribution(&y).unwrap();
            let (l, _) = sdm_loss(&s, &q, 0.02, 1e-8).unwrap();
            prop_assert!(l >= -1e-5);
        }

        #[test]
        fn raising_matched_similarity_never_hurts(vals in prop::collection::vec(-1.0f64..1.0, 25), target in 0usize..5) {
            let s = Tensor::new(vec![5, 5], vals).unwrap();
            let mut y = Tensor::zeros(&[5, 5]);
            for i in 0..5 { y.set(i, (i + target) % 5, 1.0); }
            let q = true_distribution(&y).unwrap();
            let h = 1e-6;
            let mut up = s.clone();
            let j = target % 5;
            up.set(0, j, s.at(0, j) + h);
            let before = sdm_loss(&s, &q, 0.02, 1e-8).unwrap().0;
            let after = sdm_loss(&up, &q, 0.02, 1e-8).unwrap().0;
            // ε bounds how far the loss can rise once a row is already matched.
            prop_assert!((after - before) / h <= 1e-6, "{}", (after - before) / h);
        }
    }
}
