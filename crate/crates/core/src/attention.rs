//! Multi-head attention with optional low-rank key/value updates and a
//! scaled prefix.
//!
//! The prefix path prepends `P_k`/`P_v` rows to every head's keys and
//! values. After the row softmax over `[P_k; K']`, the prefix columns are
//! multiplied by the bank's scale `S_p` before mixing `[P_v; V']`. Written
//! per head that is
//!
//! ```text
//! h ← (1 − λ)·h + S_p·λ·softmax(q·P_kᵀ)·P_v
//! ```
//!
//! with `λ` the share of exp-mass landing on prefix columns. The
//! decomposed form is implemented separately in [`decomposed_prefix_heads`]
//! and is only used as an oracle.

use rand::Rng;

use crate::adapter::Sublayer;
use crate::error::{Error, Result};
use crate::gradcheck::{join, HasParams};
use crate::tensor::{matmul, matmul_nt, matmul_tn, softmax_rows, softmax_rows_backward, ParamTensor, Tensor};

/// Frozen projection weights of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_q: ParamTensor,
    pub w_k: ParamTensor,
    pub w_v: ParamTensor,
    pub w_o: ParamTensor,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn new<R: Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        let std = 1.0 / (d as f64).sqrt();
        let mut w = || ParamTensor::frozen(Tensor::randn(&[d, d], std, rng));
        Ok(Self {
            w_q: w(),
            w_k: w(),
            w_v: w(),
            w_o: w(),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.value.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.dim() {
            return Err(Error::shape(format!(
                "attention input {:?} does not match width {}",
                x.shape(),
                self.dim()
            )));
        }
        Ok(())
    }
}

impl HasParams for AttentionWeights {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ParamTensor)>) {
        out.push((join(prefix, "w_q"), &self.w_q));
        out.push((join(prefix, "w_k"), &self.w_k));
        out.push((join(prefix, "w_v"), &self.w_v));
        out.push((join(prefix, "w_o"), &self.w_o));
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut ParamTensor)>,
    ) {
        out.push((join(prefix, "w_q"), &mut self.w_q));
        out.push((join(prefix, "w_k"), &mut self.w_k));
        out.push((join(prefix, "w_v"), &mut self.w_v));
        out.push((join(prefix, "w_o"), &mut self.w_o));
    }
}

/// Low-rank additive update `s·W_down·W_up` for a `[d×d]` projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub down: ParamTensor,
    pub up: ParamTensor,
    pub scale: ParamTensor,
}

impl LoraPair {
    /// `W_down ~ N(0, 0.02)`, `W_up = 0`, `s = 1`, all trainable.
    pub fn new<R: Rng + ?Sized>(d: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank >= d {
            return Err(Error::config(format!(
                "LoRA rank {rank} must satisfy 0 < r < d = {d}"
            )));
        }
        Ok(Self {
            down: ParamTensor::trainable(Tensor::randn(&[d, rank], 0.02, rng)),
            up: ParamTensor::trainable(Tensor::zeros(&[rank, d])),
            scale: ParamTensor::trainable(Tensor::scalar(1.0)),
        })
    }

    pub fn rank(&self) -> usize {
        self.down.value.cols()
    }

    /// `s·W_down·W_up`.
    pub fn delta(&self) -> Result<Tensor> {
        Ok(matmul(&self.down.value, &self.up.value)?.scale(self.scale.scalar_value()))
    }

    fn check(&self, d: usize) -> Result<()> {
        let r = self.rank();
        if r >= d {
            return Err(Error::config(format!(
                "LoRA rank {r} is not below width {d}"
            )));
        }
        if self.down.value.shape() != [d, r] || self.up.value.shape() != [r, d] {
            return Err(Error::shape(format!(
                "LoRA factors {:?}/{:?} do not fit width {d}",
                self.down.value.shape(),
                self.up.value.shape()
            )));
        }
        Ok(())
    }
}

impl HasParams for LoraPair {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ParamTensor)>) {
        out.push((join(prefix, "down"), &self.down));
        out.push((join(prefix, "up"), &self.up));
        out.push((join(prefix, "scale"), &self.scale));
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut ParamTensor)>,
    ) {
        out.push((join(prefix, "down"), &mut self.down));
        out.push((join(prefix, "up"), &mut self.up));
        out.push((join(prefix, "scale"), &mut self.scale));
    }
}

/// Prefix key/value rows plus the scale applied to their attention weight.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixBank {
    pub keys: ParamTensor,
    pub values: ParamTensor,
    pub scale: ParamTensor,
}

impl PrefixBank {
    /// Keys and values `~ N(0, 0.02)`; scale starts at `scale_init`.
    pub fn new<R: Rng + ?Sized>(len: usize, d: usize, scale_init: f64, rng: &mut R) -> Self {
        Self {
            keys: ParamTensor::trainable(Tensor::randn(&[len, d], 0.02, rng)),
            values: ParamTensor::trainable(Tensor::randn(&[len, d], 0.02, rng)),
            scale: ParamTensor::trainable(Tensor::scalar(scale_init)),
        }
    }

    /// Assembles a bank from explicit tensors. A non-empty key set without
    /// matching values is a configuration error.
    pub fn from_parts(keys: Tensor, values: Option<Tensor>, scale: f64) -> Result<Self> {
        let values = match values {
            Some(v) => v,
            None if keys.rows() == 0 => Tensor::zeros(keys.shape()),
            None => {
                return Err(Error::config(
                    "prefix has keys but no values (P_v missing)",
                ))
            }
        };
        if values.shape() != keys.shape() {
            return Err(Error::config(format!(
                "prefix keys {:?} and values {:?} differ in shape",
                keys.shape(),
                values.shape()
            )));
        }
        Ok(Self {
            keys: ParamTensor::trainable(keys),
            values: ParamTensor::trainable(values),
            scale: ParamTensor::trainable(Tensor::scalar(scale)),
        })
    }

    pub fn len(&self) -> usize {
        self.keys.value.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl HasParams for PrefixBank {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ParamTensor)>) {
        out.push((join(prefix, "keys"), &self.keys));
        out.push((join(prefix, "values"), &self.values));
        out.push((join(prefix, "scale"), &self.scale));
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut ParamTensor)>,
    ) {
        out.push((join(prefix, "keys"), &mut self.keys));
        out.push((join(prefix, "values"), &mut self.values));
        out.push((join(prefix, "scale"), &mut self.scale));
    }
}

/// Content-token visibility. Prefix rows are visible to every query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    None,
    Causal,
}

impl AttnMask {
    fn hides(self, query: usize, key: usize) -> bool {
        matches!(self, AttnMask::Causal) && key > query
    }
}

/// `xW + s·(x·W_down)·W_up`.
pub fn lora_project(x: &Tensor, w: &ParamTensor, lora: &LoraPair) -> Result<Tensor> {
    lora.check(w.value.rows())?;
    let base = matmul(x, &w.value)?;
    let low = matmul(&matmul(x, &lora.down.value)?, &lora.up.value)?;
    let mut out = base;
    out.add_scaled(&low, lora.scale.scalar_value())?;
    Ok(out)
}

/// Folds the low-rank update into a plain weight: `W + s·W_down·W_up`.
pub fn merge_lora(w: &Tensor, lora: &LoraPair) -> Result<Tensor> {
    lora.check(w.rows())?;
    w.add(&lora.delta()?)
}

/// Forward values kept for [`attention_backward`].
#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Tensor,
    q: Tensor,
    x_down_k: Option<Tensor>,
    x_down_v: Option<Tensor>,
    /// Per head: `[P_k; K']` and `[P_v; V']` slices.
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
    /// Per head softmax weights before the prefix scale, `[n × (l+n)]`.
    probs: Vec<Tensor>,
    /// Concatenated head outputs before `W_o`.
    heads_out: Tensor,
    prefix_len: usize,
    prefix_scale: f64,
}

impl AttentionCache {
    /// Softmax weights of head `h` before the prefix columns are scaled.
    pub fn probs(&self, head: usize) -> &Tensor {
        &self.probs[head]
    }

    pub fn heads_out(&self) -> &Tensor {
        &self.heads_out
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }
}

fn project(x: &Tensor, w: &ParamTensor, lora: Option<&LoraPair>) -> Result<(Tensor, Option<Tensor>)> {
    match lora {
        None => Ok((matmul(x, &w.value)?, None)),
        Some(l) => {
            l.check(w.value.rows())?;
            let x_down = matmul(x, &l.down.value)?;
            let mut out = matmul(x, &w.value)?;
            out.add_scaled(&matmul(&x_down, &l.up.value)?, l.scale.scalar_value())?;
            Ok((out, Some(x_down)))
        }
    }
}

/// Full forward pass: LoRA-adapted projections, prefix concatenation,
/// masked softmax, prefix scaling and the output projection.
pub fn attention_forward(
    x: &Tensor,
    w: &AttentionWeights,
    prefix: Option<&PrefixBank>,
    lora_k: Option<&LoraPair>,
    lora_v: Option<&LoraPair>,
    mask: AttnMask,
) -> Result<(Tensor, AttentionCache)> {
    w.check_input(x)?;
    let n = x.rows();
    let d = w.dim();
    let dh = w.head_dim();
    let (l, prefix_scale) = match prefix {
        Some(p) => {
            if p.keys.value.cols() != d || p.values.value.shape() != p.keys.value.shape() {
                return Err(Error::shape(format!(
                    "prefix keys {:?} / values {:?} do not fit width {d}",
                    p.keys.value.shape(),
                    p.values.value.shape()
                )));
            }
            (p.len(), p.scale.scalar_value())
        }
        None => (0, 1.0),
    };
    let q = matmul(x, &w.w_q.value)?;
    let (k, x_down_k) = project(x, &w.w_k, lora_k)?;
    let (v, x_down_v) = project(x, &w.w_v, lora_v)?;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let mut heads_out = Tensor::zeros(&[n, d]);
    let mut keys = Vec::with_capacity(w.heads);
    let mut values = Vec::with_capacity(w.heads);
    let mut probs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(c0, c1);
        let (kcat, vcat) = match prefix {
            Some(p) if l > 0 => (
                Tensor::concat_rows(&[&p.keys.value.slice_cols(c0, c1), &k.slice_cols(c0, c1)])?,
                Tensor::concat_rows(&[&p.values.value.slice_cols(c0, c1), &v.slice_cols(c0, c1)])?,
            ),
            _ => (k.slice_cols(c0, c1), v.slice_cols(c0, c1)),
        };
        let mut logits = matmul_nt(&qh, &kcat)?.scale(inv_sqrt);
        for i in 0..n {
            for j in 0..n {
                if mask.hides(i, j) {
                    logits.set(i, l + j, f64::NEG_INFINITY);
                }
            }
        }
        let p = softmax_rows(&logits);
        let mut weights = p.clone();
        for i in 0..n {
            for j in 0..l {
                let v = weights.at(i, j) * prefix_scale;
                weights.set(i, j, v);
            }
        }
        heads_out.set_cols(c0, &matmul(&weights, &vcat)?);
        keys.push(kcat);
        values.push(vcat);
        probs.push(p);
    }
    let y = matmul(&heads_out, &w.w_o.value)?;
    Ok((
        y,
        AttentionCache {
            x: x.clone(),
            q,
            x_down_k,
            x_down_v,
            keys,
            values,
            probs,
            heads_out,
            prefix_len: l,
            prefix_scale,
        },
    ))
}

/// Plain multi-head attention.
pub fn attend(x: &Tensor, w: &AttentionWeights, mask: AttnMask) -> Result<Tensor> {
    Ok(attention_forward(x, w, None, None, None, mask)?.0)
}

/// Attention with a scaled prefix and optional LoRA on keys and values.
pub fn sprefix_attend(
    x: &Tensor,
    w: &AttentionWeights,
    prefix: &PrefixBank,
    lora_k: Option<&LoraPair>,
    lora_v: Option<&LoraPair>,
    mask: AttnMask,
) -> Result<Tensor> {
    Ok(attention_forward(x, w, Some(prefix), lora_k, lora_v, mask)?.0)
}

/// Backward of [`attention_forward`]. Accumulates into every trainable
/// tensor it touches and returns `dL/dx`.
pub fn attention_backward(
    cache: &AttentionCache,
    w: &mut AttentionWeights,
    prefix: Option<&mut PrefixBank>,
    lora_k: Option<&mut LoraPair>,
    lora_v: Option<&mut LoraPair>,
    dy: &Tensor,
) -> Result<Tensor> {
    let n = cache.x.rows();
    let d = w.dim();
    let dh = w.head_dim();
    let l = cache.prefix_len;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    if w.w_o.trainable {
        w.w_o.accumulate(&matmul_tn(&cache.heads_out, dy)?);
    }
    let d_heads = matmul_nt(dy, &w.w_o.value)?;

    let mut dq = Tensor::zeros(&[n, d]);
    let mut dk = Tensor::zeros(&[n, d]);
    let mut dv = Tensor::zeros(&[n, d]);
    let mut dpk = Tensor::zeros(&[l, d]);
    let mut dpv = Tensor::zeros(&[l, d]);
    let mut dscale = 0.0;
    for h in 0..w.heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let probs = &cache.probs[h];
        let mut weights = probs.clone();
        for i in 0..n {
            for j in 0..l {
                weights.set(i, j, probs.at(i, j) * cache.prefix_scale);
            }
        }
        let d_out = d_heads.slice_cols(c0, c1);
        let mut d_weights = matmul_nt(&d_out, &cache.values[h])?;
        let d_vcat = matmul_tn(&weights, &d_out)?;
        for i in 0..n {
            for j in 0..l {
                dscale += d_weights.at(i, j) * probs.at(i, j);
                d_weights.set(i, j, d_weights.at(i, j) * cache.prefix_scale);
            }
        }
        let d_logits = softmax_rows_backward(probs, &d_weights).scale(inv_sqrt);
        let qh = cache.q.slice_cols(c0, c1);
        dq.set_cols(c0, &matmul(&d_logits, &cache.keys[h])?);
        let d_kcat = matmul_tn(&d_logits, &qh)?;
        if l > 0 {
            dpk.set_cols(c0, &d_kcat.slice_rows(0, l));
            dpv.set_cols(c0, &d_vcat.slice_rows(0, l));
        }
        dk.set_cols(c0, &d_kcat.slice_rows(l, l + n));
        dv.set_cols(c0, &d_vcat.slice_rows(l, l + n));
    }
    if let Some(p) = prefix {
        p.keys.accumulate(&dpk);
        p.values.accumulate(&dpv);
        p.scale.accumulate_scalar(dscale);
    }

    let x = &cache.x;
    let mut dx = matmul_nt(&dq, &w.w_q.value)?;
    if w.w_q.trainable {
        w.w_q.accumulate(&matmul_tn(x, &dq)?);
    }
    dx.add_assign(&project_backward(x, &mut w.w_k, lora_k, cache.x_down_k.as_ref(), &dk)?)?;
    dx.add_assign(&project_backward(x, &mut w.w_v, lora_v, cache.x_down_v.as_ref(), &dv)?)?;
    Ok(dx)
}

fn project_backward(
    x: &Tensor,
    w: &mut ParamTensor,
    lora: Option<&mut LoraPair>,
    x_down: Option<&Tensor>,
    g: &Tensor,
) -> Result<Tensor> {
    if w.trainable {
        w.accumulate(&matmul_tn(x, g)?);
    }
    let mut dx = matmul_nt(g, &w.value)?;
    if let (Some(l), Some(x_down)) = (lora, x_down) {
        let s = l.scale.scalar_value();
        // y_low = (x·D)·U
        let g_up = matmul_nt(g, &l.up.value)?;
        if l.scale.trainable {
            l.scale.accumulate_scalar(matmul(x_down, &l.up.value)?.dot(g));
        }
        if l.up.trainable {
            l.up.accumulate(&matmul_tn(x_down, g)?.scale(s));
        }
        if l.down.trainable {
            l.down.accumulate(&matmul_tn(x, &g_up)?.scale(s));
        }
        dx.add_scaled(&matmul_nt(&g_up, &l.down.value)?, s)?;
    }
    Ok(dx)
}

/// Share of exp-mass that prefix columns receive, per query row and head.
/// Returns `[n × heads]`.
pub fn prefix_lambda(
    x: &Tensor,
    w: &AttentionWeights,
    prefix: &PrefixBank,
    lora_k: Option<&LoraPair>,
    mask: AttnMask,
) -> Result<Tensor> {
    w.check_input(x)?;
    let l = prefix.len();
    if l == 0 {
        return Err(Error::config("prefix gate is undefined for an empty prefix"));
    }
    let n = x.rows();
    let dh = w.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let q = matmul(x, &w.w_q.value)?;
    let k = match lora_k {
        Some(lk) => lora_project(x, &w.w_k, lk)?,
        None => matmul(x, &w.w_k.value)?,
    };
    let mut out = Tensor::zeros(&[n, w.heads]);
    for h in 0..w.heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(c0, c1);
        let pre = matmul_nt(&qh, &prefix.keys.value.slice_cols(c0, c1))?.scale(inv_sqrt);
        let own = matmul_nt(&qh, &k.slice_cols(c0, c1))?.scale(inv_sqrt);
        for i in 0..n {
            let visible: Vec<f64> = (0..n)
                .filter(|&j| !mask.hides(i, j))
                .map(|j| own.at(i, j))
                .collect();
            let max = pre
                .row(i)
                .iter()
                .chain(&visible)
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let mass_prefix: f64 = pre.row(i).iter().map(|v| (v - max).exp()).sum();
            let mass_own: f64 = visible.iter().map(|v| (v - max).exp()).sum();
            out.set(i, h, mass_prefix / (mass_prefix + mass_own));
        }
    }
    Ok(out)
}

/// Per-head outputs (before `W_o`) written in gated two-term form:
/// `(1 − λ)·Attn(q, K', V') + S_p·λ·softmax(q·P_kᵀ)·P_v`.
///
/// Independent of [`attention_forward`]; used to check it.
pub fn decomposed_prefix_heads(
    x: &Tensor,
    w: &AttentionWeights,
    prefix: &PrefixBank,
    lora_k: Option<&LoraPair>,
    lora_v: Option<&LoraPair>,
    mask: AttnMask,
) -> Result<Tensor> {
    let lambda = prefix_lambda(x, w, prefix, lora_k, mask)?;
    let n = x.rows();
    let d = w.dim();
    let dh = w.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let s_p = prefix.scale.scalar_value();
    let q = matmul(x, &w.w_q.value)?;
    let k = match lora_k {
        Some(lk) => lora_project(x, &w.w_k, lk)?,
        None => matmul(x, &w.w_k.value)?,
    };
    let v = match lora_v {
        Some(lv) => lora_project(x, &w.w_v, lv)?,
        None => matmul(x, &w.w_v.value)?,
    };
    let mut out = Tensor::zeros(&[n, d]);
    for h in 0..w.heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(c0, c1);
        let mut own = matmul_nt(&qh, &k.slice_cols(c0, c1))?.scale(inv_sqrt);
        for i in 0..n {
            for j in 0..n {
                if mask.hides(i, j) {
                    own.set(i, j, f64::NEG_INFINITY);
                }
            }
        }
        let plain = matmul(&softmax_rows(&own), &v.slice_cols(c0, c1))?;
        let pre = matmul_nt(&qh, &prefix.keys.value.slice_cols(c0, c1))?.scale(inv_sqrt);
        let task = matmul(&softmax_rows(&pre), &prefix.values.value.slice_cols(c0, c1))?;
        let mut head = Tensor::zeros(&[n, dh]);
        for i in 0..n {
            let lam = lambda.at(i, h);
            for c in 0..dh {
                head.set(i, c, (1.0 - lam) * plain.at(i, c) + s_p * lam * task.at(i, c));
            }
        }
        out.set_cols(c0, &head);
    }
    Ok(out)
}

/// The four products of `Q·(K + ΔK)ᵀ·(V + ΔV)`:
/// `[QKᵀV, QKᵀΔV, QΔKᵀV, QΔKᵀΔV]`.
pub fn lora_expansion_terms(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    dk: &Tensor,
    dv: &Tensor,
) -> Result<[Tensor; 4]> {
    if k.shape() != dk.shape() || v.shape() != dv.shape() {
        return Err(Error::shape(format!(
            "expansion: K {:?} vs ΔK {:?}, V {:?} vs ΔV {:?}",
            k.shape(),
            dk.shape(),
            v.shape(),
            dv.shape()
        )));
    }
    let qk = matmul_nt(q, k)?;
    let qdk = matmul_nt(q, dk)?;
    Ok([
        matmul(&qk, v)?,
        matmul(&qk, dv)?,
        matmul(&qdk, v)?,
        matmul(&qdk, dv)?,
    ])
}

/// Attention sublayer as it sits inside a block: frozen weights plus
/// whichever tuning modules are attached.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub weights: AttentionWeights,
    pub prefix: Option<PrefixBank>,
    pub lora_k: Option<LoraPair>,
    pub lora_v: Option<LoraPair>,
    pub mask: AttnMask,
    pub merged: bool,
}

impl MultiHeadAttention {
    pub fn new(weights: AttentionWeights, mask: AttnMask) -> Self {
        Self {
            weights,
            prefix: None,
            lora_k: None,
            lora_v: None,
            mask,
            merged: false,
        }
    }

    /// Folds both LoRA pairs into `W_k`/`W_v` and drops them.
    pub fn merge_lora(&mut self) -> Result<()> {
        if self.merged {
            return Err(Error::State("LoRA weights are already merged".into()));
        }
        if let Some(lk) = self.lora_k.take() {
            self.weights.w_k.value = merge_lora(&self.weights.w_k.value, &lk)?;
        }
        if let Some(lv) = self.lora_v.take() {
            self.weights.w_v.value = merge_lora(&self.weights.w_v.value, &lv)?;
        }
        self.merged = true;
        Ok(())
    }
}

impl Sublayer for MultiHeadAttention {
    type Cache = AttentionCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, AttentionCache)> {
        attention_forward(
            x,
            &self.weights,
            self.prefix.as_ref(),
            self.lora_k.as_ref(),
            self.lora_v.as_ref(),
            self.mask,
        )
    }

    fn backward(&mut self, cache: &AttentionCache, dy: &Tensor) -> Result<Tensor> {
        attention_backward(
            cache,
            &mut self.weights,
            self.prefix.as_mut(),
            self.lora_k.as_mut(),
            self.lora_v.as_mut(),
            dy,
        )
    }
}

impl HasParams for MultiHeadAttention {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ParamTensor)>) {
        self.weights.collect_params(prefix, out);
        self.prefix.collect_params(&join(prefix, "prefix"), out);
        self.lora_k.collect_params(&join(prefix, "lora_k"), out);
        self.lora_v.collect_params(&join(prefix, "lora_v"), out);
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut ParamTensor)>,
    ) {
        self.weights.collect_params_mut(prefix, out);
        self.prefix.collect_params_mut(&join(prefix, "prefix"), out);
        self.lora_k.collect_params_mut(&join(prefix, "lora_k"), out);
        self.lora_v.collect_params_mut(&join(prefix, "lora_v"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_lora(d: usize, r: usize, rng: &mut ChaCha8Rng) -> LoraPair {
        let mut l = LoraPair::new(d, r, rng).unwrap();
        l.up.value = Tensor::randn(&[r, d], 0.3, rng);
        l.down.value = Tensor::randn(&[d, r], 0.3, rng);
        l.scale.value = Tensor::scalar(0.7);
        l
    }

    /// Straight loop-nest attention used as a reference; shares nothing with
    /// the module beyond the weight storage.
    fn naive_attention(x: &Tensor, w: &AttentionWeights, causal: bool) -> Tensor {
        let n = x.rows();
        let d = w.dim();
        let dh = w.head_dim();
        let proj = |m: &Tensor| {
            let mut out = vec![vec![0.0; d]; n];
            for i in 0..n {
                for j in 0..d {
                    for k in 0..d {
                        out[i][j] += x.at(i, k) * m.at(k, j);
                    }
                }
            }
            out
        };
        let (q, k, v) = (proj(&w.w_q.value), proj(&w.w_k.value), proj(&w.w_v.value));
        let mut heads = vec![vec![0.0; d]; n];
        for h in 0..w.heads {
            for i in 0..n {
                let limit = if causal { i + 1 } else { n };
                let scores: Vec<f64> = (0..limit)
                    .map(|j| {
                        (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let a = (s - m).exp() / z;
                    for c in 0..dh {
                        heads[i][h * dh + c] += a * v[j][h * dh + c];
                    }
                }
            }
        }
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            for j in 0..d {
                let s: f64 = (0..d).map(|k| heads[i][k] * w.w_o.value.at(k, j)).sum();
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let mut r = rng(1);
        let w = AttentionWeights::new(8, 2, &mut r).unwrap();
        let x = Tensor::randn(&[1, 8], 1.0, &mut r);
        let y = attend(&x, &w, AttnMask::None).unwrap();
        let expect = matmul(&matmul(&x, &w.w_v.value).unwrap(), &w.w_o.value).unwrap();
        assert!(y.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn causal_mask_zeroes_upper_triangle() {
        let mut r = rng(2);
        let w = AttentionWeights::new(8, 2, &mut r).unwrap();
        let x = Tensor::randn(&[3, 8], 1.0, &mut r);
        let (_, cache) = attention_forward(&x, &w, None, None, None, AttnMask::Causal).unwrap();
        for h in 0..2 {
            let p = cache.probs(h);
            for i in 0..3 {
                for j in (i + 1)..3 {
                    assert_eq!(p.at(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn matches_naive_reference() {
        let mut r = rng(3);
        let w = AttentionWeights::new(16, 4, &mut r).unwrap();
        let x = Tensor::randn(&[5, 16], 1.0, &mut r);
        for (mask, causal) in [(AttnMask::None, false), (AttnMask::Causal, true)] {
            let y = attend(&x, &w, mask).unwrap();
            assert!(y.max_abs_diff(&naive_attention(&x, &w, causal)) < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let mut r = rng(4);
        let w = AttentionWeights::new(8, 2, &mut r).unwrap();
        let x = Tensor::zeros(&[3, 6]);
        assert!(matches!(attend(&x, &w, AttnMask::None), Err(Error::Shape(_))));
        assert!(matches!(AttentionWeights::new(9, 2, &mut r), Err(Error::Config(_))));
    }

    #[test]
    fn lora_zero_up_or_zero_scale_is_identity() {
        let mut r = rng(5);
        let w = ParamTensor::frozen(Tensor::randn(&[8, 8], 0.3, &mut r));
        let x = Tensor::randn(&[4, 8], 1.0, &mut r);
        let plain = matmul(&x, &w.value).unwrap();
        let fresh = LoraPair::new(8, 2, &mut r).unwrap();
        assert_eq!(lora_project(&x, &w, &fresh).unwrap(), plain);
        let mut zero_s = random_lora(8, 2, &mut r);
        zero_s.scale.value = Tensor::scalar(0.0);
        assert_eq!(lora_project(&x, &w, &zero_s).unwrap(), plain);
        assert_eq!(merge_lora(&w.value, &fresh).unwrap(), w.value);
    }

    #[test]
    fn lora_rank_must_be_below_width() {
        let mut r = rng(6);
        assert!(matches!(LoraPair::new(4, 4, &mut r), Err(Error::Config(_))));
    }

    #[test]
    fn lora_unmerged_equals_merged() {
        let mut r = rng(7);
        let w = ParamTensor::frozen(Tensor::randn(&[8, 8], 0.3, &mut r));
        let lora = random_lora(8, 3, &mut r);
        let x = Tensor::randn(&[5, 8], 1.0, &mut r);
        let merged = matmul(&x, &merge_lora(&w.value, &lora).unwrap()).unwrap();
        assert!(lora_project(&x, &w, &lora).unwrap().max_abs_diff(&merged) < 1e-9);
    }

    #[test]
    fn double_merge_is_state_error() {
        let mut r = rng(8);
        let mut mha = MultiHeadAttention::new(AttentionWeights::new(8, 2, &mut r).unwrap(), AttnMask::None);
        mha.lora_k = Some(random_lora(8, 2, &mut r));
        mha.merge_lora().unwrap();
        assert!(mha.lora_k.is_none());
        assert!(matches!(mha.merge_lora(), Err(Error::State(_))));
    }

    #[test]
    fn empty_prefix_is_bitwise_plain_attention() {
        let mut r = rng(9);
        let w = AttentionWeights::new(8, 2, &mut r).unwrap();
        let x = Tensor::randn(&[4, 8], 1.0, &mut r);
        let bank = PrefixBank::new(0, 8, 10.0, &mut r);
        for mask in [AttnMask::None, AttnMask::Causal] {
            let a = attend(&x, &w, mask).unwrap();
            let b = sprefix_attend(&x, &w, &bank, None, None, mask).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn unit_scale_matches_decomposed_form() {
        let mut r = rng(10);
        let w = AttentionWeights::new(8, 2, &mut r).unwrap();
        let x = Tensor::randn(&[5, 8], 1.0, &mut r);
        let mut bank = PrefixBank::new(3, 8, 1.0, &mut r);
        bank.keys.value = Tensor::randn(&[3, 8], 1.0, &mut r);
        bank.values.value = Tensor::randn(&[3, 8], 1.0, &mut r);
        let lk = random_lora(8, 2, &mut r);
        let lv = random_lora(8, 2, &mut r);
        for mask in [AttnMask::None, AttnMask::Causal] {
            let (_, cache) = attention_forward(&x, &w, Some(&bank), Some(&lk), Some(&lv), mask).unwrap();
            let dec = decomposed_prefix_heads(&x, &w, &bank, Some(&lk), Some(&lv), mask).unwrap();
            assert!(cache.heads_out().max_abs_diff(&dec) < 1e-10);
        }
    }

    #[test]
    fn zero_scale_leaves_shrunk_plain_attention() {
        let mut r = rng(11);
        let w = AttentionWeights::new(8, 1, &mut r).unwrap();
        let x = Tensor::randn(&[4, 8], 1.0, &mut r);
        let mut bank = PrefixBank::new(2, 8, 0.0, &mut r);
        bank.keys.value = Tensor::randn(&[2, 8], 1.0, &mut r);
        let lambda = prefix_lambda(&x, &w, &bank, None, AttnMask::None).unwrap();
        let plain = attend(&x, &w, AttnMask::None).unwrap();
        let scaled = sprefix_attend(&x, &w, &bank, None, None, AttnMask::None).unwrap();
        for i in 0..4 {
            for c in 0..8 {
                let expect = (1.0 - lambda.at(i, 0)) * plain.at(i, c);
                assert!((scaled.at(i, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lambda_uniform_logits() {
        let mut r = rng(12);
        let mut w = AttentionWeights::new(4, 1, &mut r).unwrap();
        w.w_q.value = Tensor::zeros(&[4, 4]);
        let x = Tensor::randn(&[6, 4], 1.0, &mut r);
        let bank = PrefixBank::new(2, 4, 10.0, &mut r);
        let lam = prefix_lambda(&x, &w, &bank, None, AttnMask::None).unwrap();
        for i in 0..6 {
            assert!((lam.at(i, 0) - 0.25).abs() < 1e-15);
        }
        let lam = prefix_lambda(&x, &w, &bank, None, AttnMask::Causal).unwrap();
        assert!((lam.at(0, 0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn lambda_requires_prefix() {
        let mut r = rng(13);
        let w = AttentionWeights::new(4, 1, &mut r).unwrap();
        let bank = PrefixBank::new(0, 4, 10.0, &mut r);
        let x = Tensor::zeros(&[2, 4]);
        assert!(matches!(
            prefix_lambda(&x, &w, &bank, None, AttnMask::None),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PrefixBank::from_parts(Tensor::zeros(&[2, 4]), None, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lambda_matches_internal_softmax_mass() {
        let mut r = rng(14);
        let w = AttentionWeights::new(8, 2, &mut r).unwrap();
        let x = Tensor::randn(&[5, 8], 1.0, &mut r);
        let mut bank = PrefixBank::new(3, 8, 10.0, &mut r);
        bank.keys.value = Tensor::randn(&[3, 8], 1.0, &mut r);
        let (_, cache) = attention_forward(&x, &w, Some(&bank), None, None, AttnMask::Causal).unwrap();
        let lam = prefix_lambda(&x, &w, &bank, None, AttnMask::Causal).unwrap();
        for h in 0..2 {
            for i in 0..5 {
                let mass: f64 = cache.probs(h).row(i)[..3].iter().sum();
                assert!((mass - lam.at(i, h)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn expansion_terms() {
        let mut r = rng(15);
        let q = Tensor::randn(&[4, 8], 1.0, &mut r);
        let k = Tensor::randn(&[4, 8], 1.0, &mut r);
        let v = Tensor::randn(&[4, 8], 1.0, &mut r);
        let zero = Tensor::zeros(&[4, 8]);
        let t = lora_expansion_terms(&q, &k, &v, &zero, &zero).unwrap();
        for term in &t[1..] {
            assert_eq!(term.max_abs(), 0.0);
        }
        let dv = Tensor::randn(&[4, 8], 1.0, &mut r);
        let t = lora_expansion_terms(&q, &k, &v, &zero, &dv).unwrap();
        let direct = matmul(&matmul_nt(&q, &k).unwrap(), &v.add(&dv).unwrap()).unwrap();
        assert!(t[1].max_abs_diff(&direct.sub(&t[0]).unwrap()) < 1e-12);
    }

    struct Probe {
        mha: MultiHeadAttention,
        x: Tensor,
        weight: Tensor,
    }

    impl HasParams for Probe {
        fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ParamTensor)>) {
            self.mha.collect_params(prefix, out);
        }
        fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ParamTensor)>) {
            self.mha.collect_params_mut(prefix, out);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(16);
        let d = 8;
        let mut mha = MultiHeadAttention::new(AttentionWeights::new(d, 2, &mut r).unwrap(), AttnMask::Causal);
        let mut bank = PrefixBank::new(3, d, 1.7, &mut r);
        bank.keys.value = Tensor::randn(&[3, d], 0.5, &mut r);
        bank.values.value = Tensor::randn(&[3, d], 0.5, &mut r);
        mha.prefix = Some(bank);
        mha.lora_k = Some(random_lora(d, 2, &mut r));
        mha.lora_v = Some(random_lora(d, 2, &mut r));
        mha.weights.w_q.trainable = true;
        mha.weights.w_o.trainable = true;
        let mut probe = Probe {
            mha,
            x: Tensor::randn(&[4, d], 1.0, &mut r),
            weight: Tensor::randn(&[4, d], 1.0, &mut r),
        };
        let report = check_gradient(
            &mut probe,
            |p| p.mha.forward(&p.x).unwrap().0.dot(&p.weight),
            |p| {
                let (_, cache) = p.mha.forward(&p.x).unwrap();
                let w = p.weight.clone();
                p.mha.backward(&cache, &w).unwrap();
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        for t in &report.tensors {
            if t.trainable {
                assert!(t.max_rel_err < 1e-4, "{}: {}", t.name, t.max_rel_err);
            }
        }
        assert!(report.frozen_grads_zero());
    }
}
