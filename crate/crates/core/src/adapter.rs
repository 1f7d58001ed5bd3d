//! Bottleneck adapters and the places they can be wired into a block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::{join, HasParams};
use crate::tensor::{
    activation, activation_backward, layer_norm, layer_norm_backward, matmul, matmul_nt,
    matmul_tn, Activation, LayerNormCache, ParamTensor, Tensor, LN_EPS,
};

/// A differentiable map `[n×d] → [n×d]` with a paired backward pass.
pub trait Sublayer {
    type Cache;
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Self::Cache)>;
    /// Accumulates parameter gradients and returns `dL/dx`.
    fn backward(&mut self, cache: &Self::Cache, dy: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamTensor,
    pub bias: ParamTensor,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new(d: usize) -> Self {
        Self {
            gain: ParamTensor::frozen(Tensor::filled(&[d], 1.0)),
            bias: ParamTensor::frozen(Tensor::zeros(&[d])),
            eps: LN_EPS,
        }
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.gain.trainable = on;
        self.bias.trainable = on;
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        layer_norm(x, &self.gain.value, &self.bias.value, self.eps)
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Tensor) -> Tensor {
        let (dx, dg, db) = layer_norm_backward(cache, &self.gain.value, dy);
        self.gain.accumulate(&dg);
        self.bias.accumulate(&db);
        dx
    }
}

impl HasParams for LayerNormParams {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ParamTensor)>) {
        out.push((join(prefix, "gain"), &self.gain));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut ParamTensor)>,
    ) {
        out.push((join(prefix, "gain"), &mut self.gain));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Two-matrix bottleneck `f(x·W_down)·W_up` with a learnable output scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBlock {
    pub down: ParamTensor,
    pub up: ParamTensor,
    pub scale: ParamTensor,
    pub activation: Activation,
}

impl AdapterBlock {
    /// `W_down ~ N(0, 1/√d)`, `W_up = 0`, `s = 1`.
    pub fn new<R: Rng + ?Sized>(d: usize, bottleneck: usize, rng: &mut R) -> Result<Self> {
        if bottleneck == 0 || bottleneck >= d {
            return Err(Error::config(format!(
                "adapter bottleneck {bottleneck} must satisfy 0 < m < d = {d}"
            )));
        }
        Ok(Self {
            down: ParamTensor::trainable(Tensor::randn(
                &[d, bottleneck],
                1.0 / (d as f64).sqrt(),
                rng,
            )),
            up: ParamTensor::trainable(Tensor::zeros(&[bottleneck, d])),
            scale: ParamTensor::trainable(Tensor::scalar(1.0)),
            activation: Activation::Relu,
        })
    }

    pub fn bottleneck(&self) -> usize {
        self.down.value.cols()
    }

    pub fn scale_value(&self) -> f64 {
        self.scale.scalar_value()
    }
}

impl HasParams for AdapterBlock {
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

#[derive(Debug, Clone)]
pub struct AdapterCache {
    input: Tensor,
    pre: Tensor,
    hidden: Tensor,
    out: Tensor,
}

/// `f(x·W_down)·W_up`, without scale or residual.
pub fn adapter_forward(x: &Tensor, a: &AdapterBlock) -> Result<Tensor> {
    Ok(adapter_forward_cached(x, a)?.0)
}

fn adapter_forward_cached(x: &Tensor, a: &AdapterBlock) -> Result<(Tensor, AdapterCache)> {
    let d = x.cols();
    if a.bottleneck() >= d {
        return Err(Error::config(format!(
            "adapter bottleneck {} is not below width {d}",
            a.bottleneck()
        )));
    }
    let pre = matmul(x, &a.down.value)?;
    let hidden = activation(a.activation, &pre);
    let out = matmul(&hidden, &a.up.value)?;
    Ok((
        out.clone(),
        AdapterCache {
            input: x.clone(),
            pre,
            hidden,
            out,
        },
    ))
}

/// Backward of `s·adapter(x)` given the upstream gradient `g` of that
/// scaled output. Returns `dL/dx`.
fn scaled_adapter_backward(a: &mut AdapterBlock, cache: &AdapterCache, g: &Tensor) -> Result<Tensor> {
    let s = a.scale_value();
    a.scale.accumulate_scalar(cache.out.dot(g));
    let g = g.scale(s);
    if a.up.trainable {
        a.up.accumulate(&matmul_tn(&cache.hidden, &g)?);
    }
    let d_hidden = matmul_nt(&g, &a.up.value)?;
    let d_pre = activation_backward(a.activation, &cache.pre, &d_hidden);
    if a.down.trainable {
        a.down.accumulate(&matmul_tn(&cache.input, &d_pre)?);
    }
    matmul_nt(&d_pre, &a.down.value)
}

/// Layernorm with a parallel adapter reading the pre-normalization input:
/// `LN(x) + s·adapter(x)`.
pub fn l_adapter(x: &Tensor, ln: &LayerNormParams, a: &AdapterBlock) -> Result<Tensor> {
    let (mut out, _) = ln.forward(x)?;
    out.add_scaled(&adapter_forward(x, a)?, a.scale_value())?;
    Ok(out)
}

/// Where an adapter sits relative to a block's layernorm and sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterPlacement {
    /// `x + S(LN(x) + s·A(x))`; the layernorm adapter.
    ParallelLn,
    /// `x + S(z + s·A(z))` with `z = LN(x)`.
    SequentialLn,
    /// `x + S(LN(x)) + s·A(x)`; taps before the layernorm, merges after the sublayer.
    ParallelSublayer,
    /// `x + h + s·A(h)` with `h = S(LN(x))`.
    SequentialSublayer,
    /// `x + S(LN(x))` with gain and bias as the only trainables.
    LnTuning,
}

impl AdapterPlacement {
    pub const ALL: [AdapterPlacement; 5] = [
        AdapterPlacement::SequentialSublayer,
        AdapterPlacement::SequentialLn,
        AdapterPlacement::ParallelSublayer,
        AdapterPlacement::ParallelLn,
        AdapterPlacement::LnTuning,
    ];

    pub fn uses_adapter(self) -> bool {
        !matches!(self, AdapterPlacement::LnTuning)
    }

    pub fn name(self) -> &'static str {
        match self {
            AdapterPlacement::ParallelLn => "parallel_ln",
            AdapterPlacement::SequentialLn => "sequential_ln",
            AdapterPlacement::ParallelSublayer => "parallel_sublayer",
            AdapterPlacement::SequentialSublayer => "sequential_sublayer",
            AdapterPlacement::LnTuning => "ln_tuning",
        }
    }
}

#[derive(Debug)]
pub struct PlacementCache<C> {
    placement: AdapterPlacement,
    ln: LayerNormCache,
    sub: C,
    adapter: Option<AdapterCache>,
}

/// One pre-LN residual site: `x + sublayer(LN(x))` with the adapter wired
/// in according to `placement`.
pub fn apply_placement<S: Sublayer>(
    x: &Tensor,
    sublayer: &S,
    ln: &LayerNormParams,
    adapter: Option<&AdapterBlock>,
    placement: AdapterPlacement,
) -> Result<(Tensor, PlacementCache<S::Cache>)> {
    let adapter = match (placement.uses_adapter(), adapter) {
        (true, None) => {
            return Err(Error::config(format!(
                "placement {} needs an adapter",
                placement.name()
            )))
        }
        (true, a) => a,
        (false, _) => None,
    };
    let (z, ln_cache) = ln.forward(x)?;
    let (out, sub_cache, ad_cache) = match (placement, adapter) {
        (AdapterPlacement::LnTuning, _) => {
            let (h, c) = sublayer.forward(&z)?;
            (x.add(&h)?, c, None)
        }
        (AdapterPlacement::ParallelLn, Some(a)) => {
            let (ad, ac) = adapter_forward_cached(x, a)?;
            let mut z = z;
            z.add_scaled(&ad, a.scale_value())?;
            let (h, c) = sublayer.forward(&z)?;
            (x.add(&h)?, c, Some(ac))
        }
        (AdapterPlacement::SequentialLn, Some(a)) => {
            let (ad, ac) = adapter_forward_cached(&z, a)?;
            let mut z = z;
            z.add_scaled(&ad, a.scale_value())?;
            let (h, c) = sublayer.forward(&z)?;
            (x.add(&h)?, c, Some(ac))
        }
        (AdapterPlacement::ParallelSublayer, Some(a)) => {
            let (h, c) = sublayer.forward(&z)?;
            let (ad, ac) = adapter_forward_cached(x, a)?;
            let mut out = x.add(&h)?;
            out.add_scaled(&ad, a.scale_value())?;
            (out, c, Some(ac))
        }
        (AdapterPlacement::SequentialSublayer, Some(a)) => {
            let (h, c) = sublayer.forward(&z)?;
            let (ad, ac) = adapter_forward_cached(&h, a)?;
            let mut out = x.add(&h)?;
            out.add_scaled(&ad, a.scale_value())?;
            (out, c, Some(ac))
        }
        (_, None) => unreachable!("adapter presence checked above"),
    };
    Ok((
        out,
        PlacementCache {
            placement,
            ln: ln_cache,
            sub: sub_cache,
            adapter: ad_cache,
        },
    ))
}

/// Backward of [`apply_placement`]; returns `dL/dx`.
pub fn apply_placement_backward<S: Sublayer>(
    cache: &PlacementCache<S::Cache>,
    sublayer: &mut S,
    ln: &mut LayerNormParams,
    adapter: Option<&mut AdapterBlock>,
    dy: &Tensor,
) -> Result<Tensor> {
    let mut dx = dy.clone();
    match (cache.placement, adapter, cache.adapter.as_ref()) {
        (AdapterPlacement::LnTuning, _, _) => {
            let dz = sublayer.backward(&cache.sub, dy)?;
            dx.add_assign(&ln.backward(&cache.ln, &dz))?;
        }
        (AdapterPlacement::ParallelLn, Some(a), Some(ac)) => {
            let dz = sublayer.backward(&cache.sub, dy)?;
            dx.add_assign(&ln.backward(&cache.ln, &dz))?;
            dx.add_assign(&scaled_adapter_backward(a, ac, &dz)?)?;
        }
        (AdapterPlacement::SequentialLn, Some(a), Some(ac)) => {
            let mut dz = sublayer.backward(&cache.sub, dy)?;
            dz.add_assign(&scaled_adapter_backward(a, ac, &dz.clone())?)?;
            dx.add_assign(&ln.backward(&cache.ln, &dz))?;
        }
        (AdapterPlacement::ParallelSublayer, Some(a), Some(ac)) => {
            let dz = sublayer.backward(&cache.sub, dy)?;
            dx.add_assign(&ln.backward(&cache.ln, &dz))?;
            dx.add_assign(&scaled_adapter_backward(a, ac, dy)?)?;
        }
        (AdapterPlacement::SequentialSublayer, Some(a), Some(ac)) => {
            let mut dh = dy.clone();
            dh.add_assign(&scaled_adapter_backward(a, ac, dy)?)?;
            let dz = sublayer.backward(&cache.sub, &dh)?;
            dx.add_assign(&ln.backward(&cache.ln, &dz))?;
        }
        _ => {
            return Err(Error::State(
                "adapter missing during backward of an adapter placement".into(),
            ))
        }
    }
    Ok(dx)
}
