//! Pre-LN transformer block with tuning hooks at both layernorms and
//! inside attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    apply_placement, apply_placement_backward, AdapterBlock, AdapterPlacement, LayerNormParams,
    PlacementCache, Sublayer,
};
use crate::attention::{AttentionCache, AttentionWeights, AttnMask, LoraPair, MultiHeadAttention, PrefixBank};
use crate::error::{Error, Result};
use crate::gradcheck::{join, HasParams};
use crate::tensor::{
    activation, activation_backward, matmul, matmul_nt, matmul_tn, Activation, ParamTensor, Tensor,
};

/// Which tuning modules are attached, and their sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PetlConfig {
    pub sprefix: bool,
    pub lora: bool,
    pub l_adapter: bool,
    pub prefix_len: usize,
    pub lora_rank: usize,
    pub adapter_bottleneck: usize,
    pub s_p_init: f64,
    pub placement: AdapterPlacement,
}

impl Default for PetlConfig {
    fn default() -> Self {
        Self {
            sprefix: true,
            lora: true,
            l_adapter: true,
            prefix_len: 4,
            lora_rank: 2,
            adapter_bottleneck: 4,
            s_p_init: 10.0,
            placement: AdapterPlacement::ParallelLn,
        }
    }
}

impl PetlConfig {
    pub fn disabled() -> Self {
        Self {
            sprefix: false,
            lora: false,
            l_adapter: false,
            ..Self::default()
        }
    }

    pub fn with_toggles(&self, sprefix: bool, lora: bool, l_adapter: bool) -> Self {
        Self {
            sprefix,
            lora,
            l_adapter,
            ..self.clone()
        }
    }

    pub fn any_enabled(&self) -> bool {
        self.sprefix || self.lora || self.l_adapter
    }

    /// Adapters are built only for placements that use one.
    pub fn builds_adapters(&self) -> bool {
        self.l_adapter && self.placement.uses_adapter()
    }

    pub fn tunes_layernorm(&self) -> bool {
        self.l_adapter && self.placement == AdapterPlacement::LnTuning
    }
}

/// Backbone feed-forward sublayer: `gelu(x·W₁ + b₁)·W₂ + b₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: ParamTensor,
    pub b1: ParamTensor,
    pub w2: ParamTensor,
    pub b2: ParamTensor,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Tensor,
    pre: Tensor,
    hidden: Tensor,
}

fn add_row_bias(x: &mut Tensor, b: &Tensor) {
    let m = x.cols();
    for i in 0..x.rows() {
        for (v, bb) in x.row_mut(i).iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
    debug_assert_eq!(m, b.len());
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: ParamTensor::frozen(Tensor::randn(&[d, hidden], 1.0 / (d as f64).sqrt(), rng)),
            b1: ParamTensor::frozen(Tensor::zeros(&[hidden])),
            w2: ParamTensor::frozen(Tensor::randn(&[hidden, d], 1.0 / (hidden as f64).sqrt(), rng)),
            b2: ParamTensor::frozen(Tensor::zeros(&[d])),
        }
    }
}

impl Sublayer for Mlp {
    type Cache = MlpCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        let mut pre = matmul(x, &self.w1.value)?;
        add_row_bias(&mut pre, &self.b1.value);
        let hidden = activation(Activation::Gelu, &pre);
        let mut out = matmul(&hidden, &self.w2.value)?;
        add_row_bias(&mut out, &self.b2.value);
        Ok((
            out,
            MlpCache {
                x: x.clone(),
                pre,
                hidden,
            },
        ))
    }

    fn backward(&mut self, cache: &MlpCache, dy: &Tensor) -> Result<Tensor> {
        if self.w2.trainable {
            self.w2.accumulate(&matmul_tn(&cache.hidden, dy)?);
            self.b2.accumulate(&dy.sum_rows());
        }
        let d_hidden = matmul_nt(dy, &self.w2.value)?;
        let d_pre = activation_backward(Activation::Gelu, &cache.pre, &d_hidden);
        if self.w1.trainable {
            self.w1.accumulate(&matmul_tn(&cache.x, &d_pre)?);
            self.b1.accumulate(&d_pre.sum_rows());
        }
        matmul_nt(&d_pre, &self.w1.value)
    }
}

impl HasParams for Mlp {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ParamTensor)>) {
        out.push((join(prefix, "w1"), &self.w1));
        out.push((join(prefix, "b1"), &self.b1));
        out.push((join(prefix, "w2"), &self.w2));
        out.push((join(prefix, "b2"), &self.b2));
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut ParamTensor)>,
    ) {
        out.push((join(prefix, "w1"), &mut self.w1));
        out.push((join(prefix, "b1"), &mut self.b1));
        out.push((join(prefix, "w2"), &mut self.w2));
        out.push((join(prefix, "b2"), &mut self.b2));
    }
}

/// One transformer layer:
///
/// ```text
/// x̂  = x + MHA(LN₁(x))     (adapter₁ wired per placement)
/// out = x̂ + MLP(LN₂(x̂))    (adapter₂ wired per placement)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub adapter1: Option<AdapterBlock>,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNormParams,
    pub adapter2: Option<AdapterBlock>,
    pub mlp: Mlp,
    pub placement: AdapterPlacement,
}

#[derive(Debug)]
pub struct BlockCache {
    attn: PlacementCache<AttentionCache>,
    mlp: PlacementCache<MlpCache>,
}

impl BlockCache {
    pub fn attention(&self) -> &PlacementCache<AttentionCache> {
        &self.attn
    }
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        d: usize,
        heads: usize,
        mlp_hidden: usize,
        mask: AttnMask,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNormParams::new(d),
            adapter1: None,
            attn: MultiHeadAttention::new(AttentionWeights::new(d, heads, rng)?, mask),
            ln2: LayerNormParams::new(d),
            adapter2: None,
            mlp: Mlp::new(d, mlp_hidden, rng),
            placement: AdapterPlacement::LnTuning,
        })
    }

    pub fn dim(&self) -> usize {
        self.attn.weights.dim()
    }

    fn route(&self, adapter: &Option<AdapterBlock>) -> AdapterPlacement {
        if adapter.is_some() {
            self.placement
        } else {
            AdapterPlacement::LnTuning
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        if x.shape().len() != 2 || x.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "block input {:?} does not match width {}",
                x.shape(),
                self.dim()
            )));
        }
        let (mid, attn) = apply_placement(
            x,
            &self.attn,
            &self.ln1,
            self.adapter1.as_ref(),
            self.route(&self.adapter1),
        )?;
        let (out, mlp) = apply_placement(
            &mid,
            &self.mlp,
            &self.ln2,
            self.adapter2.as_ref(),
            self.route(&self.adapter2),
        )?;
        Ok((out, BlockCache { attn, mlp }))
    }

    pub fn backward(&mut self, cache: &BlockCache, dy: &Tensor) -> Result<Tensor> {
        let d_mid = apply_placement_backward(
            &cache.mlp,
            &mut self.mlp,
            &mut self.ln2,
            self.adapter2.as_mut(),
            dy,
        )?;
        apply_placement_backward(
            &cache.attn,
            &mut self.attn,
            &mut self.ln1,
            self.adapter1.as_mut(),
            &d_mid,
        )
    }

    /// Replaces any attached tuning modules with fresh ones per `cfg`.
    pub fn attach_petl<R: Rng + ?Sized>(&mut self, cfg: &PetlConfig, rng: &mut R) -> Result<()> {
        let d = self.dim();
        self.attn.prefix = if cfg.sprefix {
            Some(PrefixBank::new(cfg.prefix_len, d, cfg.s_p_init, rng))
        } else {
            None
        };
        let (lk, lv) = if cfg.lora {
            (
                Some(LoraPair::new(d, cfg.lora_rank, rng)?),
                Some(LoraPair::new(d, cfg.lora_rank, rng)?),
            )
        } else {
            (None, None)
        };
        self.attn.lora_k = lk;
        self.attn.lora_v = lv;
        if cfg.builds_adapters() {
            self.adapter1 = Some(AdapterBlock::new(d, cfg.adapter_bottleneck, rng)?);
            self.adapter2 = Some(AdapterBlock::new(d, cfg.adapter_bottleneck, rng)?);
        } else {
            self.adapter1 = None;
            self.adapter2 = None;
        }
        self.placement = cfg.placement;
        let tune_ln = cfg.tunes_layernorm();
        self.ln1.set_trainable(tune_ln);
        self.ln2.set_trainable(tune_ln);
        Ok(())
    }

    /// Sets the trainable flag on every backbone tensor of this block.
    pub fn set_backbone_trainable(&mut self, on: bool) {
        let mut backbone = Vec::new();
        self.attn.weights.collect_params_mut("", &mut backbone);
        self.ln1.collect_params_mut("", &mut backbone);
        self.ln2.collect_params_mut("", &mut backbone);
        self.mlp.collect_params_mut("", &mut backbone);
        for (_, p) in backbone {
            p.trainable = on;
        }
    }
}

impl HasParams for Block {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ParamTensor)>) {
        self.ln1.collect_params(&join(prefix, "ln1"), out);
        self.adapter1.collect_params(&join(prefix, "adapter1"), out);
        self.attn.collect_params(&join(prefix, "attn"), out);
        self.ln2.collect_params(&join(prefix, "ln2"), out);
        self.adapter2.collect_params(&join(prefix, "adapter2"), out);
        self.mlp.collect_params(&join(prefix, "mlp"), out);
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut ParamTensor)>,
    ) {
        self.ln1.collect_params_mut(&join(prefix, "ln1"), out);
        self.adapter1.collect_params_mut(&join(prefix, "adapter1"), out);
        self.attn.collect_params_mut(&join(prefix, "attn"), out);
        self.ln2.collect_params_mut(&join(prefix, "ln2"), out);
        self.adapter2.collect_params_mut(&join(prefix, "adapter2"), out);
        self.mlp.collect_params_mut(&join(prefix, "mlp"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::sprefix_attend;
    use crate::tensor::layer_norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn perturb_backbone(b: &mut Block, r: &mut ChaCha8Rng) {
        let d = b.dim();
        b.ln1.gain.value = Tensor::randn(&[d], 1.0, r);
        b.ln1.bias.value = Tensor::randn(&[d], 0.5, r);
        b.ln2.gain.value = Tensor::randn(&[d], 1.0, r);
        b.mlp.b1.value = Tensor::randn(&[b.mlp.b1.value.len()], 0.5, r);
    }

    #[test]
    fn disabled_petl_is_plain_block() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut b = Block::new(16, 4, 32, AttnMask::Causal, &mut r).unwrap();
        perturb_backbone(&mut b, &mut r);
        let x = Tensor::randn(&[5, 16], 1.0, &mut r);
        let plain = b.forward(&x).unwrap().0;
        b.attach_petl(&PetlConfig::disabled(), &mut r).unwrap();
        assert_eq!(b.forward(&x).unwrap().0, plain);
        let zero_prefix = PetlConfig {
            prefix_len: 0,
            ..PetlConfig::default()
        };
        b.attach_petl(&zero_prefix, &mut r).unwrap();
        assert!(b.forward(&x).unwrap().0.max_abs_diff(&plain) < 1e-12);
    }

    #[test]
    fn matches_composed_reference_chain() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut b = Block::new(16, 4, 32, AttnMask::Causal, &mut r).unwrap();
        perturb_backbone(&mut b, &mut r);
        let cfg = PetlConfig {
            l_adapter: false,
            prefix_len: 3,
            ..PetlConfig::default()
        };
        b.attach_petl(&cfg, &mut r).unwrap();
        let lk = b.attn.lora_k.as_mut().unwrap();
        lk.up.value = Tensor::randn(&[lk.rank(), 16], 0.3, &mut r);
        let x = Tensor::randn(&[5, 16], 1.0, &mut r);

        let ln = |x: &Tensor, p: &LayerNormParams| layer_norm(x, &p.gain.value, &p.bias.value, p.eps).unwrap().0;
        let z = ln(&x, &b.ln1);
        let a = sprefix_attend(
            &z,
            &b.attn.weights,
            b.attn.prefix.as_ref().unwrap(),
            b.attn.lora_k.as_ref(),
            b.attn.lora_v.as_ref(),
            AttnMask::Causal,
        )
        .unwrap();
        let mid = x.add(&a).unwrap();
        let z2 = ln(&mid, &b.ln2);
        let mut h = matmul(&z2, &b.mlp.w1.value).unwrap();
        add_row_bias(&mut h, &b.mlp.b1.value);
        let h = activation(Activation::Gelu, &h);
        let mut m = matmul(&h, &b.mlp.w2.value).unwrap();
        add_row_bias(&mut m, &b.mlp.b2.value);
        let expect = mid.add(&m).unwrap();
        assert!(b.forward(&x).unwrap().0.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let b = Block::new(8, 2, 16, AttnMask::None, &mut r).unwrap();
        assert!(matches!(b.forward(&Tensor::zeros(&[2, 6])), Err(Error::Shape(_))));
    }

    #[test]
    fn ln_tuning_marks_only_layernorm_trainable() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut b = Block::new(8, 2, 16, AttnMask::None, &mut r).unwrap();
        let cfg = PetlConfig {
            sprefix: false,
            lora: false,
            placement: AdapterPlacement::LnTuning,
            ..PetlConfig::default()
        };
        b.attach_petl(&cfg, &mut r).unwrap();
        let trainable: Vec<String> = b.params().into_iter().filter(|(_, p)| p.trainable).map(|(n, _)| n).collect();
        assert_eq!(trainable, ["ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias"]);
    }
}
