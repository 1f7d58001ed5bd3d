//! Gradient and equivalence oracles over every trainable tensor class.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapter::{AdapterPlacement, Sublayer};
use crate::attention::{
    attention_forward, decomposed_prefix_heads, lora_expansion_terms, AttentionWeights, AttnMask,
    LoraPair, MultiHeadAttention, PrefixBank,
};
use crate::block::{Block, PetlConfig};
use crate::config::GradcheckConfig;
use crate::error::Result;
use crate::gradcheck::{check_gradient, join, GradCheckOptions, GradReport, HasParams};
use crate::loss::{bidirectional_sdm_raw, identity_labels, itc_loss_raw, LossConfig};
use crate::tensor::{matmul, matmul_nt, ParamTensor, Tensor};

/// Every class the suite must see at least once.
pub const TENSOR_CLASSES: [&str; 15] = [
    "P_k",
    "P_v",
    "S_p",
    "lora.W_down",
    "lora.W_up",
    "lora.s",
    "adapter.W_down",
    "adapter.W_up",
    "adapter.s",
    "ln.gain",
    "ln.bias",
    "sdm.F_v",
    "sdm.F_t",
    "itc.F_v",
    "itc.F_t",
];

#[derive(Debug, Clone, Serialize)]
pub struct ClassSummary {
    pub class: String,
    pub tensors_checked: usize,
    pub worst_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceSummary {
    pub name: String,
    pub instances: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl EquivalenceSummary {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub tolerance: f64,
    pub classes: Vec<ClassSummary>,
    pub equivalences: Vec<EquivalenceSummary>,
    pub frozen_grads_zero: bool,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.frozen_grads_zero
            && TENSOR_CLASSES
                .iter()
                .all(|c| self.classes.iter().any(|s| s.class == *c && s.tensors_checked > 0))
            && self.classes.iter().all(|c| c.worst_rel_err < self.tolerance)
            && self.equivalences.iter().all(EquivalenceSummary::passed)
    }

    pub fn class(&self, name: &str) -> Option<&ClassSummary> {
        self.classes.iter().find(|c| c.class == name)
    }

    fn record(&mut self, report: &GradReport, prefix: &str) {
        self.frozen_grads_zero &= report.frozen_grads_zero();
        for t in report.tensors.iter().filter(|t| t.trainable) {
            let class = tensor_class(&t.name, prefix);
            match self.classes.iter_mut().find(|c| c.class == class) {
                Some(c) => {
                    c.tensors_checked += 1;
                    c.worst_rel_err = c.worst_rel_err.max(t.max_rel_err);
                }
                None => self.classes.push(ClassSummary {
                    class,
                    tensors_checked: 1,
                    worst_rel_err: t.max_rel_err,
                }),
            }
        }
    }
}

fn tensor_class(name: &str, prefix: &str) -> String {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    let class = if name.contains("prefix.keys") {
        "P_k"
    } else if name.contains("prefix.values") {
        "P_v"
    } else if name.contains("prefix.scale") {
        "S_p"
    } else if name.contains("lora") {
        match leaf {
            "down" => "lora.W_down",
            "up" => "lora.W_up",
            _ => "lora.s",
        }
    } else if name.contains("adapter") {
        match leaf {
            "down" => "adapter.W_down",
            "up" => "adapter.W_up",
            _ => "adapter.s",
        }
    } else if name.contains("ln") {
        if leaf == "gain" {
            "ln.gain"
        } else {
            "ln.bias"
        }
    } else {
        return format!("{prefix}.{name}");
    };
    class.to_string()
}

/// Moves every trainable tensor away from its (often zero) initial value so
/// that no gradient is identically zero.
pub fn randomize_trainables<M: HasParams + ?Sized>(model: &mut M, std: f64, rng: &mut ChaCha8Rng) {
    for (_, p) in model.params_mut() {
        if p.trainable {
            let noise = Tensor::randn(p.value.shape(), std, rng);
            p.value.add_assign(&noise).expect("same shape");
        }
    }
}

fn corrupt_sp_gradient<M: HasParams + ?Sized>(model: &mut M) {
    for (name, p) in model.params_mut() {
        if name.ends_with("prefix.scale") {
            p.grad = p.grad.scale(1.5);
        }
    }
}

fn block_check(
    cfg: &GradcheckConfig,
    placement: AdapterPlacement,
    mask: AttnMask,
    seed: u64,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.width;
    let mut block = Block::new(d, cfg.heads, 2 * d, mask, &mut rng)?;
    let petl = PetlConfig {
        prefix_len: cfg.prefix_len,
        lora_rank: cfg.lora_rank,
        adapter_bottleneck: cfg.adapter_bottleneck,
        s_p_init: 1.0 + 9.0 * (seed % 2) as f64,
        placement,
        ..PetlConfig::default()
    };
    block.attach_petl(&petl, &mut rng)?;
    randomize_trainables(&mut block, 0.3, &mut rng);
    let x = Tensor::randn(&[6, d], 1.0, &mut rng);
    let w = Tensor::randn(&[6, d], 1.0, &mut rng);
    let inject = cfg.inject_fault;
    check_gradient(
        &mut block,
        |b| b.forward(&x).expect("validated shapes").0.dot(&w),
        |b| {
            let (_, cache) = b.forward(&x).expect("validated shapes");
            b.backward(&cache, &w).expect("validated shapes");
            if inject {
                corrupt_sp_gradient(b);
            }
        },
        GradCheckOptions {
            seed,
            ..GradCheckOptions::default()
        },
    )
}

/// Two embedding matrices as trainable tensors.
struct EmbeddingPair {
    image: ParamTensor,
    text: ParamTensor,
}

impl HasParams for EmbeddingPair {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ParamTensor)>) {
        out.push((join(prefix, "F_v"), &self.image));
        out.push((join(prefix, "F_t"), &self.text));
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut ParamTensor)>,
    ) {
        out.push((join(prefix, "F_v"), &mut self.image));
        out.push((join(prefix, "F_t"), &mut self.text));
    }
}

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(&[n, d], 1.0, rng);
    for i in 0..n {
        let norm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        t.row_mut(i).iter_mut().for_each(|v| *v /= norm);
    }
    t
}

fn loss_checks(seed: u64, report: &mut OracleReport) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11);
    let ids = [0, 1, 2, 1, 3, 0];
    let y = identity_labels(&ids, &ids);
    for tau in [0.5, 0.1] {
        let mut pair = EmbeddingPair {
            image: ParamTensor::trainable(unit_rows(6, 8, &mut rng)),
            text: ParamTensor::trainable(unit_rows(6, 8, &mut rng)),
        };
        let cfg = LossConfig {
            tau,
            ..LossConfig::default()
        };
        let sdm = check_gradient(
            &mut pair,
            |p| bidirectional_sdm_raw(&p.image.value, &p.text.value, &y, &cfg).expect("shapes").total,
            |p| {
                let out = bidirectional_sdm_raw(&p.image.value, &p.text.value, &y, &cfg).expect("shapes");
                p.image.accumulate(&out.d_image);
                p.text.accumulate(&out.d_text);
            },
            GradCheckOptions::default(),
        )?;
        report.record(&sdm, "sdm");
        let itc = check_gradient(
            &mut pair,
            |p| itc_loss_raw(&p.image.value, &p.text.value, tau).expect("shapes").total,
            |p| {
                let out = itc_loss_raw(&p.image.value, &p.text.value, tau).expect("shapes");
                p.image.accumulate(&out.d_image);
                p.text.accumulate(&out.d_text);
            },
            GradCheckOptions::default(),
        )?;
        report.record(&itc, "itc");
    }
    Ok(())
}

fn random_attention(
    cfg: &GradcheckConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(AttentionWeights, PrefixBank, LoraPair, LoraPair)> {
    let d = cfg.width;
    let w = AttentionWeights::new(d, cfg.heads, rng)?;
    let mut prefix = PrefixBank::new(cfg.prefix_len, d, 1.0, rng);
    randomize_trainables(&mut prefix, 0.5, rng);
    prefix.scale.value = Tensor::scalar(1.0);
    let mut lk = LoraPair::new(d, cfg.lora_rank, rng)?;
    let mut lv = LoraPair::new(d, cfg.lora_rank, rng)?;
    randomize_trainables(&mut lk, 0.3, rng);
    randomize_trainables(&mut lv, 0.3, rng);
    Ok((w, prefix, lk, lv))
}

/// `S_p = 1` attention against its gated two-term rewrite, per head.
pub fn prefix_equivalence(cfg: &GradcheckConfig, instances: usize, seed: u64) -> Result<EquivalenceSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (w, prefix, lk, lv) = random_attention(cfg, &mut rng)?;
        let mask = if i % 2 == 0 { AttnMask::None } else { AttnMask::Causal };
        let x = Tensor::randn(&[1 + i % 7, cfg.width], 1.0, &mut rng);
        let (_, cache) = attention_forward(&x, &w, Some(&prefix), Some(&lk), Some(&lv), mask)?;
        let reference = decomposed_prefix_heads(&x, &w, &prefix, Some(&lk), Some(&lv), mask)?;
        worst = worst.max(cache.heads_out().max_abs_diff(&reference));
    }
    Ok(EquivalenceSummary {
        name: "prefix_decomposition".into(),
        instances,
        worst,
        tolerance: 1e-10,
    })
}

/// `grad(P_v)` at `S_p = 10` against ten times `grad(P_v)` at `S_p = 1`,
/// under a loss linear in the attention output.
pub fn sp_gradient_scaling(cfg: &GradcheckConfig, instances: usize, seed: u64) -> Result<EquivalenceSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (w, prefix, _, _) = random_attention(cfg, &mut rng)?;
        let mask = if i % 2 == 0 { AttnMask::None } else { AttnMask::Causal };
        let x = Tensor::randn(&[5, cfg.width], 1.0, &mut rng);
        let dy = Tensor::randn(&[5, cfg.width], 1.0, &mut rng);
        let grad_at = |s_p: f64| -> Result<Tensor> {
            let mut attn = MultiHeadAttention::new(w.clone(), mask);
            let mut bank = prefix.clone();
            bank.scale.value = Tensor::scalar(s_p);
            attn.prefix = Some(bank);
            let (_, cache) = attn.forward(&x)?;
            attn.backward(&cache, &dy)?;
            Ok(attn.prefix.expect("attached").values.grad)
        };
        let g1 = grad_at(1.0)?;
        let g10 = grad_at(10.0)?;
        for (a, b) in g10.data().iter().zip(g1.data()) {
            let expected = 10.0 * b;
            worst = worst.max((a - expected).abs() / expected.abs().max(1e-300));
        }
    }
    Ok(EquivalenceSummary {
        name: "sp_gradient_scaling".into(),
        instances,
        worst,
        tolerance: 1e-9,
    })
}

/// Attention with live LoRA pairs against the same attention after merging.
pub fn lora_merge_equivalence(cfg: &GradcheckConfig, instances: usize, seed: u64) -> Result<EquivalenceSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (w, prefix, lk, lv) = random_attention(cfg, &mut rng)?;
        let mask = if i % 2 == 0 { AttnMask::None } else { AttnMask::Causal };
        let mut attn = MultiHeadAttention::new(w, mask);
        attn.prefix = Some(prefix);
        attn.lora_k = Some(lk);
        attn.lora_v = Some(lv);
        let x = Tensor::randn(&[5, cfg.width], 1.0, &mut rng);
        let before = attn.forward(&x)?.0;
        attn.merge_lora()?;
        worst = worst.max(before.max_abs_diff(&attn.forward(&x)?.0));
    }
    Ok(EquivalenceSummary {
        name: "lora_merge".into(),
        instances,
        worst,
        tolerance: 1e-9,
    })
}

/// `Q(K+ΔK)ᵀ(V+ΔV)` against the sum of its four expansion terms.
pub fn expansion_identity(cfg: &GradcheckConfig, instances: usize, seed: u64) -> Result<EquivalenceSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let d = cfg.width;
    for i in 0..instances {
        let n = 2 + i % 6;
        let q = Tensor::randn(&[n, d], 1.0, &mut rng);
        let k = Tensor::randn(&[n, d], 1.0, &mut rng);
        let v = Tensor::randn(&[n, d], 1.0, &mut rng);
        let dk = Tensor::randn(&[n, d], 0.1, &mut rng);
        let dv = Tensor::randn(&[n, d], 0.1, &mut rng);
        let direct = matmul(&matmul_nt(&q, &k.add(&dk)?)?, &v.add(&dv)?)?;
        let terms = lora_expansion_terms(&q, &k, &v, &dk, &dv)?;
        let sum = terms[0].add(&terms[1])?.add(&terms[2])?.add(&terms[3])?;
        worst = worst.max(direct.max_abs_diff(&sum));
    }
    Ok(EquivalenceSummary {
        name: "attention_expansion".into(),
        instances,
        worst,
        tolerance: 1e-9,
    })
}

/// The full suite: block-level gradient checks for every placement under
/// both masks and every seed, loss gradients, and the equivalence oracles.
pub fn run_suite(cfg: &GradcheckConfig) -> Result<OracleReport> {
    let mut report = OracleReport {
        tolerance: cfg.tolerance,
        classes: Vec::new(),
        equivalences: Vec::new(),
        frozen_grads_zero: true,
    };
    for seed in 0..cfg.seeds as u64 {
        for (pi, placement) in AdapterPlacement::ALL.into_iter().enumerate() {
            for (mi, mask) in [AttnMask::None, AttnMask::Causal].into_iter().enumerate() {
                let r = block_check(cfg, placement, mask, seed * 100 + pi as u64 * 10 + mi as u64)?;
                report.record(&r, "block");
            }
        }
        loss_checks(seed, &mut report)?;
    }
    report.equivalences.push(prefix_equivalence(cfg, 100, 1)?);
    report.equivalences.push(sp_gradient_scaling(cfg, 20, 2)?);
    report.equivalences.push(lora_merge_equivalence(cfg, 20, 3)?);
    report.equivalences.push(expansion_identity(cfg, 100, 4)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_toy_dims() {
        let cfg = GradcheckConfig {
            seeds: 1,
            ..GradcheckConfig::default()
        };
        let report = run_suite(&cfg).unwrap();
        for c in &report.classes {
            assert!(c.worst_rel_err < 1e-4, "{} {}", c.class, c.worst_rel_err);
        }
        assert!(report.passed(), "{report:#?}");
    }

    #[test]
    fn injected_fault_fails_the_suite() {
        let cfg = GradcheckConfig {
            seeds: 1,
            inject_fault: true,
            ..GradcheckConfig::default()
        };
        let report = run_suite(&cfg).unwrap();
        assert!(!report.passed());
        assert!(report.class("S_p").unwrap().worst_rel_err > 1e-2);
        assert!(report.class("P_v").unwrap().worst_rel_err < 1e-4);
    }
}
