//! Two-tower encoder: a patch/CLS image transformer and a BOS/EOS causal
//! text transformer, each ending in a projection to a shared unit sphere.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttnMask;
use crate::block::{Block, BlockCache, PetlConfig};
use crate::adapter::LayerNormParams;
use crate::error::{Error, Result};
use crate::gradcheck::{join, HasParams};
use crate::tensor::{
    l2_normalize, l2_normalize_backward, matmul, matmul_nt, matmul_tn, LayerNormCache,
    ParamTensor, Tensor,
};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const MASK: usize = 2;
/// First id available to content tokens.
pub const FIRST_CONTENT_TOKEN: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageEncoderConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub channels: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            image_h: 16,
            image_w: 8,
            patch: 4,
            channels: 1,
            d: 32,
            layers: 2,
            heads: 4,
        }
    }
}

impl ImageEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch;
        if p == 0 || self.image_h == 0 || self.image_w == 0 || !self.image_h.is_multiple_of(p) || !self.image_w.is_multiple_of(p) {
            return Err(Error::config(format!(
                "image {}x{} does not tile into {p}x{p} patches",
                self.image_h,
                self.image_w
            )));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "image width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.image_h * self.image_w / (self.patch * self.patch)
    }

    /// Patches plus the CLS token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub vocab: usize,
    pub max_len: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub mask_rate: f64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab: 48,
            max_len: 16,
            d: 32,
            layers: 2,
            heads: 4,
            mask_rate: 0.15,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab <= FIRST_CONTENT_TOKEN || self.max_len < 2 {
            return Err(Error::config(format!(
                "text vocab {} / max_len {} too small for BOS, EOS and MASK framing",
                self.vocab, self.max_len
            )));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "text width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::config(format!("mask_rate {} outside [0, 1]", self.mask_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image: ImageEncoderConfig,
    pub text: TextEncoderConfig,
    /// Shared output dimension of both projections.
    pub embed_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image: ImageEncoderConfig::default(),
            text: TextEncoderConfig::default(),
            embed_dim: 64,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    /// ViT-B/16 image tower on 384×128 crops and the 12-layer CLIP text tower.
    pub fn full_scale() -> Self {
        Self {
            image: ImageEncoderConfig {
                image_h: 384,
                image_w: 128,
                patch: 16,
                channels: 3,
                d: 768,
                layers: 12,
                heads: 12,
            },
            text: TextEncoderConfig {
                vocab: 49408,
                max_len: 77,
                d: 512,
                layers: 12,
                heads: 8,
                mask_rate: 0.15,
            },
            embed_dim: 512,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.text.validate()?;
        if self.embed_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("embed_dim and mlp_ratio must be positive"));
        }
        Ok(())
    }
}

/// Transformer stack, final layernorm on the pooled row, and projection.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerCore {
    pub blocks: Vec<Block>,
    pub ln_final: LayerNormParams,
    pub proj: ParamTensor,
}

#[derive(Debug)]
pub struct CoreCache {
    blocks: Vec<BlockCache>,
    seq_len: usize,
    pooled: usize,
    ln: LayerNormCache,
    pooled_ln: Tensor,
    embedding: Vec<f64>,
    norm: f64,
}

impl TowerCore {
    fn new<R: Rng + ?Sized>(
        d: usize,
        layers: usize,
        heads: usize,
        mlp_ratio: usize,
        embed_dim: usize,
        mask: AttnMask,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|_| Block::new(d, heads, d * mlp_ratio, mask, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            ln_final: LayerNormParams::new(d),
            proj: ParamTensor::frozen(Tensor::randn(&[d, embed_dim], 1.0 / (d as f64).sqrt(), rng)),
        })
    }

    fn forward(&self, seq: Tensor, pooled: usize) -> Result<(Vec<f64>, CoreCache)> {
        let seq_len = seq.rows();
        let mut h = seq;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, c) = b.forward(&h)?;
            caches.push(c);
            h = out;
        }
        let (pooled_ln, ln) = self.ln_final.forward(&h.row_tensor(pooled))?;
        let raw = matmul(&pooled_ln, &self.proj.value)?;
        let (embedding, norm) = l2_normalize(raw.data());
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Contract(format!("embedding norm is {norm}")));
        }
        Ok((
            embedding.clone(),
            CoreCache {
                blocks: caches,
                seq_len,
                pooled,
                ln,
                pooled_ln,
                embedding,
                norm,
            },
        ))
    }

    fn hidden_states(&self, seq: Tensor) -> Result<Vec<Tensor>> {
        let mut h = seq;
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            h = b.forward(&h)?.0;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Returns `dL/d(seq)` for the input sequence.
    fn backward(&mut self, cache: &CoreCache, d_embedding: &[f64]) -> Result<Tensor> {
        let d_raw = l2_normalize_backward(&cache.embedding, cache.norm, d_embedding);
        let d_raw = Tensor::new(vec![1, d_raw.len()], d_raw)?;
        if self.proj.trainable {
            self.proj.accumulate(&matmul_tn(&cache.pooled_ln, &d_raw)?);
        }
        let d_pooled_ln = matmul_nt(&d_raw, &self.proj.value)?;
        let d_pooled = self.ln_final.backward(&cache.ln, &d_pooled_ln);
        let d = d_pooled.cols();
        let mut dh = Tensor::zeros(&[cache.seq_len, d]);
        dh.row_mut(cache.pooled).copy_from_slice(d_pooled.data());
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dh = b.backward(c, &dh)?;
        }
        Ok(dh)
    }

    fn set_backbone_trainable(&mut self, on: bool) {
        for b in &mut self.blocks {
            b.set_backbone_trainable(on);
        }
        self.ln_final.set_trainable(on);
        self.proj.trainable = on;
    }
}

impl HasParams for TowerCore {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ParamTensor)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.ln_final.collect_params(&join(prefix, "ln_final"), out);
        out.push((join(prefix, "proj"), &self.proj));
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut ParamTensor)>,
    ) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_params_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.ln_final.collect_params_mut(&join(prefix, "ln_final"), out);
        out.push((join(prefix, "proj"), &mut self.proj));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTower {
    pub config: ImageEncoderConfig,
    pub patch_embed: ParamTensor,
    pub cls: ParamTensor,
    pub pos: ParamTensor,
    pub core: TowerCore,
}

#[derive(Debug)]
pub struct ImageCache {
    patches: Tensor,
    core: CoreCache,
}

impl ImageCache {
    pub fn embedding(&self) -> &[f64] {
        &self.core.embedding
    }
}

impl ImageTower {
    pub fn new<R: Rng + ?Sized>(
        config: &ImageEncoderConfig,
        embed_dim: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let in_dim = config.patch_dim();
        Ok(Self {
            config: config.clone(),
            patch_embed: ParamTensor::frozen(Tensor::randn(&[in_dim, d], 1.0 / (in_dim as f64).sqrt(), rng)),
            cls: ParamTensor::frozen(Tensor::randn(&[1, d], 0.5, rng)),
            pos: ParamTensor::frozen(Tensor::randn(&[config.seq_len(), d], 0.5, rng)),
            core: TowerCore::new(d, config.layers, config.heads, mlp_ratio, embed_dim, AttnMask::None, rng)?,
        })
    }

    fn sequence(&self, patches: &Tensor) -> Result<Tensor> {
        let n = self.config.num_patches();
        if patches.shape() != [n, self.config.patch_dim()] {
            return Err(Error::Shape(format!(
                "expected {} patches of dim {}, got {:?}",
                n,
                self.config.patch_dim(),
                patches.shape()
            )));
        }
        let emb = matmul(patches, &self.patch_embed.value)?;
        let seq = Tensor::concat_rows(&[&self.cls.value, &emb])?;
        seq.add(&self.pos.value)
    }

    pub fn forward(&self, patches: &Tensor) -> Result<(Vec<f64>, ImageCache)> {
        let seq = self.sequence(patches)?;
        let (emb, core) = self.core.forward(seq, 0)?;
        Ok((
            emb,
            ImageCache {
                patches: patches.clone(),
                core,
            },
        ))
    }

    pub fn encode(&self, patches: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(patches)?.0)
    }

    pub fn hidden_states(&self, patches: &Tensor) -> Result<Vec<Tensor>> {
        self.core.hidden_states(self.sequence(patches)?)
    }

    pub fn backward(&mut self, cache: &ImageCache, d_embedding: &[f64]) -> Result<()> {
        let d_seq = self.core.backward(&cache.core, d_embedding)?;
        self.pos.accumulate(&d_seq);
        self.cls.accumulate(&d_seq.slice_rows(0, 1));
        if self.patch_embed.trainable {
            let d_emb = d_seq.slice_rows(1, d_seq.rows());
            self.patch_embed.accumulate(&matmul_tn(&cache.patches, &d_emb)?);
        }
        Ok(())
    }

    fn set_backbone_trainable(&mut self, on: bool) {
        self.patch_embed.trainable = on;
        self.cls.trainable = on;
        self.pos.trainable = on;
        self.core.set_backbone_trainable(on);
    }
}

impl HasParams for ImageTower {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ParamTensor)>) {
        out.push((join(prefix, "patch_embed"), &self.patch_embed));
        out.push((join(prefix, "cls"), &self.cls));
        out.push((join(prefix, "pos"), &self.pos));
        self.core.collect_params(prefix, out);
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut ParamTensor)>,
    ) {
        out.push((join(prefix, "patch_embed"), &mut self.patch_embed));
        out.push((join(prefix, "cls"), &mut self.cls));
        out.push((join(prefix, "pos"), &mut self.pos));
        self.core.collect_params_mut(prefix, out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextTower {
    pub config: TextEncoderConfig,
    pub token_embed: ParamTensor,
    pub pos: ParamTensor,
    pub core: TowerCore,
}

#[derive(Debug)]
pub struct TextCache {
    tokens: Vec<usize>,
    core: CoreCache,
}

impl TextCache {
    /// The framed (and possibly masked) ids that were actually encoded.
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn embedding(&self) -> &[f64] {
        &self.core.embedding
    }
}

impl TextTower {
    pub fn new<R: Rng + ?Sized>(
        config: &TextEncoderConfig,
        embed_dim: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        Ok(Self {
            config: config.clone(),
            token_embed: ParamTensor::frozen(Tensor::randn(&[config.vocab, d], 1.0, rng)),
            pos: ParamTensor::frozen(Tensor::randn(&[config.max_len, d], 0.5, rng)),
            core: TowerCore::new(d, config.layers, config.heads, mlp_ratio, embed_dim, AttnMask::Causal, rng)?,
        })
    }

    /// `[BOS, ids…, EOS]`, truncated to `max_len` with EOS kept last.
    pub fn frame(&self, ids: &[usize]) -> Result<Vec<usize>> {
        if let Some(&bad) = ids
            .iter()
            .find(|&&t| t >= self.config.vocab || t < FIRST_CONTENT_TOKEN)
        {
            return Err(Error::Contract(format!(
                "token id {bad} is not a content id in vocab of {}",
                self.config.vocab
            )));
        }
        let keep = ids.len().min(self.config.max_len - 2);
        let mut framed = Vec::with_capacity(keep + 2);
        framed.push(BOS);
        framed.extend_from_slice(&ids[..keep]);
        framed.push(EOS);
        Ok(framed)
    }

    /// Replaces each content token with MASK independently with `rate`.
    pub fn mask_tokens<R: Rng + ?Sized>(framed: &mut [usize], rate: f64, rng: &mut R) {
        let last = framed.len().saturating_sub(1);
        for t in framed.iter_mut().take(last).skip(1) {
            if rng.gen::<f64>() < rate {
                *t = MASK;
            }
        }
    }

    fn sequence(&self, framed: &[usize]) -> Result<Tensor> {
        let d = self.config.d;
        let mut seq = Tensor::zeros(&[framed.len(), d]);
        for (i, &t) in framed.iter().enumerate() {
            let row: Vec<f64> = self
                .token_embed
                .value
                .row(t)
                .iter()
                .zip(self.pos.value.row(i))
                .map(|(a, b)| a + b)
                .collect();
            seq.row_mut(i).copy_from_slice(&row);
        }
        Ok(seq)
    }

    /// Encodes pre-framed ids; no masking.
    pub fn forward_framed(&self, framed: Vec<usize>) -> Result<(Vec<f64>, TextCache)> {
        let seq = self.sequence(&framed)?;
        let (emb, core) = self.core.forward(seq, framed.len() - 1)?;
        Ok((emb, TextCache { tokens: framed, core }))
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        ids: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<(Vec<f64>, TextCache)> {
        let mut framed = self.frame(ids)?;
        if training && self.config.mask_rate > 0.0 {
            Self::mask_tokens(&mut framed, self.config.mask_rate, rng);
        }
        self.forward_framed(framed)
    }

    pub fn encode(&self, ids: &[usize]) -> Result<Vec<f64>> {
        Ok(self.forward_framed(self.frame(ids)?)?.0)
    }

    /// Block outputs for an already-framed sequence.
    pub fn hidden_states(&self, framed: &[usize]) -> Result<Vec<Tensor>> {
        self.core.hidden_states(self.sequence(framed)?)
    }

    pub fn backward(&mut self, cache: &TextCache, d_embedding: &[f64]) -> Result<()> {
        let d_seq = self.core.backward(&cache.core, d_embedding)?;
        let d = self.config.d;
        if self.pos.trainable {
            let mut dp = Tensor::zeros(&[self.config.max_len, d]);
            for i in 0..d_seq.rows() {
                dp.row_mut(i).copy_from_slice(d_seq.row(i));
            }
            self.pos.accumulate(&dp);
        }
        if self.token_embed.trainable {
            let mut dt = Tensor::zeros(&[self.config.vocab, d]);
            for (i, &t) in cache.tokens.iter().enumerate() {
                for (a, b) in dt.row_mut(t).iter_mut().zip(d_seq.row(i)) {
                    *a += b;
                }
            }
            self.token_embed.accumulate(&dt);
        }
        Ok(())
    }

    fn set_backbone_trainable(&mut self, on: bool) {
        self.token_embed.trainable = on;
        self.pos.trainable = on;
        self.core.set_backbone_trainable(on);
    }
}

impl HasParams for TextTower {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ParamTensor)>) {
        out.push((join(prefix, "token_embed"), &self.token_embed));
        out.push((join(prefix, "pos"), &self.pos));
        self.core.collect_params(prefix, out);
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut ParamTensor)>,
    ) {
        out.push((join(prefix, "token_embed"), &mut self.token_embed));
        out.push((join(prefix, "pos"), &mut self.pos));
        self.core.collect_params_mut(prefix, out);
    }
}

/// Both towers plus the tuning configuration currently attached.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub config: ModelConfig,
    pub image: ImageTower,
    pub text: TextTower,
    pub petl: PetlConfig,
    pub merged: bool,
}

impl DualEncoder {
    /// Random backbone, frozen, with no tuning modules attached.
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            image: ImageTower::new(&config.image, config.embed_dim, config.mlp_ratio, rng)?,
            text: TextTower::new(&config.text, config.embed_dim, config.mlp_ratio, rng)?,
            petl: PetlConfig::disabled(),
            merged: false,
        })
    }

    pub fn set_backbone_trainable(&mut self, on: bool) {
        self.image.set_backbone_trainable(on);
        self.text.set_backbone_trainable(on);
    }

    /// Freezes the backbone and attaches fresh tuning modules to every
    /// block of both towers.
    pub fn attach_petl<R: Rng + ?Sized>(&mut self, cfg: &PetlConfig, rng: &mut R) -> Result<()> {
        if self.merged {
            return Err(Error::State("cannot attach tuning modules to a merged model".into()));
        }
        self.set_backbone_trainable(false);
        for b in self
            .image
            .core
            .blocks
            .iter_mut()
            .chain(self.text.core.blocks.iter_mut())
        {
            b.attach_petl(cfg, rng)?;
        }
        self.petl = cfg.clone();
        Ok(())
    }

    /// Folds every LoRA pair into its key/value weight.
    pub fn merge_lora(&mut self) -> Result<()> {
        if self.merged {
            return Err(Error::State("model is already merged".into()));
        }
        for b in self
            .image
            .core
            .blocks
            .iter_mut()
            .chain(self.text.core.blocks.iter_mut())
        {
            b.attn.merge_lora()?;
        }
        self.merged = true;
        Ok(())
    }

    pub fn encode_image(&self, patches: &Tensor) -> Result<Vec<f64>> {
        self.image.encode(patches)
    }

    /// Evaluation-mode text encoding (no masking).
    pub fn encode_text(&self, ids: &[usize]) -> Result<Vec<f64>> {
        self.text.encode(ids)
    }

    pub fn encode_images(&self, patches: &[&Tensor]) -> Result<Tensor> {
        stack(patches.iter().map(|p| self.encode_image(p)).collect::<Result<Vec<_>>>()?)
    }

    pub fn encode_texts(&self, texts: &[&[usize]]) -> Result<Tensor> {
        stack(texts.iter().map(|t| self.encode_text(t)).collect::<Result<Vec<_>>>()?)
    }
}

/// Rows → `[N×d]` matrix.
pub fn stack(rows: Vec<Vec<f64>>) -> Result<Tensor> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    Tensor::new(vec![n, d], rows.into_iter().flatten().collect())
}

impl HasParams for DualEncoder {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ParamTensor)>) {
        self.image.collect_params(&join(prefix, "image"), out);
        self.text.collect_params(&join(prefix, "text"), out);
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut ParamTensor)>,
    ) {
        self.image.collect_params_mut(&join(prefix, "image"), out);
        self.text.collect_params_mut(&join(prefix, "text"), out);
    }
}

/// Named parameter counts split by the trainable flag.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ParamPartition {
    pub frozen: Vec<(String, usize)>,
    pub trainable: Vec<(String, usize)>,
}

impl ParamPartition {
    pub fn trainable_count(&self) -> usize {
        self.trainable.iter().map(|(_, n)| n).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().map(|(_, n)| n).sum()
    }

    pub fn total_count(&self) -> usize {
        self.trainable_count() + self.frozen_count()
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.trainable_count() as f64 / self.total_count() as f64
    }
}

pub fn partition_params(model: &impl HasParams) -> ParamPartition {
    let mut part = ParamPartition::default();
    for (name, p) in model.params() {
        let entry = (name, p.numel());
        if p.trainable {
            part.trainable.push(entry);
        } else {
            part.frozen.push(entry);
        }
    }
    part
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// Parameter listing for a frozen backbone with `petl` attached, derived
/// from the configuration alone. Lets full-size models be counted
/// without allocating them.
pub fn param_inventory(config: &ModelConfig, petl: &PetlConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, trainable: bool| {
        out.push(ParamSpec {
            name,
            shape,
            trainable,
        })
    };
    let e = config.embed_dim;
    let towers = [
        ("image", config.image.d, config.image.layers),
        ("text", config.text.d, config.text.layers),
    ];
    for (tower, d, layers) in towers {
        if tower == "image" {
            push("image.patch_embed".into(), vec![config.image.patch_dim(), d], false);
            push("image.cls".into(), vec![1, d], false);
            push("image.pos".into(), vec![config.image.seq_len(), d], false);
        } else {
            push("text.token_embed".into(), vec![config.text.vocab, d], false);
            push("text.pos".into(), vec![config.text.max_len, d], false);
        }
        let hidden = d * config.mlp_ratio;
        let ln_trainable = petl.tunes_layernorm();
        for i in 0..layers {
            let b = format!("{tower}.blocks.{i}");
            let adapter = |push: &mut dyn FnMut(String, Vec<usize>, bool), site: &str| {
                if petl.builds_adapters() {
                    let m = petl.adapter_bottleneck;
                    push(format!("{b}.{site}.down"), vec![d, m], true);
                    push(format!("{b}.{site}.up"), vec![m, d], true);
                    push(format!("{b}.{site}.scale"), vec![1], true);
                }
            };
            push(format!("{b}.ln1.gain"), vec![d], ln_trainable);
            push(format!("{b}.ln1.bias"), vec![d], ln_trainable);
            adapter(&mut push, "adapter1");
            for w in ["w_q", "w_k", "w_v", "w_o"] {
                push(format!("{b}.attn.{w}"), vec![d, d], false);
            }
            if petl.sprefix {
                let l = petl.prefix_len;
                push(format!("{b}.attn.prefix.keys"), vec![l, d], true);
                push(format!("{b}.attn.prefix.values"), vec![l, d], true);
                push(format!("{b}.attn.prefix.scale"), vec![1], true);
            }
            if petl.lora {
                let r = petl.lora_rank;
                for site in ["lora_k", "lora_v"] {
                    push(format!("{b}.attn.{site}.down"), vec![d, r], true);
                    push(format!("{b}.attn.{site}.up"), vec![r, d], true);
                    push(format!("{b}.attn.{site}.scale"), vec![1], true);
                }
            }
            push(format!("{b}.ln2.gain"), vec![d], ln_trainable);
            push(format!("{b}.ln2.bias"), vec![d], ln_trainable);
            adapter(&mut push, "adapter2");
            push(format!("{b}.mlp.w1"), vec![d, hidden], false);
            push(format!("{b}.mlp.b1"), vec![hidden], false);
            push(format!("{b}.mlp.w2"), vec![hidden, d], false);
            push(format!("{b}.mlp.b2"), vec![d], false);
        }
        push(format!("{tower}.ln_final.gain"), vec![d], false);
        push(format!("{tower}.ln_final.bias"), vec![d], false);
        push(format!("{tower}.proj"), vec![d, e], false);
    }
    out
}

pub fn partition_inventory(specs: &[ParamSpec]) -> ParamPartition {
    let mut part = ParamPartition::default();
    for s in specs {
        let entry = (s.name.clone(), s.shape.iter().product());
        if s.trainable {
            part.trainable.push(entry);
        } else {
            part.frozen.push(entry);
        }
    }
    part
}
