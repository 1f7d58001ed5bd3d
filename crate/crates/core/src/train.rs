//! Pretraining, frozen-backbone tuning and the transfer experiment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::block::PetlConfig;
use crate::data::{Corpus, Split};
use crate::encoder::{partition_params, stack, DualEncoder, ModelConfig, ParamPartition};
use crate::error::{Error, Result};
use crate::gradcheck::HasParams;
use crate::loss::{batch_loss, identity_labels, LossConfig};
use crate::metrics::{evaluate, RetrievalResult};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{matmul_nt, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 32,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::config("batch and lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        self.loss.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Mixed into the run seed for the tuning stage, so tuning draws do not
/// replay the pretraining stream.
pub const TUNE_SEED_SALT: u64 = 0x5eed;

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(8)
}

/// Order-preserving parallel map over a slice.
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let chunk = items.len().div_ceil(workers()).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(|| c.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// One pass over the training pairs per epoch; returns the mean batch loss
/// of each epoch.
pub fn train(
    model: &mut DualEncoder,
    corpus: &Corpus,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let pairs = corpus.text_indices(Split::Train);
    if pairs.is_empty() {
        return Err(Error::config("corpus has no training pairs"));
    }
    let mut opt = Adam::new(cfg.adam());
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut order = pairs.clone();
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            total += train_step(model, corpus, chunk, cfg, rng, &mut opt)?;
            batches += 1;
        }
        curve.push(total / batches as f64);
    }
    Ok(curve)
}

fn train_step(
    model: &mut DualEncoder,
    corpus: &Corpus,
    texts: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    opt: &mut Adam,
) -> Result<f64> {
    // Masking draws come from the run generator, in batch order, before any
    // parallel work so that results do not depend on thread count.
    let framed: Vec<Vec<usize>> = texts
        .iter()
        .map(|&t| {
            let mut f = model.text.frame(&corpus.texts[t].tokens)?;
            crate::encoder::TextTower::mask_tokens(&mut f, model.config.text.mask_rate, rng);
            Ok(f)
        })
        .collect::<Result<_>>()?;
    let frozen: &DualEncoder = model;
    let images = par_map(texts, |&t| {
        frozen.image.forward(&corpus.images[corpus.texts[t].image].patches)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let text_out = par_map(&framed, |f| frozen.text.forward_framed(f.clone()))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let fv = stack(images.iter().map(|(e, _)| e.clone()).collect())?;
    let ft = stack(text_out.iter().map(|(e, _)| e.clone()).collect())?;
    let ids: Vec<usize> = texts.iter().map(|&t| corpus.texts[t].identity).collect();
    let out = batch_loss(&fv, &ft, &identity_labels(&ids, &ids), &cfg.loss)?;

    model.zero_grads();
    for (i, (_, cache)) in images.iter().enumerate() {
        model.image.backward(cache, out.d_image.row(i))?;
    }
    for (i, (_, cache)) in text_out.iter().enumerate() {
        model.text.backward(cache, out.d_text.row(i))?;
    }
    opt.step(model);
    Ok(out.total)
}

/// Builds a fresh model and trains every tensor of it.
pub fn pretrain(
    config: &ModelConfig,
    corpus: &Corpus,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(DualEncoder, Vec<f64>)> {
    let mut model = DualEncoder::new(config, rng)?;
    model.set_backbone_trainable(true);
    let curve = train(&mut model, corpus, cfg, rng)?;
    model.set_backbone_trainable(false);
    Ok((model, curve))
}

/// Attaches tuning modules and trains only them. With nothing trainable
/// the model is left exactly as attached.
pub fn tune(
    model: &mut DualEncoder,
    petl: &PetlConfig,
    corpus: &Corpus,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    model.attach_petl(petl, rng)?;
    if partition_params(model).trainable_count() == 0 {
        return Ok(Vec::new());
    }
    train(model, corpus, cfg, rng)
}

/// Text embeddings as queries, image embeddings as gallery.
pub fn similarity_matrix(model: &DualEncoder, corpus: &Corpus, split: Split) -> Result<Tensor> {
    let texts = corpus.text_indices(split);
    let images = corpus.image_indices(split);
    let ft = par_map(&texts, |&t| model.encode_text(&corpus.texts[t].tokens))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let fv = par_map(&images, |&i| model.encode_image(&corpus.images[i].patches))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    matmul_nt(&stack(ft)?, &stack(fv)?)
}

pub fn evaluate_split(model: &DualEncoder, corpus: &Corpus, split: Split) -> Result<RetrievalResult> {
    let s = similarity_matrix(model, corpus, split)?;
    let queries: Vec<usize> = corpus
        .text_indices(split)
        .iter()
        .map(|&t| corpus.texts[t].identity)
        .collect();
    let gallery: Vec<usize> = corpus
        .image_indices(split)
        .iter()
        .map(|&i| corpus.images[i].identity)
        .collect();
    evaluate(&s, &queries, &gallery, workers())
}

/// Hash over the names and exact values of every frozen tensor.
pub fn frozen_fingerprint(model: &impl HasParams) -> u64 {
    fingerprint_where(model, |trainable| !trainable)
}

/// Hash over the names and exact values of every tensor.
pub fn content_fingerprint(model: &impl HasParams) -> u64 {
    fingerprint_where(model, |_| true)
}

fn fingerprint_where(model: &impl HasParams, keep: impl Fn(bool) -> bool) -> u64 {
    let mut h = Sha256::new();
    for (name, p) in model.params() {
        if !keep(p.trainable) {
            continue;
        }
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

#[derive(Debug, Clone, Serialize)]
pub struct TransferOutcome {
    pub seed: u64,
    pub zero_shot: RetrievalResult,
    pub tuned: RetrievalResult,
    pub partition: ParamPartition,
    pub tune_losses: Vec<f64>,
    /// Frozen tensors hash-identical before and after tuning.
    pub backbone_intact: bool,
}

/// Tunes a copy of `backbone` on `downstream` and evaluates it before and
/// after on the downstream test split.
pub fn transfer_from_backbone(
    backbone: &DualEncoder,
    downstream: &Corpus,
    petl: &PetlConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(DualEncoder, TransferOutcome)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zero_shot = evaluate_split(backbone, downstream, Split::Test)?;
    let mut model = backbone.clone();
    model.attach_petl(petl, &mut rng)?;
    let before = frozen_fingerprint(&model);
    let tune_losses = if partition_params(&model).trainable_count() == 0 {
        Vec::new()
    } else {
        train(&mut model, downstream, cfg, &mut rng)?
    };
    let backbone_intact = frozen_fingerprint(&model) == before;
    let tuned = evaluate_split(&model, downstream, Split::Test)?;
    let partition = partition_params(&model);
    Ok((
        model,
        TransferOutcome {
            seed,
            zero_shot,
            tuned,
            partition,
            tune_losses,
            backbone_intact,
        },
    ))
}

/// Pretrain on `base`, freeze, tune on `downstream`, evaluate both ways.
pub fn run_transfer_experiment(
    model_cfg: &ModelConfig,
    base: &Corpus,
    downstream: &Corpus,
    pretrain_cfg: &TrainConfig,
    tune_cfg: &TrainConfig,
    petl: &PetlConfig,
    seed: u64,
) -> Result<TransferOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (backbone, _) = pretrain(model_cfg, base, pretrain_cfg, &mut rng)?;
    Ok(transfer_from_backbone(&backbone, downstream, petl, tune_cfg, seed ^ TUNE_SEED_SALT)?.1)
}
