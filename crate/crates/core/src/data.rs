//! Synthetic identity-paired corpus.
//!
//! Each identity is a code of `latent_dim` attributes, each taking one of
//! `values_per_attribute` values. Images are grids of patch features where
//! every patch renders one attribute's prototype plus noise; texts spell the
//! attributes as tokens from a fixed codebook with random filler tokens
//! mixed in. `domain_shift` rotates the image prototypes towards a second
//! prototype set and permutes the codebook for a share of the attributes.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{ModelConfig, FIRST_CONTENT_TOKEN};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub test_identities: usize,
    pub images_per_identity: usize,
    pub texts_per_image: usize,
    /// Attributes per identity.
    pub latent_dim: usize,
    pub values_per_attribute: usize,
    pub filler_tokens: usize,
    pub max_fillers: usize,
    pub noise: f64,
    pub domain_shift: f64,
    /// Fixes prototypes and codebook.
    pub seed: u64,
    /// Fixes which identities are drawn and their observation noise.
    pub sample_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_identities: 64,
            test_identities: 32,
            images_per_identity: 2,
            texts_per_image: 2,
            latent_dim: 6,
            values_per_attribute: 4,
            filler_tokens: 8,
            max_fillers: 2,
            noise: 0.5,
            domain_shift: 0.0,
            seed: 7,
            sample_seed: 11,
        }
    }
}

/// What the model dictates about the observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub num_patches: usize,
    pub patch_dim: usize,
    pub vocab: usize,
    pub max_len: usize,
}

impl Geometry {
    pub fn of(model: &ModelConfig) -> Self {
        Self {
            num_patches: model.image.num_patches(),
            patch_dim: model.image.patch_dim(),
            vocab: model.text.vocab,
            max_len: model.text.max_len,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self, geo: &Geometry) -> Result<()> {
        let (k, v) = (self.latent_dim, self.values_per_attribute);
        if k == 0 || v < 2 || self.images_per_identity == 0 || self.texts_per_image == 0 {
            return Err(Error::config(
                "need at least one attribute, two values, one image and one text per identity",
            ));
        }
        if !(0.0..=1.0).contains(&self.domain_shift) {
            return Err(Error::config(format!("domain_shift {} outside [0, 1]", self.domain_shift)));
        }
        let needed = FIRST_CONTENT_TOKEN + k * v + self.filler_tokens;
        if needed > geo.vocab {
            return Err(Error::config(format!("codebook needs {needed} ids, vocab has {}", geo.vocab)));
        }
        if k + self.max_fillers + 2 > geo.max_len {
            return Err(Error::config(format!(
                "texts of up to {} tokens do not fit max_len {}",
                k + self.max_fillers + 2,
                geo.max_len
            )));
        }
        if self.max_fillers > 0 && self.filler_tokens == 0 {
            return Err(Error::config("max_fillers > 0 needs filler tokens"));
        }
        let codes = (v as f64).powi(k as i32);
        if ((self.num_identities + self.test_identities) as f64) > codes {
            return Err(Error::config(format!("only {codes} distinct identities exist")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub identity: usize,
    pub split: Split,
    pub patches: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextRecord {
    pub identity: usize,
    /// Index into `Corpus::images` of the image this text describes.
    pub image: usize,
    pub split: Split,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub images: Vec<ImageRecord>,
    pub texts: Vec<TextRecord>,
}

impl Corpus {
    pub fn image_indices(&self, split: Split) -> Vec<usize> {
        (0..self.images.len()).filter(|&i| self.images[i].split == split).collect()
    }

    pub fn text_indices(&self, split: Split) -> Vec<usize> {
        (0..self.texts.len()).filter(|&i| self.texts[i].split == split).collect()
    }
}

/// The fixed latent→observation maps of one domain.
struct World {
    prototypes: Vec<Vec<Vec<f64>>>,
    codebook: Vec<Vec<usize>>,
    fillers: Vec<usize>,
}

impl World {
    fn new(spec: &SyntheticSpec, geo: &Geometry) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (k, v) = (spec.latent_dim, spec.values_per_attribute);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<Vec<f64>>> {
            (0..k)
                .map(|_| {
                    (0..v)
                        .map(|_| (0..geo.patch_dim).map(|_| rng.sample(StandardNormal)).collect())
                        .collect()
                })
                .collect()
        };
        let base = draw(&mut rng);
        let alt = draw(&mut rng);
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng);

        let theta = spec.domain_shift * std::f64::consts::FRAC_PI_2;
        let (c, s) = (theta.cos(), theta.sin());
        let prototypes = if spec.domain_shift == 0.0 {
            base
        } else {
            base.iter()
                .zip(&alt)
                .map(|(ba, aa)| {
                    ba.iter()
                        .zip(aa)
                        .map(|(b, a)| b.iter().zip(a).map(|(x, y)| c * x + s * y).collect())
                        .collect()
                })
                .collect()
        };

        let permuted: HashSet<usize> = order
            .iter()
            .take((spec.domain_shift * k as f64).round() as usize)
            .copied()
            .collect();
        let codebook = (0..k)
            .map(|a| {
                (0..v)
                    .map(|val| {
                        let shown = if permuted.contains(&a) { (val + 1) % v } else { val };
                        FIRST_CONTENT_TOKEN + a * v + shown
                    })
                    .collect()
            })
            .collect();
        let fillers = (0..spec.filler_tokens)
            .map(|f| FIRST_CONTENT_TOKEN + k * v + f)
            .collect();
        Self {
            prototypes,
            codebook,
            fillers,
        }
    }
}

/// Distinct attribute codes, `count` of them.
fn draw_codes(spec: &SyntheticSpec, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut seen = HashSet::new();
    let mut codes = Vec::with_capacity(count);
    while codes.len() < count {
        let code: Vec<usize> = (0..spec.latent_dim)
            .map(|_| rng.gen_range(0..spec.values_per_attribute))
            .collect();
        if seen.insert(code.clone()) {
            codes.push(code);
        }
    }
    codes
}

/// Corpus plus the attribute code of each identity.
pub fn generate_with_codes(spec: &SyntheticSpec, geo: &Geometry) -> Result<(Corpus, Vec<Vec<usize>>)> {
    spec.validate(geo)?;
    let world = World::new(spec, geo);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.sample_seed);
    let total = spec.num_identities + spec.test_identities;
    let codes = draw_codes(spec, total, &mut rng);
    let mut corpus = Corpus::default();
    for (identity, code) in codes.iter().enumerate() {
        let split = if identity < spec.num_identities {
            Split::Train
        } else {
            Split::Test
        };
        for _ in 0..spec.images_per_identity {
            let mut patches = Tensor::zeros(&[geo.num_patches, geo.patch_dim]);
            for p in 0..geo.num_patches {
                let a = p % spec.latent_dim;
                let proto = &world.prototypes[a][code[a]];
                for (x, m) in patches.row_mut(p).iter_mut().zip(proto) {
                    let n: f64 = rng.sample(StandardNormal);
                    *x = m + spec.noise * n;
                }
            }
            let image = corpus.images.len();
            corpus.images.push(ImageRecord {
                identity,
                split,
                patches,
            });
            for _ in 0..spec.texts_per_image {
                let mut tokens: Vec<usize> = (0..spec.latent_dim)
                    .map(|a| world.codebook[a][code[a]])
                    .collect();
                for _ in 0..rng.gen_range(0..=spec.max_fillers) {
                    let f = *world.fillers.choose(&mut rng).expect("validated");
                    let at = rng.gen_range(0..=tokens.len());
                    tokens.insert(at, f);
                }
                corpus.texts.push(TextRecord {
                    identity,
                    image,
                    split,
                    tokens,
                });
            }
        }
    }
    Ok((corpus, codes))
}

pub fn generate_dataset(spec: &SyntheticSpec, geo: &Geometry) -> Result<Corpus> {
    Ok(generate_with_codes(spec, geo)?.0)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairLine {
    identity: usize,
    image: usize,
    split: Split,
    patches: Vec<Vec<f64>>,
    tokens: Vec<usize>,
}

/// One JSON line per (image, text) pair.
pub fn export_jsonl<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    for t in &corpus.texts {
        let img = &corpus.images[t.image];
        let line = PairLine {
            identity: t.identity,
            image: t.image,
            split: t.split,
            patches: (0..img.patches.rows()).map(|r| img.patches.row(r).to_vec()).collect(),
            tokens: t.tokens.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Inverse of [`export_jsonl`]. Images are rebuilt from their first
/// occurrence and must appear in index order.
pub fn import_jsonl<R: BufRead>(input: R) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairLine = serde_json::from_str(&line)?;
        if rec.image == corpus.images.len() {
            corpus.images.push(ImageRecord {
                identity: rec.identity,
                split: rec.split,
                patches: Tensor::from_rows(&rec.patches),
            });
        } else if rec.image > corpus.images.len() {
            return Err(Error::Corrupt(format!(
                "line {}: image {} appears before image {}",
                n + 1,
                rec.image,
                corpus.images.len()
            )));
        }
        corpus.texts.push(TextRecord {
            identity: rec.identity,
            image: rec.image,
            split: rec.split,
            tokens: rec.tokens,
        });
    }
    Ok(corpus)
}
