//! `UPTWR1` weight archives.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      6 bytes  "UPTWR1"
//! flags      u32      bit 0 delta, bit 1 merged
//! arch       u64      architecture fingerprint
//! base       u64      content fingerprint of the backbone a delta/merge came from (0 if none)
//! count      u32
//! count × { name_len u32, name utf-8, ndim u32, dims u64 × ndim, trainable u8, offset u64 }
//! payload_len u64     bytes
//! payload    f64 × (payload_len / 8)
//! checksum   u64      first 8 bytes of SHA-256 over everything above
//! ```
//!
//! `offset` is the byte offset of the tensor's data within the payload.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::block::PetlConfig;
use crate::encoder::{DualEncoder, ModelConfig};
use crate::error::{Error, Result};
use crate::gradcheck::HasParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"UPTWR1";
const FLAG_DELTA: u32 = 1;
const FLAG_MERGED: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightArchive {
    pub delta: bool,
    pub merged: bool,
    pub arch_fingerprint: u64,
    pub base_fingerprint: u64,
    pub tensors: Vec<ArchiveEntry>,
}

#[derive(Serialize)]
struct ArchDescriptor<'a> {
    model: &'a ModelConfig,
    petl: Option<&'a PetlConfig>,
    merged: bool,
}

/// Hash of the canonical JSON describing which tensors exist and how
/// they are shaped.
pub fn architecture_fingerprint(model: &ModelConfig, petl: Option<&PetlConfig>, merged: bool) -> u64 {
    let json = serde_json::to_vec(&ArchDescriptor { model, petl, merged })
        .expect("config types always serialize");
    let digest = Sha256::digest(&json);
    u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
}

impl WeightArchive {
    /// Every tensor of the model.
    pub fn full(model: &DualEncoder, arch_fingerprint: u64, base_fingerprint: u64) -> Self {
        Self {
            delta: false,
            merged: model.merged,
            arch_fingerprint,
            base_fingerprint,
            tensors: entries(model, |_| true),
        }
    }

    /// Only the trainable tensors.
    pub fn trainables(model: &DualEncoder, arch_fingerprint: u64, base_fingerprint: u64) -> Self {
        Self {
            delta: true,
            merged: false,
            arch_fingerprint,
            base_fingerprint,
            tensors: entries(model, |t| t),
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveEntry> {
        self.tensors.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let flags = if self.delta { FLAG_DELTA } else { 0 } | if self.merged { FLAG_MERGED } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&self.arch_fingerprint.to_le_bytes());
        out.extend_from_slice(&self.base_fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for e in &self.tensors {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
            for &dim in e.value.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            out.push(u8::from(e.trainable));
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * e.value.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for e in &self.tensors {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Corrupt("not a UPTWR1 archive".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if checksum(body) != stored {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        let mut r = Reader {
            bytes: body,
            pos: MAGIC.len(),
        };
        let flags = r.u32()?;
        if flags & !(FLAG_DELTA | FLAG_MERGED) != 0 {
            return Err(Error::Corrupt(format!("unknown flag bits {flags:#x}")));
        }
        let arch_fingerprint = r.u64()?;
        let base_fingerprint = r.u64()?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Corrupt("tensor name is not utf-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(Error::Corrupt(format!("bad trainable byte {b} for {name}"))),
            };
            let offset = r.u64()?;
            manifest.push((name, shape, trainable, offset));
        }
        let payload_len = r.u64()? as usize;
        let payload = r.take(payload_len)?;
        if r.pos != body.len() {
            return Err(Error::Corrupt("trailing bytes after payload".into()));
        }
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, shape, trainable, offset) in manifest {
            let numel: usize = shape.iter().product();
            let start = offset as usize;
            let end = start
                .checked_add(numel * 8)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| Error::Corrupt(format!("tensor {name} runs past the payload")))?;
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(ArchiveEntry {
                name,
                trainable,
                value: Tensor::new(shape, data).map_err(|e| Error::Corrupt(e.to_string()))?,
            });
        }
        Ok(Self {
            delta: flags & FLAG_DELTA != 0,
            merged: flags & FLAG_MERGED != 0,
            arch_fingerprint,
            base_fingerprint,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn entries(model: &DualEncoder, keep: impl Fn(bool) -> bool) -> Vec<ArchiveEntry> {
    model
        .params()
        .into_iter()
        .filter(|(_, p)| keep(p.trainable))
        .map(|(name, p)| ArchiveEntry {
            name,
            trainable: p.trainable,
            value: p.value.clone(),
        })
        .collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt("archive is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Copies archived values into the model. With `exact`, the archive must
/// cover every tensor of the model; otherwise it may cover a subset.
fn load_values(model: &mut DualEncoder, archive: &WeightArchive, exact: bool) -> Result<()> {
    let mut by_name: HashMap<&str, &ArchiveEntry> =
        archive.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    for (name, p) in model.params_mut() {
        match by_name.remove(name.as_str()) {
            Some(e) => {
                if e.value.shape() != p.value.shape() {
                    return Err(Error::Corrupt(format!(
                        "{name}: archived shape {:?}, model expects {:?}",
                        e.value.shape(),
                        p.value.shape()
                    )));
                }
                p.value = e.value.clone();
            }
            None if exact => return Err(Error::Corrupt(format!("archive lacks tensor {name}"))),
            None => {}
        }
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Corrupt(format!("archive has unknown tensor {extra}")));
    }
    Ok(())
}

/// A backbone straight out of pretraining.
pub fn backbone_archive(model: &DualEncoder) -> WeightArchive {
    WeightArchive::full(model, architecture_fingerprint(&model.config, None, false), 0)
}

/// Trainable tensors of a tuned model, keyed to the backbone it grew from.
pub fn delta_archive(model: &DualEncoder, backbone: &WeightArchive) -> WeightArchive {
    WeightArchive::trainables(
        model,
        architecture_fingerprint(&model.config, Some(&model.petl), false),
        backbone_fingerprint(backbone),
    )
}

/// Fingerprint a delta must carry to apply to this backbone archive.
pub fn backbone_fingerprint(backbone: &WeightArchive) -> u64 {
    let mut h = Sha256::new();
    for e in &backbone.tensors {
        h.update((e.name.len() as u64).to_le_bytes());
        h.update(e.name.as_bytes());
        for v in e.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
}

/// Fixed generator for scaffolding whose values are overwritten on load.
fn scaffold_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

/// Rebuilds a model from a backbone archive and, optionally, a delta.
/// A merged archive stands alone.
pub fn assemble(
    config: &ModelConfig,
    petl: &PetlConfig,
    backbone: &WeightArchive,
    delta: Option<&WeightArchive>,
) -> Result<DualEncoder> {
    if backbone.delta {
        return Err(Error::Fingerprint(
            "expected a backbone or merged archive, got a delta".into(),
        ));
    }
    let mut rng = scaffold_rng();
    let mut model = DualEncoder::new(config, &mut rng)?;
    if backbone.merged {
        if delta.is_some() {
            return Err(Error::State("a merged archive already contains its tuning tensors".into()));
        }
        let want = architecture_fingerprint(config, Some(petl), true);
        if backbone.arch_fingerprint != want {
            return Err(Error::Fingerprint(format!(
                "merged archive was built for architecture {:016x}, config gives {want:016x}",
                backbone.arch_fingerprint
            )));
        }
        model.attach_petl(petl, &mut rng)?;
        model.merge_lora()?;
        load_values(&mut model, backbone, true)?;
        return Ok(model);
    }
    let want = architecture_fingerprint(config, None, false);
    if backbone.arch_fingerprint != want {
        return Err(Error::Fingerprint(format!(
            "backbone was built for architecture {:016x}, config gives {want:016x}",
            backbone.arch_fingerprint
        )));
    }
    load_values(&mut model, backbone, true)?;
    model.set_backbone_trainable(false);
    if let Some(delta) = delta {
        if !delta.delta {
            return Err(Error::Fingerprint("--delta archive is not a delta".into()));
        }
        let want = architecture_fingerprint(config, Some(petl), false);
        if delta.arch_fingerprint != want {
            return Err(Error::Fingerprint(format!(
                "delta was built for architecture {:016x}, config gives {want:016x}",
                delta.arch_fingerprint
            )));
        }
        let base = backbone_fingerprint(backbone);
        if delta.base_fingerprint != base {
            return Err(Error::Fingerprint(format!(
                "delta belongs to backbone {:016x}, this backbone is {base:016x}",
                delta.base_fingerprint
            )));
        }
        model.attach_petl(petl, &mut rng)?;
        load_trainables(&mut model, delta)?;
    }
    Ok(model)
}

fn load_trainables(model: &mut DualEncoder, delta: &WeightArchive) -> Result<()> {
    let expected: Vec<String> = model
        .params()
        .into_iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n)
        .collect();
    let got: Vec<&str> = delta.tensors.iter().map(|e| e.name.as_str()).collect();
    if got != expected {
        return Err(Error::Corrupt(format!(
            "delta holds {} tensors, configuration expects {}",
            got.len(),
            expected.len()
        )));
    }
    load_values(model, delta, false)
}

/// Folds LoRA of `backbone` + `delta` and returns the standalone archive.
pub fn merge_archives(
    config: &ModelConfig,
    petl: &PetlConfig,
    backbone: &WeightArchive,
    delta: &WeightArchive,
) -> Result<WeightArchive> {
    if backbone.merged || delta.merged {
        return Err(Error::State("input is already merged".into()));
    }
    let mut model = assemble(config, petl, backbone, Some(delta))?;
    model.merge_lora()?;
    Ok(WeightArchive::full(
        &model,
        architecture_fingerprint(config, Some(petl), true),
        backbone_fingerprint(backbone),
    ))
}
