//! Binary checkpoint archives.
//!
//! Wire format: magic `KEAT`, format version as little-endian u32, entry
//! count, then a manifest of (name, rank, extents) records, then each
//! tensor's values as little-endian IEEE-754 32-bit floats in manifest
//! order. Everything needed to resume training rides along as ordinary
//! tensors: hyperparameter scalars under `hp.*`, optimizer moments under
//! `adam.*`, and the RNG state as byte tensors under `rng.*`.
//!
//! Values are quantized to f32 on the first save; loading widens them
//! exactly, so save → load → save reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{KeatError, Result};
use crate::local_attn::{LocalAttnMode, ScoreMode, WindowSource};
use crate::model::{HyperParams, KeatModel};
use crate::tensor::Tensor;
use crate::trainer::AdamState;

pub const MAGIC: [u8; 4] = *b"KEAT";
pub const VERSION: u32 = 1;

/// An ordered collection of named tensors with a binary round-trip.
#[derive(Debug, Clone, Default)]
pub struct Archive {
    entries: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new() -> Archive {
        Archive { entries: Vec::new() }
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if name.is_empty() {
            return Err(KeatError::contract("archive entries need a name"));
        }
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(KeatError::contract(format!("duplicate archive entry '{name}'")));
        }
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| KeatError::contract(format!("checkpoint is missing tensor '{name}'")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &e in tensor.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
        }
        for (_, tensor) in &self.entries {
            for v in tensor.to_f32() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Archive> {
        let mut r = Reader { bytes, pos: 0, origin };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.bad(format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(
                r.bad(format!("unsupported checkpoint version {version}, expected {VERSION}"))
            );
        }
        let count = r.u32("entry count")? as usize;
        let mut manifest: Vec<(String, Vec<usize>, usize)> = Vec::with_capacity(count);
        for i in 0..count {
            let name_len = r.u32("a manifest name length")? as usize;
            let name_bytes = r.take(name_len, "a manifest name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| r.bad(format!("manifest entry {i} has a non-UTF-8 name")))?
                .to_string();
            if manifest.iter().any(|(n, _, _)| *n == name) {
                return Err(r.bad(format!("duplicate tensor '{name}' in manifest")));
            }
            let rank = r.u32(&format!("rank of '{name}'"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let e = r.u32(&format!("an extent of '{name}'"))? as usize;
                if e == 0 {
                    return Err(r.bad(format!("tensor '{name}' has a zero extent")));
                }
                numel = numel.checked_mul(e).ok_or_else(|| {
                    r.bad(format!("tensor '{name}' has a corrupt extent (size overflows)"))
                })?;
                shape.push(e);
            }
            manifest.push((name, shape, numel));
        }
        let mut archive = Archive::new();
        for (name, shape, numel) in manifest {
            let raw = r.take(numel * 4, &format!("values of tensor '{name}'"))?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(KeatError::NonFinite(format!(
                    "tensor '{name}' in {origin} contains non-finite values"
                )));
            }
            archive.push(&name, Tensor::from_f32(shape, &values)?)?;
        }
        if r.pos != bytes.len() {
            return Err(
                r.bad(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos))
            );
        }
        Ok(archive)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Archive> {
        let bytes = fs::read(path)?;
        Archive::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Cursor over checkpoint bytes that reports truncation with context.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn bad(&self, msg: String) -> KeatError {
        KeatError::parse(self.origin, 0, msg)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.bad(format!(
                "truncated while reading {what} (need {n} bytes at offset {}, file has {})",
                self.pos,
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

// ── Scalar and byte-tensor helpers ───────────────────────────────────────────

fn push_scalar(archive: &mut Archive, name: &str, v: f64) -> Result<()> {
    archive.push(name, Tensor::scalar(v))
}

fn read_scalar(archive: &Archive, name: &str) -> Result<f64> {
    let t = archive.require(name)?;
    if t.numel() != 1 {
        return Err(KeatError::contract(format!("tensor '{name}' should be a scalar")));
    }
    Ok(t.item())
}

fn read_usize(archive: &Archive, name: &str) -> Result<usize> {
    let v = read_scalar(archive, name)?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(KeatError::contract(format!("tensor '{name}' should hold a whole number, got {v}")));
    }
    Ok(v as usize)
}

/// Bytes are stored one per value (each exactly representable in f32).
fn push_bytes(archive: &mut Archive, name: &str, bytes: &[u8]) -> Result<()> {
    let data: Vec<f64> = bytes.iter().map(|&b| b as f64).collect();
    archive.push(name, Tensor::new(vec![1, bytes.len()], data)?)
}

fn read_bytes(archive: &Archive, name: &str, len: usize) -> Result<Vec<u8>> {
    let t = archive.require(name)?;
    if t.numel() != len {
        return Err(KeatError::contract(format!(
            "tensor '{name}' should hold {len} byte values, got {}",
            t.numel()
        )));
    }
    t.data()
        .iter()
        .map(|&v| {
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                Err(KeatError::contract(format!("tensor '{name}' holds a corrupt byte value {v}")))
            } else {
                Ok(v as u8)
            }
        })
        .collect()
}

// ── Hyperparameter and mode encoding ─────────────────────────────────────────

fn local_mode_code(mode: Option<LocalAttnMode>) -> (f64, f64) {
    match mode {
        None => (0.0, 0.0),
        Some(m) => {
            let score = match m.score {
                ScoreMode::Original => 0.0,
                ScoreMode::ImprovedAbs => 1.0,
            };
            let (window, omega) = match m.window {
                WindowSource::Learned => (0.0, 0.0),
                WindowSource::Frequency(om) => (1.0, om),
            };
            (1.0 + score + 2.0 * window, omega)
        }
    }
}

fn local_mode_from_code(code: f64, omega: f64) -> Result<Option<LocalAttnMode>> {
    let score = |odd: bool| if odd { ScoreMode::ImprovedAbs } else { ScoreMode::Original };
    match code as i64 {
        0 => Ok(None),
        c @ 1..=4 => {
            let idx = c - 1;
            let window = if idx >= 2 { WindowSource::Frequency(omega) } else { WindowSource::Learned };
            Ok(Some(LocalAttnMode { score: score(idx % 2 == 1), window }))
        }
        other => Err(KeatError::contract(format!("unknown local-attention mode code {other}"))),
    }
}

fn push_hyperparams(archive: &mut Archive, hp: &HyperParams, num_classes: usize) -> Result<()> {
    push_scalar(archive, "hp.word_dim", hp.word_dim as f64)?;
    push_scalar(archive, "hp.char_dim", hp.char_dim as f64)?;
    push_scalar(archive, "hp.concept_dim", hp.concept_dim as f64)?;
    push_scalar(archive, "hp.hidden", hp.hidden as f64)?;
    push_scalar(archive, "hp.heads", hp.heads as f64)?;
    push_scalar(archive, "hp.fusion_text_dim", hp.fusion_text_dim as f64)?;
    push_scalar(archive, "hp.fusion_set_dim", hp.fusion_set_dim as f64)?;
    push_scalar(archive, "hp.gamma", hp.gamma)?;
    push_scalar(archive, "hp.lambda", hp.lambda)?;
    push_scalar(archive, "hp.dropout", hp.dropout)?;
    push_scalar(archive, "hp.learning_rate", hp.learning_rate)?;
    push_scalar(archive, "hp.beta1", hp.beta1)?;
    push_scalar(archive, "hp.beta2", hp.beta2)?;
    push_scalar(archive, "hp.epsilon", hp.epsilon)?;
    push_scalar(archive, "hp.init_std", hp.init_std)?;
    push_scalar(archive, "hp.batch_size", hp.batch_size as f64)?;
    push_scalar(archive, "hp.epochs", hp.epochs as f64)?;
    push_scalar(archive, "hp.max_concepts", hp.max_concepts as f64)?;
    push_scalar(archive, "hp.top_k", hp.top_k.map_or(-1.0, |k| k as f64))?;
    let (code, omega) = local_mode_code(hp.local_attn);
    push_scalar(archive, "hp.local_mode", code)?;
    push_scalar(archive, "hp.local_omega", omega)?;
    push_scalar(archive, "hp.use_raw_alpha", if hp.use_raw_alpha { 1.0 } else { 0.0 })?;
    push_scalar(archive, "hp.num_classes", num_classes as f64)?;
    push_bytes(archive, "hp.seed", &hp.seed.to_le_bytes())
}

fn read_hyperparams(archive: &Archive) -> Result<(HyperParams, usize)> {
    let top_k = read_scalar(archive, "hp.top_k")?;
    let hp = HyperParams {
        word_dim: read_usize(archive, "hp.word_dim")?,
        char_dim: read_usize(archive, "hp.char_dim")?,
        concept_dim: read_usize(archive, "hp.concept_dim")?,
        hidden: read_usize(archive, "hp.hidden")?,
        heads: read_usize(archive, "hp.heads")?,
        fusion_text_dim: read_usize(archive, "hp.fusion_text_dim")?,
        fusion_set_dim: read_usize(archive, "hp.fusion_set_dim")?,
        gamma: read_scalar(archive, "hp.gamma")?,
        lambda: read_scalar(archive, "hp.lambda")?,
        dropout: read_scalar(archive, "hp.dropout")?,
        learning_rate: read_scalar(archive, "hp.learning_rate")?,
        beta1: read_scalar(archive, "hp.beta1")?,
        beta2: read_scalar(archive, "hp.beta2")?,
        epsilon: read_scalar(archive, "hp.epsilon")?,
        init_std: read_scalar(archive, "hp.init_std")?,
        batch_size: read_usize(archive, "hp.batch_size")?,
        epochs: read_usize(archive, "hp.epochs")?,
        max_concepts: read_usize(archive, "hp.max_concepts")?,
        top_k: if top_k < 0.0 { None } else { Some(top_k as usize) },
        local_attn: local_mode_from_code(
            read_scalar(archive, "hp.local_mode")?,
            read_scalar(archive, "hp.local_omega")?,
        )?,
        use_raw_alpha: read_scalar(archive, "hp.use_raw_alpha")? != 0.0,
        seed: u64::from_le_bytes(
            read_bytes(archive, "hp.seed", 8)?.try_into().expect("eight bytes"),
        ),
    };
    let num_classes = read_usize(archive, "hp.num_classes")?;
    Ok((hp, num_classes))
}

// ── Full training state ──────────────────────────────────────────────────────

/// Everything a checkpoint file carries; vocabulary and label names live in
/// the text sidecar handled by the pipeline.
pub struct LoadedTraining {
    pub model: KeatModel,
    pub adam: Option<AdamState>,
    pub rng: Option<ChaCha8Rng>,
}

pub fn archive_training(
    model: &KeatModel,
    adam: Option<&AdamState>,
    rng: Option<&ChaCha8Rng>,
) -> Result<Archive> {
    let mut archive = Archive::new();
    push_hyperparams(&mut archive, &model.hp, model.num_classes)?;
    for (_, name, tensor) in model.set.iter() {
        archive.push(name, tensor.clone())?;
    }
    if let Some(state) = adam {
        push_scalar(&mut archive, "adam.step", state.step as f64)?;
        for (id, name, _) in model.set.iter() {
            archive.push(&format!("adam.m.{name}"), state.m[id].clone())?;
        }
        for (id, name, _) in model.set.iter() {
            archive.push(&format!("adam.v.{name}"), state.v[id].clone())?;
        }
    }
    if let Some(r) = rng {
        push_bytes(&mut archive, "rng.seed", &r.get_seed())?;
        push_bytes(&mut archive, "rng.stream", &r.get_stream().to_le_bytes())?;
        push_bytes(&mut archive, "rng.word_pos", &r.get_word_pos().to_le_bytes())?;
    }
    Ok(archive)
}

pub fn restore_training(archive: &Archive) -> Result<LoadedTraining> {
    let (hp, num_classes) = read_hyperparams(archive)?;
    let vocab_len = archive.require("emb.word")?.rows();
    let num_concepts = archive.require("concepts")?.rows();
    let mut init_rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = KeatModel::new(&hp, vocab_len, num_concepts, num_classes, &mut init_rng)?;
    let names: Vec<(usize, String, Vec<usize>)> = model
        .set
        .iter()
        .map(|(id, name, t)| (id, name.to_string(), t.shape().to_vec()))
        .collect();
    for (id, name, shape) in &names {
        let stored = archive.require(name)?;
        if stored.shape() != shape.as_slice() {
            return Err(KeatError::shape(format!(
                "tensor '{name}' has shape {:?} in the checkpoint but the model expects {shape:?}",
                stored.shape()
            )));
        }
        model.set.get_mut(*id).data_mut().copy_from_slice(stored.data());
    }
    let adam = if archive.get("adam.step").is_some() {
        let mut state = AdamState::new(&model.set);
        state.step = read_usize(archive, "adam.step")? as u64;
        for (id, name, shape) in &names {
            for (prefix, slot) in
                [("adam.m", &mut state.m), ("adam.v", &mut state.v)]
            {
                let full = format!("{prefix}.{name}");
                let stored = archive.require(&full)?;
                if stored.shape() != shape.as_slice() {
                    return Err(KeatError::shape(format!(
                        "tensor '{full}' has shape {:?}, expected {shape:?}",
                        stored.shape()
                    )));
                }
                slot[*id].data_mut().copy_from_slice(stored.data());
            }
        }
        Some(state)
    } else {
        None
    };
    let rng = if archive.get("rng.seed").is_some() {
        let seed: [u8; 32] =
            read_bytes(archive, "rng.seed", 32)?.try_into().expect("thirty-two bytes");
        let mut r = ChaCha8Rng::from_seed(seed);
        r.set_stream(u64::from_le_bytes(
            read_bytes(archive, "rng.stream", 8)?.try_into().expect("eight bytes"),
        ));
        r.set_word_pos(u128::from_le_bytes(
            read_bytes(archive, "rng.word_pos", 16)?.try_into().expect("sixteen bytes"),
        ));
        Some(r)
    } else {
        None
    };
    Ok(LoadedTraining { model, adam, rng })
}
