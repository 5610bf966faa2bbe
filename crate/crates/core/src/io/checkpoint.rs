//! `VFBCKPT1` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "VFBCKPT1"
//! version   u32
//! meta_len  u32, then meta_len bytes of UTF-8 JSON metadata
//! sections  u32 count, then per section:
//!             name_len u32, name bytes, rank u32, rank × u64 dims,
//!             prod(dims) × f64 payload
//! checksum  32 bytes, SHA-256 of every preceding byte
//! ```
//!
//! Parameter sections use the names from
//! [`ModelParams::named_tensors`]; Adagrad accumulators are stored as
//! `adagrad/<parameter name>` and are optional.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::model::{AnswerVocab, ModelConfig, ModelParams};
use crate::train::{AdagradState, TrainingConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VFBCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;
const ADAGRAD_PREFIX: &str = "adagrad/";

/// Free-form run information stored alongside the tensors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub training: Option<TrainingConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MetaBlock {
    model: ModelConfig,
    answers: Vec<String>,
    adagrad_epsilon: f64,
    seed: u64,
    training: Option<TrainingConfig>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Empty when the file carried no optimizer sections.
    pub optimizer: AdagradState,
    pub meta: CheckpointMeta,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_section(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, dims.len())?;
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(
    params: &ModelParams,
    optimizer: Option<&AdagradState>,
    meta: &CheckpointMeta,
) -> Result<Vec<u8>> {
    let block = MetaBlock {
        model: params.config.clone(),
        answers: params.answers.words().to_vec(),
        adagrad_epsilon: optimizer.map_or(1e-8, |o| o.epsilon),
        seed: meta.seed,
        training: meta.training.clone(),
    };
    let json = serde_json::to_vec(&block).map_err(|e| Error::Config(format!("metadata: {e}")))?;

    let tensors = params.named_tensors();
    let shapes: HashMap<&str, &[usize]> = tensors
        .iter()
        .map(|(n, t)| (n.as_str(), t.shape()))
        .collect();
    let mut sections = tensors.len();
    if let Some(o) = optimizer {
        for (name, acc) in o.iter() {
            let shape = shapes.get(name).ok_or_else(|| {
                Error::Contract(format!("optimizer state for unknown parameter {name:?}"))
            })?;
            if shape.iter().product::<usize>() != acc.len() {
                return Err(Error::dim("optimizer state", shape, &[acc.len()]));
            }
            sections += 1;
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    put_u32(&mut out, sections)?;
    for (name, t) in &tensors {
        put_section(&mut out, name, t.shape(), t.data())?;
    }
    if let Some(o) = optimizer {
        for (name, acc) in o.iter() {
            put_section(
                &mut out,
                &format!("{ADAGRAD_PREFIX}{name}"),
                shapes[name],
                acc,
            )?;
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest[..]);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(format!("byte {}", self.pos), "unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v)
            .map_err(|_| Error::format(format!("byte {}", self.pos - 8), "extent too large"))
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(format!("byte {}", self.pos), msg)
    }
}

/// Parses and verifies a checkpoint image. The checksum is checked before
/// anything is decoded.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let min = CHECKPOINT_MAGIC.len() + 4 + 4 + 4 + CHECKSUM_LEN;
    if bytes.len() < min {
        return Err(Error::Integrity(format!(
            "checkpoint is only {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Integrity("bad checkpoint magic".into()));
    }
    let (body, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body)[..] != *stored {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    let mut cur = Cursor { buf: body, pos: 8 };
    let version = cur.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Integrity(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = cur.u32()?;
    let meta: MetaBlock = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| Error::format("metadata", e.to_string()))?;
    let answers =
        AnswerVocab::new(meta.answers).map_err(|e| Error::format("metadata", e.to_string()))?;
    let mut params = ModelParams::zeros(meta.model, answers)
        .map_err(|e| Error::format("metadata", e.to_string()))?;

    let count = cur.u32()?;
    let mut raw: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()?;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| cur.err("section name is not UTF-8"))?
            .to_string();
        let rank = cur.u32()?;
        let dims = (0..rank)
            .map(|_| cur.u64())
            .collect::<Result<Vec<usize>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| cur.err("section size overflows"))?;
        let payload = cur.take(
            n.checked_mul(8)
                .ok_or_else(|| cur.err("section size overflows"))?,
        )?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        if raw.insert(name.clone(), (dims, data)).is_some() {
            return Err(cur.err(format!("duplicate section {name:?}")));
        }
    }
    if cur.pos != body.len() {
        return Err(cur.err("trailing bytes after last section"));
    }

    let known: HashSet<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut optimizer = AdagradState::new(meta.adagrad_epsilon);
    for (name, (_, data)) in &raw {
        let param_name = name.strip_prefix(ADAGRAD_PREFIX).unwrap_or(name);
        if !known.contains(param_name) {
            return Err(Error::format(
                "sections",
                format!("unknown section {name:?}"),
            ));
        }
        if name.starts_with(ADAGRAD_PREFIX) {
            optimizer.insert(param_name, data.clone());
        }
    }
    for (name, t) in params.named_tensors_mut() {
        let (dims, data) = raw
            .remove(&name)
            .ok_or_else(|| Error::format("sections", format!("missing section {name:?}")))?;
        if dims != t.shape() {
            return Err(Error::format(
                "sections",
                format!(
                    "section {name:?} has shape {dims:?}, expected {:?}",
                    t.shape()
                ),
            ));
        }
        t.data_mut().copy_from_slice(&data);
        if let Some((odims, _)) = raw.get(&format!("{ADAGRAD_PREFIX}{name}")) {
            if odims != t.shape() {
                return Err(Error::format(
                    "sections",
                    format!("optimizer section for {name:?} has shape {odims:?}"),
                ));
            }
        }
    }

    Ok(Checkpoint {
        params,
        optimizer,
        meta: CheckpointMeta {
            seed: meta.seed,
            training: meta.training,
        },
    })
}

/// Atomic write (temp file, then rename).
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    optimizer: Option<&AdagradState>,
    meta: &CheckpointMeta,
) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(params, optimizer, meta)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&read_bytes(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;
    use crate::train::adagrad_step;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(mode: Mode) -> (ModelParams, AdagradState) {
        let cfg = ModelConfig {
            mode,
            emb_dim: 3,
            hidden: 2,
            u_dim: 4,
            attn_dim: 3,
            channels: 5,
            right_reverse: true,
        };
        let answers = AnswerVocab::new(vec!["x".into(), "y".into(), "z".into()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ModelParams::init(cfg, answers, &mut rng).unwrap();
        let mut st = AdagradState::new(1e-8);
        for (_, t) in p.named_tensors_mut() {
            let g: Vec<f64> = (0..t.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            t.accumulate_grad(&g).unwrap();
        }
        adagrad_step(&mut p, &mut st, 0.1).unwrap();
        (p, st)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (p, st) = model(Mode::Full);
        let meta = CheckpointMeta {
            seed: 42,
            training: Some(TrainingConfig::default()),
        };
        let bytes = encode_checkpoint(&p, Some(&st), &meta).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.meta, meta);
        assert_eq!(back.params.config, p.config);
        assert_eq!(back.params.answers, p.answers);
        for ((na, a), (nb, b)) in p
            .named_tensors()
            .into_iter()
            .zip(back.params.named_tensors())
        {
            assert_eq!(na, nb);
            assert!(a.bit_eq(b), "{na}");
        }
        assert_eq!(back.optimizer, st);
        assert_eq!(
            encode_checkpoint(&back.params, Some(&back.optimizer), &back.meta).unwrap(),
            bytes
        );
    }

    #[test]
    fn optimizer_sections_are_optional() {
        let (p, _) = model(Mode::Sentence);
        let bytes = encode_checkpoint(&p, None, &CheckpointMeta::default()).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert!(back.optimizer.is_empty());
        assert!(back.params.attention.is_none());
    }

    #[test]
    fn any_flipped_byte_is_rejected() {
        let (p, st) = model(Mode::Full);
        let bytes = encode_checkpoint(&p, Some(&st), &CheckpointMeta::default()).unwrap();
        for pos in [9, 20, bytes.len() / 2, bytes.len() - 40, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x01;
            assert!(
                matches!(decode_checkpoint(&bad), Err(Error::Integrity(_))),
                "byte {pos}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Integrity(_))));
        assert!(matches!(
            decode_checkpoint(&bytes[..20]),
            Err(Error::Integrity(_))
        ));
    }

    fn reseal(mut body: Vec<u8>) -> Vec<u8> {
        let d = Sha256::digest(&body);
        body.extend_from_slice(&d[..]);
        body
    }

    #[test]
    fn unknown_section_is_a_format_error() {
        let (p, _) = model(Mode::Sentence);
        let bytes = encode_checkpoint(&p, None, &CheckpointMeta::default()).unwrap();
        let mut body = bytes[..bytes.len() - CHECKSUM_LEN].to_vec();
        // bump the section count and append a stray section
        let json_len = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
        let count_at = 16 + json_len;
        let count = u32::from_le_bytes(body[count_at..count_at + 4].try_into().unwrap());
        body[count_at..count_at + 4].copy_from_slice(&(count + 1).to_le_bytes());
        put_section(&mut body, "mystery", &[1], &[0.0]).unwrap();
        match decode_checkpoint(&reseal(body)) {
            Err(Error::Format { message, .. }) => assert!(message.contains("mystery")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_an_integrity_error() {
        let (p, _) = model(Mode::Sentence);
        let bytes = encode_checkpoint(&p, None, &CheckpointMeta::default()).unwrap();
        let mut body = bytes[..bytes.len() - CHECKSUM_LEN].to_vec();
        body[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&reseal(body)),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (p, st) = model(Mode::LeftOnly);
        save_checkpoint(&path, &p, Some(&st), &CheckpointMeta::default()).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back.params.w_blank.bit_eq(&p.w_blank));
        // no temp files left behind
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
