//! Binary checkpoints: magic, format version, model config, vocabulary and
//! named shape-tagged `f64` tensors, all little-endian.

use std::io::{Read, Write};
use std::path::Path;

use attnprior_core::rng::seeded_rng;
use attnprior_core::Tensor;
use byteorder::{ReadBytesExt, WriteBytesExt, LE};

use crate::config::GptConfig;
use crate::error::{LmError, Result};
use crate::model::{EmbeddingPrior, SmallGpt};
use crate::vocab::CharVocab;

pub const MAGIC: &[u8; 8] = b"ATTNPRCK";
pub const VERSION: u32 = 1;
const PRIOR_NAME: &str = "prior.w";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SmallGpt,
    pub prior: EmbeddingPrior,
    pub vocab: CharVocab,
}

fn bad(msg: impl Into<String>) -> LmError {
    LmError::Checkpoint(msg.into())
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = r.read_u32::<LE>().map_err(|e| bad(e.to_string()))? as usize;
    if n > 1 << 20 {
        return Err(bad(format!("string length {n} is implausible")));
    }
    let mut buf = vec![0; n];
    r.read_exact(&mut buf).map_err(|e| bad(e.to_string()))?;
    String::from_utf8(buf).map_err(|e| bad(e.to_string()))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        write_str(w, &serde_json::to_string(&self.model.cfg).expect("config serializes"))?;
        w.write_u32::<LE>(self.vocab.min_count() as u32)?;
        w.write_u32::<LE>(self.vocab.chars().len() as u32)?;
        for &c in self.vocab.chars() {
            w.write_u32::<LE>(c as u32)?;
        }
        let mut named: Vec<(String, &Tensor)> = self.model.param_names().into_iter().zip(self.model.tensors()).collect();
        named.push((PRIOR_NAME.to_string(), &self.prior.w));
        w.write_u32::<LE>(named.len() as u32)?;
        for (name, t) in named {
            write_str(w, &name)?;
            w.write_u32::<LE>(t.shape().len() as u32)?;
            for &s in t.shape() {
                w.write_u64::<LE>(s as u64)?;
            }
            for &v in t.data() {
                w.write_f64::<LE>(v)?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(mut r: &[u8]) -> Result<Self> {
        let io = |e: std::io::Error| bad(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.read_u32::<LE>().map_err(io)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let cfg: GptConfig = serde_json::from_str(&read_str(&mut r)?).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        let min_count = r.read_u32::<LE>().map_err(io)? as usize;
        let n_chars = r.read_u32::<LE>().map_err(io)? as usize;
        let chars = (0..n_chars)
            .map(|_| {
                let c = r.read_u32::<LE>().map_err(io)?;
                char::from_u32(c).ok_or_else(|| bad(format!("invalid code point {c}")))
            })
            .collect::<Result<Vec<char>>>()?;
        let vocab = CharVocab::from_chars(chars, min_count);
        if vocab.len() != cfg.vocab {
            return Err(bad(format!("vocabulary has {} entries, model expects {}", vocab.len(), cfg.vocab)));
        }

        let mut model = SmallGpt::init(&cfg, &mut seeded_rng(0))?;
        let mut prior = EmbeddingPrior::zeros(cfg.d_model);
        let names = model.param_names();
        let count = r.read_u32::<LE>().map_err(io)? as usize;
        if count != names.len() + 1 {
            return Err(bad(format!("{count} tensors, expected {}", names.len() + 1)));
        }
        let mut slots: Vec<&mut Tensor> = model.tensors_mut();
        slots.push(&mut prior.w);
        for (i, slot) in slots.into_iter().enumerate() {
            let name = read_str(&mut r)?;
            let want = names.get(i).map_or(PRIOR_NAME, String::as_str);
            if name != want {
                return Err(bad(format!("tensor {i} is {name:?}, expected {want:?}")));
            }
            let ndim = r.read_u32::<LE>().map_err(io)? as usize;
            let shape = (0..ndim).map(|_| r.read_u64::<LE>().map(|s| s as usize).map_err(io)).collect::<Result<Vec<_>>>()?;
            if shape != slot.shape() {
                return Err(bad(format!("{name}: shape {shape:?}, expected {:?}", slot.shape())));
            }
            for v in slot.data_mut() {
                *v = r.read_f64::<LE>().map_err(io)?;
            }
        }
        if !r.is_empty() {
            return Err(bad(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint { model, prior, vocab })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| LmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| LmError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
