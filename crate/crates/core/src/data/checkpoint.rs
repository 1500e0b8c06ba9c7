//! Binary model checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "FSMC" | version u8 | config_len u32 | config JSON
//! | metadata_len u32 | metadata UTF-8
//! | segment_count u32 | { name_len u16 | name | rank u8 | dims u64* }
//! | value_count u64 | values f64*
//! | norm_layers u32 | { width u32 | mean f64* | var f64* }
//! | crc32 of everything above, u32
//! ```

use std::path::Path;

use super::write_atomic;
use crate::model::{FewShotModel, ModelConfig};
use crate::numerics::{ChannelStats, ParameterVector};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u8 = 1;
const MAGIC: &[u8; 4] = b"FSMC";

/// A loaded model plus the free-form metadata stored alongside it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: FewShotModel,
    pub metadata: String,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("length fits in u32").to_le_bytes());
}

fn encode(model: &FewShotModel, metadata: &str) -> Vec<u8> {
    let config = serde_json::to_vec(model.config()).expect("model config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(CHECKPOINT_VERSION);
    put_u32(&mut out, config.len());
    out.extend_from_slice(&config);
    put_u32(&mut out, metadata.len());
    out.extend_from_slice(metadata.as_bytes());
    let layout = model.params().layout();
    put_u32(&mut out, layout.segments().len());
    for seg in layout.segments() {
        out.extend_from_slice(&u16::try_from(seg.name.len()).expect("short segment name").to_le_bytes());
        out.extend_from_slice(seg.name.as_bytes());
        out.push(u8::try_from(seg.shape.len()).expect("small rank"));
        for &d in &seg.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    let values = model.params().values();
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_u32(&mut out, model.norm_state().len());
    for s in model.norm_state() {
        put_u32(&mut out, s.mean.len());
        for v in s.mean.iter().chain(&s.var) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_checkpoint(model: &FewShotModel, metadata: &str, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model, metadata))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format { offset: self.pos as u64, message: format!("unexpected end of data, wanted {n} bytes") });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<usize> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        let at = self.pos;
        std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::Format { offset: at as u64, message: "invalid UTF-8".into() })
    }

    fn err(&self, message: &str) -> Error {
        Error::Format { offset: self.pos as u64, message: message.into() }
    }
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 1 + 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format { offset: 0, message: "not a model checkpoint (bad magic)".into() });
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(Error::Version { found: bytes[4], expected: CHECKPOINT_VERSION });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().expect("4 bytes")) {
        return Err(Error::Checksum);
    }
    let mut r = Reader { bytes: body, pos: 5 };
    let n = r.u32()?;
    let at = r.pos;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::Format { offset: at as u64, message: format!("config: {e}") })?;
    let n = r.u32()?;
    let metadata = r.str(n)?.to_string();
    let mut model = FewShotModel::new(config)?;
    let segs = r.u32()?;
    let expected = model.params().layout().segments().to_vec();
    if segs != expected.len() {
        return Err(Error::ConfigMismatch(format!("checkpoint has {segs} segments, config builds {}", expected.len())));
    }
    for seg in &expected {
        let n = r.u16()?;
        let name = r.str(n)?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        if name != seg.name || shape != seg.shape {
            return Err(Error::ConfigMismatch(format!(
                "segment '{name}' {shape:?} does not match '{}' {:?}",
                seg.name, seg.shape
            )));
        }
    }
    let count = r.u64()? as usize;
    if count != model.params().len() {
        return Err(Error::ConfigMismatch(format!("{count} stored values, layout holds {}", model.params().len())));
    }
    let values = r.f64s(count)?;
    let params = ParameterVector::from_parts(values, model.params().layout().clone())?;
    model.set_params(params)?;
    let layers = r.u32()?;
    let mut norm = Vec::with_capacity(layers);
    for _ in 0..layers {
        let w = r.u32()?;
        let mean = r.f64s(w)?;
        let var = r.f64s(w)?;
        norm.push(ChannelStats { mean, var });
    }
    model.set_norm_state(norm)?;
    if r.pos != body.len() {
        return Err(r.err("trailing bytes before checksum"));
    }
    Ok(Checkpoint { model, metadata })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads a checkpoint and requires its model configuration to equal
/// `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    let got = ck.model.config();
    let part = if got.extractor != expected.extractor {
        Some("extractor")
    } else if got.ten != expected.ten {
        Some("task embedding network")
    } else if got.metric != expected.metric {
        Some("metric")
    } else if got.aux_classes != expected.aux_classes {
        Some("auxiliary head")
    } else {
        None
    };
    match part {
        Some(p) => Err(Error::ConfigMismatch(format!("{p} configuration differs from the checkpoint"))),
        None => Ok(ck),
    }
}
