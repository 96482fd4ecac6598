//! Binary named-tensor containers: checkpoints and sample sets.
//!
//! All integers and floats are little-endian. A tensor record is
//! `u32 name_len, name, u8 group, u32 rank, u64 extents…, f64 data…`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use numcore::Tensor;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::codec::Geometry;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Param, ParamGroup};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CVDCKPT\0";
pub const TENSORS_MAGIC: &[u8; 8] = b"CVDTENS\0";
pub const FORMAT_VERSION: u32 = 1;

/// Resumable ChaCha8 position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::capture(&ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// AdamW moments; empty maps mean fresh moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// Where a run stands: the stage last worked on and how many of its steps ran.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StageCursor {
    pub stage: String,
    pub steps_done: u64,
}

/// Architecture and geometry stored as canonical JSON in the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub geometry: Geometry,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub geometry: Geometry,
    pub config: ModelConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    pub rng: RngState,
    pub cursor: StageCursor,
}

/// Serializes with sorted object keys.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Value keeps object keys in a BTreeMap, so this sorts them.
    let v = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| Error::Format(e.to_string()))
}

// ---- primitive writers / readers ----------------------------------------

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, group: u8, t: &Tensor) {
    put_str(out, name);
    out.push(group);
    put_u32(out, t.rank() as u32);
    for &e in t.shape() {
        put_u64(out, e as u64);
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Format(format!("truncated at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
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

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }

    fn tensor(&mut self) -> Result<(String, u8, Tensor)> {
        let name = self.string()?;
        let group = self.u8()?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(self.u64()?).map_err(|e| Error::Format(e.to_string()))?);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        Ok((name, group, t))
    }

    fn magic(&mut self, want: &[u8; 8]) -> Result<()> {
        let got = self.take(8)?;
        if got != want {
            return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(got))));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.at)));
        }
        Ok(())
    }
}

fn put_moments(out: &mut Vec<u8>, m: &BTreeMap<String, Tensor>) {
    put_u32(out, m.len() as u32);
    for (n, t) in m {
        put_tensor(out, n, 0, t);
    }
}

fn get_moments(r: &mut Reader) -> Result<BTreeMap<String, Tensor>> {
    let n = r.u32()?;
    let mut m = BTreeMap::new();
    for _ in 0..n {
        let (name, _, t) = r.tensor()?;
        m.insert(name, t);
    }
    Ok(m)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        let header = canonical_json(&CheckpointConfig {
            geometry: self.geometry,
            model: self.config.clone(),
        })?;
        put_str(&mut out, &header);
        put_u32(&mut out, self.params.tensors.len() as u32);
        for (n, p) in &self.params.tensors {
            put_tensor(&mut out, n, p.group.tag(), &p.tensor);
        }
        put_u64(&mut out, self.adam.step);
        put_moments(&mut out, &self.adam.m);
        put_moments(&mut out, &self.adam.v);
        out.extend_from_slice(&self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_str(&mut out, &self.cursor.stage);
        put_u64(&mut out, self.cursor.steps_done);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(CHECKPOINT_MAGIC)?;
        let header: CheckpointConfig =
            serde_json::from_str(&r.string()?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let n = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let (name, tag, tensor) = r.tensor()?;
            let group = ParamGroup::from_tag(tag).ok_or_else(|| Error::Format(format!("group tag {tag} on {name}")))?;
            tensors.insert(name, Param { tensor, group });
        }
        let params = ModelParams { tensors };
        let step = r.u64()?;
        let m = get_moments(&mut r)?;
        let v = get_moments(&mut r)?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = r.u128()?;
        let stage = r.string()?;
        let steps_done = r.u64()?;
        r.finish()?;
        header.model.validate()?;
        params.check(&header.model)?;
        Ok(Self {
            geometry: header.geometry,
            config: header.model,
            params,
            adam: AdamState { step, m, v },
            rng: RngState { seed, stream, word_pos },
            cursor: StageCursor { stage, steps_done },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

/// Plain named-tensor file: `magic, version, u32 count, records…`.
pub fn tensors_to_bytes(records: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSORS_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, records.len() as u32);
    for (n, t) in records {
        put_tensor(&mut out, n, 0, t);
    }
    out
}

pub fn tensors_from_bytes(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(buf);
    r.magic(TENSORS_MAGIC)?;
    let n = r.u32()?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let (name, _, t) = r.tensor()?;
        out.push((name, t));
    }
    r.finish()?;
    Ok(out)
}

pub fn write_tensors(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, tensors_to_bytes(records))?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    tensors_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample_ckpt() -> Checkpoint {
        let config = ModelConfig {
            hidden: 16,
            heads: 2,
            n_dual: 1,
            n_single: 1,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&config, true, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = rng.random();
        let m = params.tensors.iter().map(|(n, p)| (n.clone(), p.tensor.clone())).collect();
        Checkpoint {
            geometry: Geometry::default(),
            config,
            params,
            adam: AdamState {
                step: 3,
                v: BTreeMap::new(),
                m,
            },
            rng: RngState::capture(&rng),
            cursor: StageCursor {
                stage: "A2V".into(),
                steps_done: 3,
            },
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let c = sample_ckpt();
        let a = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), a);
    }

    #[test]
    fn rng_state_resumes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _: f64 = rng.random();
        let state = RngState::capture(&rng);
        let a: u64 = rng.random();
        let b: u64 = state.restore().random();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample_ckpt().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn header_keys_sorted() {
        let s = canonical_json(&CheckpointConfig {
            geometry: Geometry::default(),
            model: ModelConfig::default(),
        })
        .unwrap();
        assert!(s.starts_with("{\"geometry\":{\"channels\":3,"));
    }
}
