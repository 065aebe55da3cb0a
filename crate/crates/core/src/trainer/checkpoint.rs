use std::io::Write;
use std::path::Path;

use super::config::ModelConfig;
use super::model::model_param_specs;
use crate::error::{Result, SifmError};
use crate::gradcore::{AdamState, ParamStore, Tensor};

pub const SIFM_MAGIC: &[u8; 4] = b"SIFM";
pub const SIFM_VERSION: u32 = 1;

/// Model configuration, parameters and (optionally) optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamState<f32>>,
}

struct Entry<'a> {
    name: String,
    shape: Vec<usize>,
    data: &'a [f32],
}

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

/// Manifest of `(name, shape, element offset)` followed by the payload.
fn put_section(out: &mut Vec<u8>, entries: &[Entry]) {
    put_u32(out, entries.len() as u32);
    let mut offset = 0u64;
    for e in entries {
        put_str(out, &e.name);
        put_u32(out, e.shape.len() as u32);
        for &d in &e.shape {
            put_u64(out, d as u64);
        }
        put_u64(out, offset);
        offset += e.data.len() as u64;
    }
    put_u64(out, offset);
    for e in entries {
        for v in e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serializes a checkpoint into bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let config = toml::to_string(&ckpt.model).map_err(|e| SifmError::Checkpoint(format!("config serialization: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(SIFM_MAGIC);
    put_u32(&mut out, SIFM_VERSION);
    put_str(&mut out, &config);
    let params: Vec<Entry> =
        ckpt.params.iter().map(|(n, t)| Entry { name: n.to_string(), shape: t.shape().to_vec(), data: t.data() }).collect();
    put_section(&mut out, &params);
    match &ckpt.optimizer {
        None => out.push(0),
        Some(opt) => {
            if opt.m.len() != ckpt.params.numel() {
                return Err(SifmError::Checkpoint("optimizer state does not match the parameters".into()));
            }
            out.push(1);
            put_u64(&mut out, opt.step_count);
            for v in [opt.lr, opt.beta1, opt.beta2, opt.eps] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let mut entries = Vec::with_capacity(2 * params.len());
            for (moment, buf) in [("m", &opt.m), ("v", &opt.v)] {
                let mut offset = 0;
                for p in &params {
                    let n = p.data.len();
                    entries.push(Entry {
                        name: format!("{moment}/{}", p.name),
                        shape: p.shape.clone(),
                        data: &buf[offset..offset + n],
                    });
                    offset += n;
                }
            }
            put_section(&mut out, &entries);
        }
    }
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Name, shape and values of one stored tensor.
type StoredTensor = (String, Vec<usize>, Vec<f32>);

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(SifmError::Format { offset: self.pos as u64, message: message.into() })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!("truncated: wanted {n} bytes, {} left", self.buf.len() - self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let start = self.pos;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| SifmError::Format { offset: start as u64, message: "string is not UTF-8".into() })
    }

    fn section(&mut self) -> Result<Vec<StoredTensor>> {
        let count = self.u32()? as usize;
        let mut manifest = Vec::new();
        for _ in 0..count {
            let name = self.string()?;
            let rank = self.u32()? as usize;
            if rank > 8 {
                return self.fail(format!("tensor {name} has rank {rank}"));
            }
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = self.u64()?;
            manifest.push((name, shape, offset));
        }
        let total = self.u64()?;
        let mut expected = 0u64;
        for (name, shape, offset) in &manifest {
            if *offset != expected {
                return self.fail(format!("tensor {name} at element {offset}, expected {expected}"));
            }
            let n = shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
            match n.and_then(|n| expected.checked_add(n)) {
                Some(e) => expected = e,
                None => return self.fail(format!("tensor {name} {shape:?} is too large")),
            }
        }
        if total != expected {
            return self.fail(format!("payload of {total} elements, manifest needs {expected}"));
        }
        let Some(len) = usize::try_from(total).ok().and_then(|t| t.checked_mul(4)) else {
            return self.fail(format!("payload of {total} elements is too large"));
        };
        let payload = self.take(len)?;
        let mut values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        Ok(manifest
            .into_iter()
            .map(|(name, shape, _)| {
                let n = shape.iter().product();
                let data = values.by_ref().take(n).collect();
                (name, shape, data)
            })
            .collect())
    }
}

/// Parses checkpoint bytes and checks the tensors against the manifest
/// implied by the stored configuration.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != SIFM_MAGIC {
        r.pos = 0;
        return r.fail("bad magic, not a SIFM checkpoint");
    }
    let version = r.u32()?;
    if version != SIFM_VERSION {
        r.pos = 4;
        return r.fail(format!("unsupported version {version}"));
    }
    let config = r.string()?;
    let model: ModelConfig =
        toml::from_str(&config).map_err(|e| SifmError::Checkpoint(format!("stored config does not parse: {e}")))?;
    let specs = model_param_specs(&model).map_err(|e| SifmError::Checkpoint(format!("stored config is invalid: {e}")))?;

    let tensors = r.section()?;
    if tensors.len() != specs.len() {
        return Err(SifmError::Checkpoint(format!("{} tensors stored, config implies {}", tensors.len(), specs.len())));
    }
    let mut params = ParamStore::new();
    for ((name, shape, data), spec) in tensors.into_iter().zip(&specs) {
        if name != spec.name || shape != spec.shape {
            return Err(SifmError::Checkpoint(format!(
                "tensor {name} {shape:?} where the config implies {} {:?}",
                spec.name, spec.shape
            )));
        }
        params.insert(name, Tensor::new(&shape, data)?)?;
    }

    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step_count = r.u64()?;
            let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let entries = r.section()?;
            if entries.len() != 2 * specs.len() {
                return Err(SifmError::Checkpoint(format!("optimizer section holds {} tensors", entries.len())));
            }
            let mut opt = AdamState::new(params.numel(), lr, beta1, beta2, eps)
                .map_err(|e| SifmError::Checkpoint(format!("optimizer settings: {e}")))?;
            opt.step_count = step_count;
            let (mut m, mut v) = (Vec::with_capacity(params.numel()), Vec::with_capacity(params.numel()));
            for (i, (name, shape, data)) in entries.into_iter().enumerate() {
                let (moment, spec) = if i < specs.len() { ("m", &specs[i]) } else { ("v", &specs[i - specs.len()]) };
                if name != format!("{moment}/{}", spec.name) || shape != spec.shape {
                    return Err(SifmError::Checkpoint(format!("unexpected optimizer tensor {name} {shape:?}")));
                }
                if moment == "m" { &mut m } else { &mut v }.extend(data);
            }
            opt.m = m;
            opt.v = v;
            Some(opt)
        }
        flag => return r.fail(format!("optimizer flag {flag}")),
    };
    if r.pos != bytes.len() {
        return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(Checkpoint { model, params, optimizer })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
