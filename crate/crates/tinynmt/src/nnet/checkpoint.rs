//! Self-describing binary checkpoints.
//!
//! Layout: magic `MTMT`, version u32, length-prefixed UTF-8 JSON metadata,
//! tensor count u32, then per tensor: length-prefixed name, dtype tag
//! (1 = f32, 2 = f64), rank u8, dims as u64 each, and the row-major
//! little-endian payload. An optional optimizer-state section follows the
//! parameter tensors. Save -> load -> save is byte-identical.

use super::adam::{AdamConfig, OptState};
use super::scalar::{Dtype, Scalar};
use super::{ModelConfig, NnetError, Parameters};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

const MAGIC: &[u8; 4] = b"MTMT";
const VERSION: u32 = 1;

/// Everything a consumer needs to use a checkpoint without side channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Multilingual models expect a `<2xx>` target-language token prepended
    /// to every source sequence; bilingual models do not.
    pub multilingual: bool,
    /// Directions this model was trained for, as (src, tgt) language codes.
    #[serde(default)]
    pub directions: Vec<(String, String)>,
}

pub struct Checkpoint<F: Scalar> {
    pub params: Parameters<F>,
    pub meta: CheckpointMeta,
    pub opt: Option<OptState<F>>,
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len() as u32);
    out.extend_from_slice(bytes);
}

fn put_tensor<F: Scalar>(out: &mut Vec<u8>, name: &str, t: &Array2<F>) {
    put_bytes(out, name.as_bytes());
    out.push(F::DTYPE.tag());
    out.push(2); // rank: all model tensors are 2-D
    put_u64(out, t.nrows() as u64);
    put_u64(out, t.ncols() as u64);
    for &x in t.iter() {
        x.write_le(out);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnetError> {
        if self.pos + n > self.buf.len() {
            return Err(NnetError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnetError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, NnetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NnetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8], NnetError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn tensor<F: Scalar>(&mut self) -> Result<(String, Array2<F>), NnetError> {
        let name = String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| NnetError::Checkpoint("tensor name is not UTF-8".into()))?;
        let dtype = Dtype::from_tag(self.u8()?)
            .ok_or_else(|| NnetError::Checkpoint(format!("unknown dtype tag in {name}")))?;
        if dtype != F::DTYPE {
            return Err(NnetError::Checkpoint(format!(
                "tensor {name} has dtype {dtype}, expected {}",
                F::DTYPE
            )));
        }
        let rank = self.u8()?;
        if rank != 2 {
            return Err(NnetError::Checkpoint(format!("tensor {name} has rank {rank}, expected 2")));
        }
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| NnetError::Checkpoint("tensor too large".into()))?;
        let payload = self.take(n * F::DTYPE.byte_width())?;
        let width = F::DTYPE.byte_width();
        let data: Vec<F> = (0..n).map(|i| F::read_le(&payload[i * width..])).collect();
        let t = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| NnetError::Checkpoint(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

/// Serialize parameters (and optionally optimizer state) to `path`.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    params: &Parameters<F>,
    meta: &CheckpointMeta,
    opt: Option<&OptState<F>>,
) -> Result<(), NnetError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| NnetError::Checkpoint(format!("meta serialization: {e}")))?;
    put_bytes(&mut out, &meta_json);
    put_u32(&mut out, params.len() as u32);
    for (name, t) in params.iter() {
        put_tensor(&mut out, name, t);
    }
    match opt {
        None => out.push(0),
        Some(opt) => {
            out.push(1);
            put_u64(&mut out, opt.step);
            out.extend_from_slice(&opt.config.peak_lr.to_le_bytes());
            put_u64(&mut out, opt.config.warmup_steps);
            for (i, name) in params.names().iter().enumerate() {
                put_tensor(&mut out, name, &opt.m[i]);
                put_tensor(&mut out, name, &opt.v[i]);
            }
        }
    }
    std::fs::write(path, out).map_err(|e| NnetError::Io { path: path.display().to_string(), source: e })
}

/// Read just the parameter dtype, without loading tensors.
pub fn peek_dtype(path: &Path) -> Result<Dtype, NnetError> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| NnetError::Io { path: path.display().to_string(), source: e })?;
    let mut head = Vec::with_capacity(4096);
    f.by_ref()
        .take(1 << 20)
        .read_to_end(&mut head)
        .map_err(|e| NnetError::Io { path: path.display().to_string(), source: e })?;
    let mut r = Reader { buf: &head, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NnetError::Checkpoint("bad magic".into()));
    }
    let _version = r.u32()?;
    let _meta = r.bytes()?;
    let count = r.u32()?;
    if count == 0 {
        return Err(NnetError::Checkpoint("checkpoint holds no tensors".into()));
    }
    let _name = r.bytes()?;
    Dtype::from_tag(r.u8()?).ok_or_else(|| NnetError::Checkpoint("unknown dtype tag".into()))
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>, NnetError> {
    let buf = std::fs::read(path)
        .map_err(|e| NnetError::Io { path: path.display().to_string(), source: e })?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NnetError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NnetError::Checkpoint(format!("unsupported version {version}")));
    }
    let meta: CheckpointMeta = serde_json::from_slice(r.bytes()?)
        .map_err(|e| NnetError::Checkpoint(format!("meta parse: {e}")))?;
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        named.push(r.tensor::<F>()?);
    }
    let params = Parameters::from_named(named)?;
    let opt = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let peak_lr = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            let warmup_steps = r.u64()?;
            let mut m = Vec::with_capacity(params.len());
            let mut v = Vec::with_capacity(params.len());
            for _ in 0..params.len() {
                m.push(r.tensor::<F>()?.1);
                v.push(r.tensor::<F>()?.1);
            }
            Some(OptState { m, v, step, config: AdamConfig { peak_lr, warmup_steps } })
        }
        other => return Err(NnetError::Checkpoint(format!("bad optimizer flag {other}"))),
    };
    if r.pos != buf.len() {
        return Err(NnetError::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { params, meta, opt })
}
