//! Binary tensor and checkpoint files, dataset sidecars and PGM export.
//!
//! Tensor file: `"MMCT"`, version `u16`, dtype `u8` (0 = f64), ndims `u8`,
//! dims as `u32`, then the row-major payload. Every integer and float is
//! little-endian.
//!
//! Checkpoint file: `"MMCK"`, version `u16`, the configuration text, the
//! modality names, the step counter, raw and averaged parameter blocks
//! (`u16` name length, name, embedded tensor file) and the optimizer state.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::modality::{Dataset, ModalitySet};
use crate::net::MmCsnParams;
use crate::tensor::{Adam, AdamState, Tensor};
use crate::train::TrainState;

const TENSOR_MAGIC: &[u8; 4] = b"MMCT";
const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
const VERSION: u16 = 1;
const DTYPE_F64: u8 = 0;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Bounds-checked little-endian reader; running off the end is a corruption
/// error carrying the byte counts.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Corruption {
                path: self.path.to_path_buf(),
                expected: end as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| format_err(self.path, "string is not UTF-8"))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let magic = self.array::<4>()?;
        if &magic != TENSOR_MAGIC {
            return Err(format_err(self.path, format!("bad tensor magic {:?}", String::from_utf8_lossy(&magic))));
        }
        let version = self.u16()?;
        if version != VERSION {
            return Err(format_err(self.path, format!("unsupported tensor version {version}")));
        }
        let dtype = self.u8()?;
        if dtype != DTYPE_F64 {
            return Err(format_err(self.path, format!("unsupported dtype code {dtype}")));
        }
        let ndims = self.u8()? as usize;
        if ndims == 0 {
            return Err(format_err(self.path, "tensor has zero dimensions"));
        }
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            let d = self.u32()? as usize;
            if d == 0 {
                return Err(format_err(self.path, "tensor has a zero extent"));
            }
            dims.push(d);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format_err(self.path, "tensor size overflows"))?;
        let raw = self.take(count.checked_mul(8).ok_or_else(|| format_err(self.path, "tensor size overflows"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor::new(&dims, data)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Corruption {
                path: self.path.to_path_buf(),
                expected: self.pos as u64,
                actual: self.bytes.len() as u64,
            });
        }
        Ok(())
    }
}

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn tensor_to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    if t.ndim() > u8::MAX as usize || t.shape().iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::shape(t.shape(), "does not fit the tensor file header"));
    }
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + 8 * t.len());
    encode_tensor(t, &mut out);
    Ok(out)
}

/// Decodes a complete tensor file; `path` only labels errors.
pub fn tensor_from_bytes(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader::new(bytes, path);
    let t = r.tensor()?;
    r.finish()?;
    Ok(t)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    tensor_from_bytes(&read_bytes(path)?, path)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_bytes(path.as_ref(), &tensor_to_bytes(t)?)
}

/// `<path>.modalities`: one modality name per line in channel order.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".modalities");
    PathBuf::from(s)
}

pub fn write_dataset(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let path = path.as_ref();
    write_tensor(path, &data.images)?;
    let mut names = data.modalities.names().join("\n");
    names.push('\n');
    write_bytes(&sidecar_path(path), names.as_bytes())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let images = read_tensor(path)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let names: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let modalities = ModalitySet::new(&names).map_err(|e| format_err(&side, e.to_string()))?;
    Dataset::new(modalities, images)
}

/// Writes one 2-D channel as an 8-bit binary PGM with `round(255·v)`
/// (halves round up). Values outside `[0, 1]` are clamped; the number of
/// clamped pixels is returned so the caller can warn.
pub fn export_pgm(channel: &Tensor, path: impl AsRef<Path>) -> Result<usize> {
    let (h, w) = match *channel.shape() {
        [h, w] => (h, w),
        _ => return Err(Error::shape(channel.shape(), "expected a 2-D channel")),
    };
    let mut clamped = 0;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in channel.data() {
        let c = if v.is_nan() {
            clamped += 1;
            0.0
        } else if !(0.0..=1.0).contains(&v) {
            clamped += 1;
            v.clamp(0.0, 1.0)
        } else {
            v
        };
        out.push((255.0 * c + 0.5).floor() as u8);
    }
    write_bytes(path.as_ref(), &out)?;
    Ok(clamped)
}

fn push_str16(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn push_blocks(out: &mut Vec<u8>, names: &[String], tensors: &[Tensor]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (n, t) in names.iter().zip(tensors) {
        push_str16(out, n);
        encode_tensor(t, out);
    }
}

fn read_blocks(r: &mut Reader) -> Result<(Vec<String>, Vec<Tensor>)> {
    let n = r.u32()? as usize;
    let mut names: Vec<String> = Vec::with_capacity(n.min(4096));
    let mut tensors = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = r.string(len)?;
        if names.contains(&name) {
            return Err(format_err(r.path, format!("duplicate parameter block {name:?}")));
        }
        names.push(name);
        tensors.push(r.tensor()?);
    }
    Ok((names, tensors))
}

pub fn checkpoint_to_bytes(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = state.config.to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let names = state.modalities.names();
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for n in names {
        push_str16(&mut out, n);
    }
    out.extend_from_slice(&state.step.to_le_bytes());
    let pnames = state.params.names();
    push_blocks(&mut out, pnames, state.params.tensors());
    push_blocks(&mut out, pnames, state.ema.tensors());
    let adam = &state.adam;
    out.extend_from_slice(&adam.step.to_le_bytes());
    for v in [adam.hyper.lr, adam.hyper.beta1, adam.hyper.beta2, adam.hyper.eps] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    push_blocks(&mut out, pnames, &adam.m);
    push_blocks(&mut out, pnames, &adam.v);
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let mut r = Reader::new(bytes, path);
    let magic = r.array::<4>()?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format_err(path, format!("bad checkpoint magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(format_err(path, format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let config = Config::parse(&r.string(cfg_len)?).map_err(|e| format_err(path, e.to_string()))?;
    let n_mod = r.u32()? as usize;
    let mut names = Vec::with_capacity(n_mod.min(256));
    for _ in 0..n_mod {
        let len = r.u16()? as usize;
        names.push(r.string(len)?);
    }
    let modalities = ModalitySet::new(&names).map_err(|e| format_err(path, e.to_string()))?;
    let step = r.u64()?;
    let net = |names: Vec<String>, tensors: Vec<Tensor>| {
        MmCsnParams::from_parts(config.net.clone(), modalities.len(), names, tensors)
            .map_err(|e| format_err(path, e.to_string()))
    };
    let (pn, pt) = read_blocks(&mut r)?;
    let params = net(pn, pt)?;
    let (en, et) = read_blocks(&mut r)?;
    let ema = net(en, et)?;
    let adam_step = r.u64()?;
    let hyper = Adam {
        lr: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
    };
    let (mn, m) = read_blocks(&mut r)?;
    let (vn, v) = read_blocks(&mut r)?;
    if mn != params.names() || vn != params.names() {
        return Err(format_err(path, "optimizer blocks do not match the parameter layout"));
    }
    for (p, (a, b)) in params.tensors().iter().zip(m.iter().zip(&v)) {
        if p.shape() != a.shape() || p.shape() != b.shape() {
            return Err(format_err(path, "optimizer moment shape differs from its parameter"));
        }
    }
    r.finish()?;
    Ok(TrainState {
        config,
        modalities,
        params,
        ema,
        adam: AdamState {
            hyper,
            step: adam_step,
            m,
            v,
        },
        step,
    })
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &checkpoint_to_bytes(state))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    checkpoint_from_bytes(&read_bytes(path)?, path)
}
