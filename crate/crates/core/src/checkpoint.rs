//! Versioned binary checkpoint container shared by the layout and OCR models.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        7 bytes   "FPTHD-L" or "FPTHD-O"
//! version      u16
//! meta         u32 count, then count × (str key, str value)
//! iteration    u64
//! charset      u32 count, then count × str
//! layers       u32 count, then count × (str name, u8 decay, u32 ndim, ndim × u32 dim)
//! weights      f32 × Σ layer sizes, layer by layer, row-major
//! optimizer    u8 flag; if 1: u64 step, then per layer 2 × size f32 (first, second moment)
//! checksum     u64 FNV-1a of every preceding byte
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::nn::{Params, Tensor};

pub const VERSION: u16 = 1;
pub const LAYOUT_MAGIC: &[u8; 7] = b"FPTHD-L";
pub const OCR_MAGIC: &[u8; 7] = b"FPTHD-O";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a {expected} checkpoint (found magic {found:?})")]
    Magic { expected: String, found: String },
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u16),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("invalid UTF-8 in checkpoint string at byte {0}")]
    Utf8(usize),
    #[error("checkpoint metadata: {0}")]
    Meta(String),
}

/// First and second moment estimates of an adaptive optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Tensor<f32>>,
    pub second: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub magic: [u8; 7],
    pub meta: Vec<(String, String)>,
    pub iteration: u64,
    pub charset: Vec<String>,
    pub params: Params<f32>,
    pub optimizer: Option<OptimizerState>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(self.buf.len()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()?;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Utf8(at))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let bytes = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated(self.buf.len()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Parses a metadata value, failing with a message naming the key.
    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let raw = self.meta_value(key).ok_or_else(|| CheckpointError::Meta(format!("missing key {key}")))?;
        raw.parse().map_err(|_| CheckpointError::Meta(format!("bad value {raw:?} for {key}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.meta.len());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&self.iteration.to_le_bytes());
        put_u32(&mut out, self.charset.len());
        for c in &self.charset {
            put_str(&mut out, c);
        }
        put_u32(&mut out, self.params.len());
        for p in self.params.iter() {
            put_str(&mut out, &p.name);
            out.push(p.decay as u8);
            put_u32(&mut out, p.value.shape().len());
            for &d in p.value.shape() {
                put_u32(&mut out, d);
            }
        }
        for p in self.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.optimizer {
            None => out.push(0),
            Some(state) => {
                out.push(1);
                out.extend_from_slice(&state.step.to_le_bytes());
                for (m, v) in state.first.iter().zip(&state.second) {
                    for x in m.data().iter().chain(v.data()) {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], expected: &[u8; 7]) -> Result<Checkpoint, CheckpointError> {
        if bytes.len() < 7 || &bytes[..7] != expected {
            let found = String::from_utf8_lossy(&bytes[..bytes.len().min(7)]).into_owned();
            return Err(CheckpointError::Magic { expected: String::from_utf8_lossy(expected).into_owned(), found });
        }
        if bytes.len() < 17 {
            return Err(CheckpointError::Truncated(bytes.len()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 8);
        let mut r = Reader { buf: body, pos: 7 };
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        if fnv1a(body) != u64::from_le_bytes(sum.try_into().expect("8 bytes")) {
            return Err(CheckpointError::Checksum);
        }
        let n_meta = r.u32()?;
        let mut meta = Vec::with_capacity(n_meta.min(1024));
        for _ in 0..n_meta {
            meta.push((r.str()?, r.str()?));
        }
        let iteration = r.u64()?;
        let n_chars = r.u32()?;
        let mut charset = Vec::with_capacity(n_chars.min(4096));
        for _ in 0..n_chars {
            charset.push(r.str()?);
        }
        let n_layers = r.u32()?;
        let mut layers = Vec::with_capacity(n_layers.min(4096));
        for _ in 0..n_layers {
            let name = r.str()?;
            let decay = r.u8()? != 0;
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            layers.push((name, decay, shape));
        }
        let mut params = Params::new();
        for (name, decay, shape) in &layers {
            let n = shape.iter().product();
            params.push(name.clone(), Tensor::from_vec(shape, r.f32s(n)?), *decay);
        }
        let optimizer = match r.u8()? {
            0 => None,
            _ => {
                let step = r.u64()?;
                let (mut first, mut second) = (Vec::new(), Vec::new());
                for (_, _, shape) in &layers {
                    let n = shape.iter().product();
                    first.push(Tensor::from_vec(shape, r.f32s(n)?));
                    second.push(Tensor::from_vec(shape, r.f32s(n)?));
                }
                Some(OptimizerState { step, first, second })
            }
        };
        if r.pos != body.len() {
            return Err(CheckpointError::Meta(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint { magic: *expected, meta, iteration, charset, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path, expected: &[u8; 7]) -> Result<Checkpoint, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Checkpoint::from_bytes(&bytes, expected)
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`, so
/// readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = Params::new();
        params.push("conv0.weight", Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, -2.5, 3.25, 0.0]), true);
        params.push("conv0.bias", Tensor::from_vec(&[2], vec![0.5, f32::MIN_POSITIVE]), false);
        Checkpoint {
            magic: *OCR_MAGIC,
            meta: vec![("token_dim".into(), "8".into())],
            iteration: 42,
            charset: vec!["a".into(), "ñ".into()],
            params,
            optimizer: None,
        }
    }

    #[test]
    fn byte_round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes(), OCR_MAGIC).unwrap();
        assert_eq!(back, c);
        let mut with_opt = c.clone();
        with_opt.optimizer = Some(OptimizerState {
            step: 3,
            first: c.params.iter().map(|p| p.value.map(|v| v * 0.5)).collect(),
            second: c.params.iter().map(|p| p.value.map(|v| v * v)).collect(),
        });
        assert_eq!(Checkpoint::from_bytes(&with_opt.to_bytes(), OCR_MAGIC).unwrap(), with_opt);
        assert_eq!(back.meta_parse::<usize>("token_dim").unwrap(), 8);
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[..7], b"FPTHD-O");
        assert_eq!(u16::from_le_bytes([b[7], b[8]]), VERSION);
    }

    #[test]
    fn corruption_is_detected() {
        let b = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&b, LAYOUT_MAGIC), Err(CheckpointError::Magic { .. })));
        let mut flipped = b.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&flipped, OCR_MAGIC), Err(CheckpointError::Checksum)));
        assert!(Checkpoint::from_bytes(&b[..b.len() - 3], OCR_MAGIC).is_err());
        let mut v2 = b.clone();
        v2[7] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2, OCR_MAGIC), Err(CheckpointError::Version(2))));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path, OCR_MAGIC).unwrap(), sample());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
