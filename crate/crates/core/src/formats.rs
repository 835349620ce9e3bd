//! Little-endian binary artifact formats.

use std::fs;
use std::path::{Path, PathBuf};

use mirssl_autodiff::{ParamStore, Tensor};

use crate::dsp::{FeatureKind, FeatureMatrix};
use crate::encoder::EncoderConfig;
use crate::error::{CoreError, Result};
use crate::quantize::{Codebook, LabelSequence, NormStats};

pub const FEATURE_MAGIC: &[u8; 4] = b"SSLF";
pub const CODEBOOK_MAGIC: &[u8; 4] = b"SSLK";
pub const LABEL_MAGIC: &[u8; 4] = b"SSLL";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSLC";
pub const PROBE_MAGIC: &[u8; 4] = b"SSLP";
pub const VERSION: u32 = 1;

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new(magic: &[u8; 4]) -> Self {
        Self {
            buf: magic.to_vec(),
        }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, v: &[f32]) {
        self.buf.reserve(v.len() * 4);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
    }

    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    /// Named tensors: count, then (name, rank, dims, data) per entry.
    pub fn tensors<'a>(&mut self, items: impl ExactSizeIterator<Item = (&'a str, &'a [usize], &'a [f32])>) {
        self.u32(items.len() as u32);
        for (name, shape, data) in items {
            self.str(name);
            self.u32(shape.len() as u32);
            for &d in shape {
                self.u64(d as u64);
            }
            self.f32s(data);
        }
    }

    pub fn param_values(&mut self, store: &ParamStore<f32>) {
        self.tensors(
            store
                .iter()
                .map(|p| (p.name.as_str(), p.value.shape(), p.value.data()))
                .collect::<Vec<_>>()
                .into_iter(),
        );
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
            }
        }
        fs::write(path, self.buf).map_err(|e| CoreError::io(path, e))
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], magic: &[u8; 4], path: &Path) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != magic {
            return Err(CoreError::format(
                path,
                format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
            ));
        }
        Ok(Self {
            buf,
            pos: 4,
            path: path.to_path_buf(),
        })
    }

    pub fn err(&self, detail: impl Into<String>) -> CoreError {
        CoreError::format(&self.path, detail)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err("truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("invalid utf-8 string"))
    }

    pub fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != VERSION {
            return Err(self.err(format!("unsupported version {v}")));
        }
        Ok(())
    }

    pub fn tensors(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = self.str()?;
            let rank = self.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(self.u64()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| self.err("tensor size overflow"))?;
            let data = self.f32s(numel)?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(self.err(format!("non-finite values in {name}")));
            }
            out.push((name, Tensor::new(&shape, data)?));
        }
        Ok(out)
    }

    pub fn param_values(&mut self) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        for (name, t) in self.tensors()? {
            store.add(name, t).map_err(|e| self.err(e.to_string()))?;
        }
        Ok(store)
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err("trailing bytes"));
        }
        Ok(())
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CoreError::io(path, e))
}

pub fn write_features(path: &Path, f: &FeatureMatrix) -> Result<()> {
    let mut w = ByteWriter::new(FEATURE_MAGIC);
    w.u32(VERSION);
    w.u8(f.kind().code());
    w.f32(f.frame_rate());
    w.u64(f.frames() as u64);
    w.u32(f.dims() as u32);
    w.f32s(f.values());
    w.write_to(path)
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let buf = read_file(path)?;
    let mut r = ByteReader::new(&buf, FEATURE_MAGIC, path)?;
    r.version()?;
    let kind = FeatureKind::from_code(r.u8()?).ok_or_else(|| r.err("unknown feature kind"))?;
    let rate = r.f32()?;
    let t = r.u64()? as usize;
    let d = r.u32()? as usize;
    let values = r.f32s(t.checked_mul(d).ok_or_else(|| r.err("size overflow"))?)?;
    r.finish()?;
    FeatureMatrix::new(values, t, d, rate, kind).map_err(|e| r.err(e.to_string()))
}

pub fn write_codebook(path: &Path, cb: &Codebook) -> Result<()> {
    let mut w = ByteWriter::new(CODEBOOK_MAGIC);
    w.u32(VERSION);
    w.u32(cb.k() as u32);
    w.u32(cb.dims() as u32);
    w.u8(cb.kind().code());
    match cb.norm() {
        Some(n) => {
            w.u8(1);
            w.f32s(&n.mean);
            w.f32s(&n.std);
        }
        None => w.u8(0),
    }
    w.f32s(cb.centroids());
    w.write_to(path)
}

pub fn read_codebook(path: &Path) -> Result<Codebook> {
    let buf = read_file(path)?;
    let mut r = ByteReader::new(&buf, CODEBOOK_MAGIC, path)?;
    r.version()?;
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let kind = FeatureKind::from_code(r.u8()?).ok_or_else(|| r.err("unknown feature kind"))?;
    let norm = match r.u8()? {
        0 => None,
        1 => Some(NormStats {
            mean: r.f32s(d)?,
            std: r.f32s(d)?,
        }),
        _ => return Err(r.err("bad normalization flag")),
    };
    let centroids = r.f32s(k * d)?;
    r.finish()?;
    Codebook::new(k, d, kind, norm, centroids).map_err(|e| r.err(e.to_string()))
}

pub fn write_labels(path: &Path, labels: &LabelSequence) -> Result<()> {
    let mut w = ByteWriter::new(LABEL_MAGIC);
    w.u64(labels.ids.len() as u64);
    for &id in &labels.ids {
        w.u32(id);
    }
    w.write_to(path)
}

/// Reads a label file; the frame rate is the encoder's 50 Hz.
pub fn read_labels(path: &Path) -> Result<LabelSequence> {
    let buf = read_file(path)?;
    let mut r = ByteReader::new(&buf, LABEL_MAGIC, path)?;
    let t = r.u64()? as usize;
    let mut ids = Vec::with_capacity(t.min(1 << 24));
    for _ in 0..t {
        ids.push(r.u32()?);
    }
    r.finish()?;
    Ok(LabelSequence {
        ids,
        frame_rate: EncoderConfig::default().frame_rate(),
    })
}
