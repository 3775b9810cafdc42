//! Versioned binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "VCBOTCKP"
//! version      u32
//! kind         u8       1 = network model, 2 = observer
//! config_hash  32 bytes SHA-256 of the producing configuration (TOML)
//! payload_len  u64
//! payload      payload_len bytes
//! digest       32 bytes SHA-256 of every preceding byte
//! ```
//!
//! Model payload: configuration TOML (u32 length + UTF-8), tensor count
//! (u32) then per tensor name (u16 length + UTF-8), rows (u32), cols (u32)
//! and rows·cols f64 in column-major order; window count (u32) then per
//! window steps (u32), layers (u32) and for each step and layer the a_μ and
//! a_σ vectors (u32 length + f64s); Adam step (u64), α, β1, β2, ε (f64),
//! moment length (u64), m then v.

use std::path::Path;

use nalgebra::DVector;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::NetworkConfig;
use crate::error::{CoreError, Result};
use crate::params::NetworkParams;
use crate::train::adam::{AdamHyper, AdamState};
use crate::train::window::AdaptiveWindow;

pub const MAGIC: &[u8; 8] = b"VCBOTCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum CheckpointKind {
    Model = 1,
    Observer = 2,
}

/// SHA-256 of the TOML rendering of a configuration value.
pub fn config_digest<T: Serialize>(value: &T) -> Result<[u8; 32]> {
    let text = toml::to_string(value)?;
    Ok(Sha256::digest(text.as_bytes()).into())
}

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64s(&mut self, vs: &[f64]) {
        vs.iter().for_each(|v| self.f64(*v));
    }
    pub fn str32(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    pub fn str16(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.buf.extend_from_slice(s.as_bytes());
    }
    pub fn vec32(&mut self, v: &[f64]) {
        self.u32(v.len() as u32);
        self.f64s(v);
    }
    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CoreError::Corrupt(format!(
                "unexpected end of data at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        // Bound the allocation by what is actually left.
        if (self.buf.len() - self.pos) / 8 < n {
            return Err(CoreError::Corrupt(format!("{n} floats do not fit in the remaining data")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    pub fn str32(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| CoreError::Corrupt(e.to_string()))
    }
    pub fn str16(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| CoreError::Corrupt(e.to_string()))
    }
    pub fn vec32(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        self.f64s(n)
    }
    pub fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Wraps a payload in the versioned, digest-terminated container.
pub fn seal(kind: CheckpointKind, config_hash: &[u8; 32], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 85);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(config_hash);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Validates a container and returns (config hash, payload).
pub fn unseal(bytes: &[u8], kind: CheckpointKind) -> Result<([u8; 32], &[u8])> {
    const HEADER: usize = 8 + 4 + 1 + 32 + 8;
    if bytes.len() < HEADER + 32 {
        return Err(CoreError::Corrupt(format!("file is only {} bytes", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(CoreError::Corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CoreError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes[12] != kind as u8 {
        return Err(CoreError::Corrupt(format!(
            "container holds kind {}, expected {}",
            bytes[12], kind as u8
        )));
    }
    let hash: [u8; 32] = bytes[13..45].try_into().expect("32 bytes");
    let len = u64::from_le_bytes(bytes[45..53].try_into().expect("8 bytes")) as usize;
    if bytes.len() != HEADER + len + 32 {
        return Err(CoreError::Corrupt(format!(
            "declared payload of {len} bytes does not match file size {}",
            bytes.len()
        )));
    }
    let body_end = HEADER + len;
    let digest = Sha256::digest(&bytes[..body_end]);
    if digest.as_slice() != &bytes[body_end..] {
        return Err(CoreError::Corrupt("digest mismatch".into()));
    }
    Ok((hash, &bytes[HEADER..body_end]))
}

/// Everything needed to resume training or run a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: NetworkConfig,
    pub params: NetworkParams,
    pub windows: Vec<AdaptiveWindow>,
    pub adam: AdamState,
}

impl ModelCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::default();
        w.str32(&toml::to_string(&self.config)?);
        let mut count = 0u32;
        self.params.for_each_tensor(|_, _, _, _| count += 1);
        w.u32(count);
        self.params.for_each_tensor(|name, rows, cols, data| {
            w.str16(name);
            w.u32(rows as u32);
            w.u32(cols as u32);
            w.f64s(data);
        });
        w.u32(self.windows.len() as u32);
        for window in &self.windows {
            w.u32(window.len() as u32);
            w.u32(window.a_mu.first().map_or(0, |l| l.len()) as u32);
            for (mu, sigma) in window.a_mu.iter().zip(&window.a_sigma) {
                for (m, s) in mu.iter().zip(sigma) {
                    w.vec32(m.as_slice());
                    w.vec32(s.as_slice());
                }
            }
        }
        w.u64(self.adam.step);
        let h = self.adam.hyper;
        w.f64s(&[h.alpha, h.beta1, h.beta2, h.epsilon]);
        w.u64(self.adam.m.len() as u64);
        w.f64s(&self.adam.m);
        w.f64s(&self.adam.v);
        let hash = config_digest(&self.config)?;
        Ok(seal(CheckpointKind::Model, &hash, &w.into_bytes()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (hash, payload) = unseal(bytes, CheckpointKind::Model)?;
        let mut r = ByteReader::new(payload);
        let config: NetworkConfig = toml::from_str(&r.str32()?)
            .map_err(|e| CoreError::Corrupt(format!("embedded configuration: {e}")))?;
        if config_digest(&config)? != hash {
            return Err(CoreError::Corrupt("configuration hash mismatch".into()));
        }
        config.validate()?;
        let mut params = NetworkParams::zeros(&config);
        let count = r.u32()? as usize;
        let mut values = Vec::with_capacity(params.len());
        let mut expected = Vec::new();
        params.for_each_tensor(|name, rows, cols, _| expected.push((name.to_string(), rows, cols)));
        if count != expected.len() {
            return Err(CoreError::Corrupt(format!(
                "{count} tensors, configuration implies {}",
                expected.len()
            )));
        }
        for (name, rows, cols) in expected {
            let got = r.str16()?;
            let (gr, gc) = (r.u32()? as usize, r.u32()? as usize);
            if got != name || gr != rows || gc != cols {
                return Err(CoreError::Corrupt(format!(
                    "tensor {got} ({gr}×{gc}) where {name} ({rows}×{cols}) was expected"
                )));
            }
            values.extend(r.f64s(rows * cols)?);
        }
        params.assign(&values)?;
        let n_windows = r.u32()? as usize;
        let mut windows = Vec::with_capacity(n_windows.min(1024));
        for _ in 0..n_windows {
            let steps = r.u32()? as usize;
            let layers = r.u32()? as usize;
            let mut window = AdaptiveWindow {
                a_mu: Vec::with_capacity(steps.min(1 << 16)),
                a_sigma: Vec::with_capacity(steps.min(1 << 16)),
            };
            for _ in 0..steps {
                let mut mu = Vec::with_capacity(layers);
                let mut sigma = Vec::with_capacity(layers);
                for _ in 0..layers {
                    mu.push(DVector::from_vec(r.vec32()?));
                    sigma.push(DVector::from_vec(r.vec32()?));
                }
                window.a_mu.push(mu);
                window.a_sigma.push(sigma);
            }
            window
                .check(&config)
                .map_err(|e| CoreError::Corrupt(e.to_string()))?;
            windows.push(window);
        }
        let step = r.u64()?;
        let hyper = AdamHyper {
            alpha: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            epsilon: r.f64()?,
        };
        let n = r.u64()? as usize;
        let m = r.f64s(n)?;
        let v = r.f64s(n)?;
        if !r.finished() {
            return Err(CoreError::Corrupt("trailing bytes in payload".into()));
        }
        Ok(Self {
            config,
            params,
            windows,
            adam: AdamState { hyper, m, v, step },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
