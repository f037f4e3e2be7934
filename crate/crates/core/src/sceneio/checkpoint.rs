//! Binary checkpoint, all integers and floats little-endian:
//!
//! ```text
//! "D2GS"  u32 version  u64 count  u32 basis (0 = no deformation)
//! count * 15 f64                      raw splat parameters
//! 3 * count * 11 * basis f64          deform weights, centers, width params
//! u8 has_optimizer
//!   u64 groups, then per group: u64 len, u64 step, len f64 m, len f64 v
//! u64 n, n bytes                      config JSON
//! ```

use std::fs;
use std::path::Path;

use crate::deform::{DeformField, CHANNELS};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::primitive::SplatParams;
use crate::scene::Scene;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"D2GS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub scene: Scene,
    pub optimizer: Option<Vec<Adam>>,
    /// Configuration echo, stored verbatim.
    pub config_json: String,
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let scene = &self.scene;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(scene.len() as u64).to_le_bytes());
        let basis = scene.deform.as_ref().map_or(0, |d| d.basis()) as u32;
        out.extend_from_slice(&basis.to_le_bytes());
        for p in &scene.params {
            put_f64s(&mut out, &p.to_array());
        }
        if let Some(d) = &scene.deform {
            put_f64s(&mut out, &d.weights);
            put_f64s(&mut out, &d.centers);
            put_f64s(&mut out, &d.width_params);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(groups) => {
                out.push(1);
                out.extend_from_slice(&(groups.len() as u64).to_le_bytes());
                for g in groups {
                    out.extend_from_slice(&(g.len() as u64).to_le_bytes());
                    out.extend_from_slice(&g.step.to_le_bytes());
                    put_f64s(&mut out, &g.m);
                    put_f64s(&mut out, &g.v);
                }
            }
        }
        out.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { path, bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count = r.len_u64()?;
        let basis = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let mut a = [0.0; SplatParams::LEN];
            for v in a.iter_mut() {
                *v = r.f64()?;
            }
            params.push(SplatParams::from_array(&a));
        }
        let deform = if basis > 0 {
            let n = count
                .checked_mul(CHANNELS * basis)
                .ok_or_else(|| Error::format(path, "deform size overflow"))?;
            let w = r.f64s(n)?;
            let c = r.f64s(n)?;
            let s = r.f64s(n)?;
            Some(DeformField::from_parts(basis, w, c, s)?)
        } else {
            None
        };
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let groups = r.len_u64()?;
                let mut out = Vec::with_capacity(groups.min(64));
                for _ in 0..groups {
                    let len = r.len_u64()?;
                    let step = r.u64()?;
                    let m = r.f64s(len)?;
                    let v = r.f64s(len)?;
                    out.push(Adam { m, v, step });
                }
                Some(out)
            }
            other => return Err(Error::format(path, format!("bad optimizer flag {other}"))),
        };
        let n = r.len_u64()?;
        let config_json = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::format(path, "config echo is not UTF-8"))?;
        if r.pos != bytes.len() {
            return Err(Error::format(
                path,
                format!("{} trailing bytes after checkpoint", bytes.len() - r.pos),
            ));
        }
        let scene = Scene::new(params, deform)?;
        Ok(Self {
            scene,
            optimizer,
            config_json,
        })
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated checkpoint: needed {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A length field, checked against the bytes that remain.
    fn len_u64(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > (self.bytes.len() - self.pos) as u64 {
            return Err(Error::format(self.path, format!("length {v} exceeds remaining data")));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(path, &bytes)
}
