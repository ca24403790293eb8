//! Binary snapshot of a training run.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "MLFCGAN\0" | u32 version | u32 len + UTF-8 config text
//! u64 step | u64 generator adam t | u64 critic adam t
//! u32 tensor count | per tensor: u32 len + UTF-8 name, u32 ndim, u64 dims, f32 data
//! ```
//!
//! Tensor names are prefixed `g/`, `d/`, `g_adam_m/`, `g_adam_v/`,
//! `d_adam_m/` and `d_adam_v/`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::models::{Discriminator, Generator};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MLFCGAN\0";
pub const VERSION: u32 = 1;

const GROUPS: [&str; 6] = ["g", "d", "g_adam_m", "g_adam_v", "d_adam_m", "d_adam_v"];

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Generator updates completed.
    pub step: u64,
    pub generator: ParamStore,
    pub critic: ParamStore,
    pub g_adam: AdamState,
    pub d_adam: AdamState,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(bad("truncated file"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid UTF-8"))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

impl Checkpoint {
    fn stores(&self) -> [&ParamStore; 6] {
        [
            &self.generator,
            &self.critic,
            &self.g_adam.m,
            &self.g_adam.v,
            &self.d_adam.m,
            &self.d_adam.v,
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        put_str(&mut out, &self.config.to_text());
        out.extend(self.step.to_le_bytes());
        out.extend(self.g_adam.t.to_le_bytes());
        out.extend(self.d_adam.t.to_le_bytes());
        let count: usize = self.stores().iter().map(|s| s.len()).sum();
        out.extend((count as u32).to_le_bytes());
        for (group, store) in GROUPS.iter().zip(self.stores()) {
            for (name, t) in store.iter() {
                put_str(&mut out, &format!("{group}/{name}"));
                out.extend((t.shape().len() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend((d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    out.extend(v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses and checks every tensor against the shapes implied by the
    /// stored model configuration.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let config = TrainConfig::from_text(&r.string()?)?;
        config.validate()?;
        let step = r.u64()?;
        let g_t = r.u64()?;
        let d_t = r.u64()?;
        let count = r.u32()?;
        let mut stores: [ParamStore; 6] = Default::default();
        for _ in 0..count {
            let full = r.string()?;
            let (group, name) = full
                .split_once('/')
                .ok_or_else(|| bad(format!("tensor name `{full}` has no group")))?;
            let gi = GROUPS
                .iter()
                .position(|g| *g == group)
                .ok_or_else(|| bad(format!("unknown tensor group `{group}`")))?;
            let ndim = r.u32()? as usize;
            let dims = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            stores[gi].insert(name, Tensor::new(dims, data)?);
        }
        if !r.buf.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let [generator, critic, gm, gv, dm, dv] = stores;
        let want_g = Generator::new(&config.model)?.init(0);
        let want_d = Discriminator::new(&config.model)?.init(0);
        for (want, got) in [(&want_g, &generator), (&want_g, &gm), (&want_g, &gv)] {
            want.check_compatible(got)?;
        }
        for (want, got) in [(&want_d, &critic), (&want_d, &dm), (&want_d, &dv)] {
            want.check_compatible(got)?;
        }
        Ok(Checkpoint {
            g_adam: AdamState {
                config: config.adam,
                m: gm,
                v: gv,
                t: g_t,
            },
            d_adam: AdamState {
                config: config.adam,
                m: dm,
                v: dv,
                t: d_t,
            },
            config,
            step,
            generator,
            critic,
        })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        drop(f);
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
