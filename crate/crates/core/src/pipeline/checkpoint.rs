//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RPTK" | u32 version | u32 tensor count
//! per tensor: u16 name length | name (UTF-8) | u8 rank | rank × u32 dims | f32 data
//! metadata (UTF-8 TOML) | u64 offset of the metadata
//! ```
//!
//! Tensor names are `group/name`, e.g. `decoder/blocks.0.attn.q.w`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Phase, RunConfig};
use crate::error::{Error, Result};
use crate::latent_generator::LatentStats;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RPTK";
pub const VERSION: u32 = 1;

const STATS_GROUP: &str = "latent";

/// Everything a phase produces: parameter groups, step, stats, config echo.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    pub step: u64,
    pub groups: BTreeMap<String, ParamStore>,
    pub latent_stats: Option<LatentStats>,
    /// Which encoder produced the latent statistics (`ema` or `raw`).
    pub latent_source: Option<String>,
    pub config: RunConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    phase: Phase,
    step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    latent_source: Option<String>,
    trainable: BTreeMap<String, Vec<String>>,
    config: RunConfig,
}

impl Checkpoint {
    pub fn new(phase: Phase, step: u64, config: RunConfig) -> Self {
        Self {
            phase,
            step,
            groups: BTreeMap::new(),
            latent_stats: None,
            latent_source: None,
            config,
        }
    }

    pub fn group(&self, name: &str) -> Result<&ParamStore> {
        self.groups.get(name).ok_or_else(|| {
            Error::Config(format!(
                "checkpoint ({} phase) has no `{}` parameters",
                self.phase, name
            ))
        })
    }

    /// The EMA shadow of `name` when present, else the live group.
    pub fn eval_group(&self, name: &str) -> Result<&ParamStore> {
        match self.groups.get(&format!("ema.{name}")) {
            Some(p) => Ok(p),
            None => self.group(name),
        }
    }

    pub fn has_ema(&self, name: &str) -> bool {
        self.groups.contains_key(&format!("ema.{name}"))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for (g, store) in &self.groups {
            if g.contains('/') || g == STATS_GROUP {
                return Err(Error::invalid(format!("reserved group name `{}`", g)));
            }
            for (n, t) in store.iter() {
                tensors.push((format!("{g}/{n}"), t));
            }
        }
        let stats;
        if let Some(s) = &self.latent_stats {
            let d = s.mean.len();
            stats = [
                Tensor::from_vec(&[d], s.mean.clone())?,
                Tensor::from_vec(&[d], s.std.clone())?,
            ];
            tensors.push((format!("{STATS_GROUP}/mean"), &stats[0]));
            tensors.push((format!("{STATS_GROUP}/std"), &stats[1]));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len())
                .map_err(|_| Error::invalid(format!("tensor name too long: {}", name)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::invalid(format!("rank too large for `{}`", name)))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::invalid(format!("dimension too large in `{}`", name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = Metadata {
            phase: self.phase,
            step: self.step,
            latent_source: self.latent_source.clone(),
            trainable: self
                .groups
                .iter()
                .map(|(g, s)| (g.clone(), s.trainable_names().cloned().collect()))
                .collect(),
            config: self.config.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::invalid(e.to_string()))?;
        let offset = out.len() as u64;
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {:?}, expected \"RPTK\"", magic)));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                4,
                format!("unsupported checkpoint version {}, expected {}", version, VERSION),
            ));
        }
        if bytes.len() < 8 {
            return Err(Error::format(bytes.len() as u64, "missing metadata offset"));
        }
        let tail = bytes.len() - 8;
        let meta_off = u64::from_le_bytes(bytes[tail..].try_into().expect("8 bytes")) as usize;
        let count = r.u32()?;
        let mut flat: Vec<(String, Tensor)> = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(at as u64 + 2, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let start = r.pos;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| {
                Error::format(start as u64, format!("tensor `{}` is too large", name))
            })?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            flat.push((name, Tensor::from_vec(&shape, data)?));
        }
        if r.pos > tail {
            return Err(Error::format(tail as u64, "tensor data overlaps metadata offset"));
        }
        if meta_off != r.pos {
            return Err(Error::format(
                tail as u64,
                format!("metadata offset {} does not follow tensor data at {}", meta_off, r.pos),
            ));
        }
        let text = std::str::from_utf8(&bytes[meta_off..tail])
            .map_err(|e| Error::format(meta_off as u64 + e.valid_up_to() as u64, "metadata is not UTF-8"))?;
        let meta: Metadata = toml::from_str(text)
            .map_err(|e| Error::format(meta_off as u64, format!("metadata: {}", e)))?;

        let mut groups: BTreeMap<String, ParamStore> = BTreeMap::new();
        let (mut mean, mut std) = (None, None);
        for (full, t) in flat {
            let (g, n) = full
                .split_once('/')
                .ok_or_else(|| Error::format(12, format!("tensor `{}` has no group", full)))?;
            if g == STATS_GROUP {
                match n {
                    "mean" => mean = Some(t.into_data()),
                    "std" => std = Some(t.into_data()),
                    _ => return Err(Error::format(12, format!("unknown stats tensor `{}`", full))),
                }
                continue;
            }
            groups.entry(g.to_string()).or_default().insert(n, t);
        }
        for (g, store) in groups.iter_mut() {
            let names = meta.trainable.get(g).cloned().unwrap_or_default();
            store
                .set_trainable(names)
                .map_err(|e| Error::format(meta_off as u64, e.to_string()))?;
        }
        let latent_stats = match (mean, std) {
            (Some(mean), Some(std)) => Some(LatentStats { mean, std }),
            (None, None) => None,
            _ => return Err(Error::format(12, "incomplete latent statistics")),
        };
        Ok(Self {
            phase: meta.phase,
            step: meta.step,
            groups,
            latent_stats,
            latent_source: meta.latent_source,
            config: meta.config,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.pos as u64,
                format!("truncated: need {} bytes, {} remain", n, self.bytes.len() - self.pos),
            )),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Write via a temporary sibling and rename, so readers never see a
/// partial file.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(Phase::StageA, 7, RunConfig::default());
        let mut s = ParamStore::new();
        s.insert("a", Tensor::from_vec(&[2], vec![1.5, -0.0]).unwrap());
        s.insert("b", Tensor::from_vec(&[1, 1], vec![f32::MIN_POSITIVE]).unwrap());
        s.set_trainable(["a".to_string()]).unwrap();
        c.groups.insert("encoder".into(), s);
        c.latent_stats = Some(LatentStats {
            mean: vec![0.25],
            std: vec![3.0],
        });
        c.latent_source = Some("raw".into());
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        let a = back.group("encoder").unwrap().get("a").unwrap();
        assert_eq!(a.data()[1].to_bits(), (-0.0f32).to_bits());
        assert!(back.group("encoder").unwrap().is_trainable("a"));
        assert!(!back.group("encoder").unwrap().is_trainable("b"));
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in 0..bytes.len() {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format { .. })),
                "cut at {}",
                cut
            );
        }
    }

    #[test]
    fn wrong_magic_and_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 2;
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{:?}", other),
        }
        bytes[0] = b'X';
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{:?}", other),
        }
    }
}
