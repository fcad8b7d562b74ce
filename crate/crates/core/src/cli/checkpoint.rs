//! Binary checkpoint format.
//!
//! ```text
//! "R0CKPT"                       6 bytes
//! version                        u32 LE
//! metadata length, metadata      u32 LE, UTF-8 JSON
//! block count                    u32 LE
//! per block:
//!   name length, name            u32 LE, UTF-8
//!   rank, dims                   u32 LE, u64 LE each
//!   values                       f64 LE, row-major
//! ```
//!
//! The network blocks come first in [`Denoiser::blocks`] order. A schedule, when present,
//! is stored as one extra block named `schedule.sigmas`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::schedule::{LadderKind, NoiseSchedule};
use crate::scorenet::{Architecture, Denoiser};

pub const MAGIC: &[u8; 6] = b"R0CKPT";
pub const VERSION: u32 = 1;
const SCHEDULE_BLOCK: &str = "schedule.sigmas";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Command that produced the file.
    pub command: String,
    pub seed: u64,
    pub arch: Architecture,
    pub schedule_kind: Option<LadderKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub net: Denoiser,
    pub schedule: Option<NoiseSchedule>,
}

impl Checkpoint {
    pub fn new(command: &str, seed: u64, net: Denoiser, schedule: Option<NoiseSchedule>) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                command: command.to_string(),
                seed,
                arch: net.arch().clone(),
                schedule_kind: schedule.as_ref().map(|s| s.kind()),
            },
            net,
            schedule,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        put_u32(&mut out, meta.len());
        out.extend_from_slice(&meta);

        let mut blocks: Vec<(String, Vec<usize>, &[f64])> = self.net.blocks();
        if let Some(s) = &self.schedule {
            blocks.push((SCHEDULE_BLOCK.to_string(), vec![s.sigmas().len()], s.sigmas()));
        }
        put_u32(&mut out, blocks.len());
        for (name, shape, values) in blocks {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, shape.len());
            for d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).ok_or_else(|| fail("file too short".into()))? != MAGIC {
            return Err(fail("bad magic, not a checkpoint".into()));
        }
        let version = r.u32().ok_or_else(|| fail("truncated header".into()))?;
        if version != VERSION {
            return Err(fail(format!("unsupported version {version} (expected {VERSION})")));
        }
        let meta_len = r.u32().ok_or_else(|| fail("truncated header".into()))? as usize;
        let meta_bytes = r.take(meta_len).ok_or_else(|| fail("truncated metadata".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(meta_bytes).map_err(|e| fail(format!("metadata: {e}")))?;

        let count = r.u32().ok_or_else(|| fail("truncated block table".into()))? as usize;
        let mut blocks = Vec::with_capacity(count.min(64));
        for b in 0..count {
            let trunc = || fail(format!("block {b} truncated"));
            let name_len = r.u32().ok_or_else(trunc)? as usize;
            let name = std::str::from_utf8(r.take(name_len).ok_or_else(trunc)?)
                .map_err(|_| fail(format!("block {b} name is not UTF-8")))?
                .to_string();
            let rank = r.u32().ok_or_else(trunc)? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64().ok_or_else(trunc)? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| fail(format!("block `{name}` shape overflows")))?;
            let raw = r
                .take(n.checked_mul(8).ok_or_else(trunc)?)
                .ok_or_else(trunc)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blocks.push((name, shape, values));
        }
        if r.pos != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let schedule = match blocks.last() {
            Some((name, _, _)) if name == SCHEDULE_BLOCK => {
                let (_, _, sigmas) = blocks.pop().unwrap();
                let kind = meta
                    .schedule_kind
                    .ok_or_else(|| fail("schedule block without a schedule kind".into()))?;
                Some(NoiseSchedule::from_sigmas(sigmas, kind).map_err(|e| fail(e.to_string()))?)
            }
            _ => None,
        };

        let template = Denoiser::from_params(meta.arch.clone(), vec![0.0; meta.arch.param_count()])
            .map_err(|e| fail(e.to_string()))?;
        let expected = template.blocks();
        if expected.len() != blocks.len() {
            return Err(fail(format!(
                "expected {} parameter blocks, found {}",
                expected.len(),
                blocks.len()
            )));
        }
        let mut params = Vec::with_capacity(meta.arch.param_count());
        for ((want_name, want_shape, _), (name, shape, values)) in expected.iter().zip(blocks) {
            if *want_name != name || *want_shape != shape {
                return Err(fail(format!(
                    "block `{name}` {shape:?} does not match `{want_name}` {want_shape:?}"
                )));
            }
            params.extend(values);
        }
        let net = Denoiser::from_params(meta.arch.clone(), params).map_err(|e| fail(e.to_string()))?;
        Ok(Checkpoint { meta, net, schedule })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("length fits in u32").to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn sample_checkpoint(with_schedule: bool) -> Checkpoint {
        let arch = Architecture {
            input_dim: 2,
            cond_classes: 3,
            hidden: vec![5, 4],
            skip: true,
        };
        let net = Denoiser::new(arch, &mut stream(4, &[1]));
        let sched = with_schedule.then(|| NoiseSchedule::new(5, LadderKind::Cosine).unwrap());
        Checkpoint::new("train", 4, net, sched)
    }

    #[test]
    fn round_trip_is_byte_exact() {
        for with_schedule in [false, true] {
            let ck = sample_checkpoint(with_schedule);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn save_and_load_through_the_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/theta.ckpt");
        let ck = sample_checkpoint(true);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(matches!(Checkpoint::load(&dir.path().join("nope")), Err(Error::File { .. })));
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample_checkpoint(true).to_bytes();
        let p = Path::new("mem");
        let is_format = |b: &[u8]| matches!(Checkpoint::from_bytes(b, p), Err(Error::Format { .. }));

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(is_format(&bad_magic));

        let mut bad_version = bytes.clone();
        bad_version[6] = 9;
        assert!(is_format(&bad_version));

        assert!(is_format(&bytes[..bytes.len() - 3]));
        assert!(is_format(&bytes[..10]));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(is_format(&trailing));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let ck = sample_checkpoint(false);
        let mut other = ck.clone();
        other.meta.arch.hidden = vec![5, 5];
        // metadata claims a different architecture than the stored blocks
        let bytes = other.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("mem")),
            Err(Error::Format { .. })
        ));
    }
}
