//! Single-file versioned checkpoints. Every RNG stream in training is derived
//! from the master seed and the epoch/iteration counters, so the counters are
//! all the random state there is to save.

use std::path::{Path, PathBuf};

use crate::codec::{get_params, put_params, Reader, Writer};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::policy::PolicyParams;
use crate::replay::ReplayBuffer;

const MAGIC: &[u8; 8] = b"ARPOCKP1";
const FORMAT_VERSION: u32 = 1;
const PARAMS_MAGIC: &[u8; 8] = b"ARPOPRM1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// The configuration that produced this state, as TOML text.
    pub config_text: String,
    pub seed: u64,
    pub epochs_done: usize,
    pub step: u64,
    pub cumulative_vtime_ms: u64,
    pub params: PolicyParams,
    /// Frozen behavior policy used by reject sampling.
    pub behavior: PolicyParams,
    pub adam: AdamState,
    pub replay: ReplayBuffer,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.len(self.config_text.len());
        w.bytes(self.config_text.as_bytes());
        w.u64(self.seed);
        w.u64(self.epochs_done as u64);
        w.u64(self.step);
        w.u64(self.cumulative_vtime_ms);
        put_params(&mut w, &self.params);
        put_params(&mut w, &self.behavior);
        w.f64s(&self.adam.m);
        w.f64s(&self.adam.v);
        w.u64(self.adam.steps);
        self.replay.write(&mut w);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Corrupt {
                position: 0,
                message: "not a checkpoint file".into(),
            });
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.corrupt(format!("unsupported checkpoint version {version}")));
        }
        let n = r.len(1)?;
        let config_text = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| r.corrupt("configuration is not UTF-8"))?;
        let seed = r.u64()?;
        let epochs_done = r.u64()? as usize;
        let step = r.u64()?;
        let cumulative_vtime_ms = r.u64()?;
        let params = get_params(&mut r)?;
        let behavior = get_params(&mut r)?;
        let m = r.f64s()?;
        let v = r.f64s()?;
        let steps = r.u64()?;
        if m.len() != params.len() || v.len() != params.len() {
            return Err(r.corrupt("optimizer moments do not match the parameters"));
        }
        let replay = ReplayBuffer::read(&mut r)?;
        r.expect_end()?;
        Ok(Checkpoint {
            config_text,
            seed,
            epochs_done,
            step,
            cumulative_vtime_ms,
            params,
            behavior,
            adam: AdamState { m, v, steps },
            replay,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn checkpoint_path(dir: &Path, epochs_done: usize) -> PathBuf {
    dir.join(format!("epoch-{epochs_done:04}.ckpt"))
}

/// The checkpoint with the most completed epochs in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch-")?.strip_suffix(".ckpt")?.parse::<usize>().ok());
        if let Some(epoch) = epoch {
            if best.as_ref().map_or(true, |(b, _)| epoch > *b) {
                best = Some((epoch, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

pub fn save_params(path: &Path, params: &PolicyParams) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(PARAMS_MAGIC);
    put_params(&mut w, params);
    std::fs::write(path, w.into_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<PolicyParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes);
    if r.take(PARAMS_MAGIC.len())? != PARAMS_MAGIC {
        // a checkpoint is also accepted; its current parameters are used
        return Checkpoint::from_bytes(&bytes).map(|c| c.params);
    }
    let p = get_params(&mut r)?;
    r.expect_end()?;
    Ok(p)
}
