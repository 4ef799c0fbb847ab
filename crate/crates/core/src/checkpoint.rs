//! Versioned checkpoint container.
//!
//! Layout: a UTF-8 header
//!
//! ```text
//! parttrack-checkpoint 1
//! [config]
//! key = value ...
//! [state]
//! key = value ...
//! [arrays] <count>
//! ```
//!
//! followed by `count` binary records: name length (u32 LE), name bytes,
//! rank (u32 LE), dims (u64 LE each), then the f64 LE values. Parameter
//! arrays use their model names; optimizer velocities are stored as
//! `velocity/<name>`.

use std::fs;
use std::path::Path;

use crate::config::{apply_pairs, parse_pairs, render, KvConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{RngState, Tensor};
use crate::training::{TrainConfig, TrainState};

const MAGIC: &str = "parttrack-checkpoint";
const VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "velocity/";

/// Everything a checkpoint file holds.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ModelParams,
    /// Present when the file was written from a training run.
    pub resume: Option<ResumeState>,
}

#[derive(Clone, Debug)]
pub struct ResumeState {
    pub step: u64,
    pub epoch: usize,
    pub rng_seed: u64,
    pub rng_stream: u64,
    pub rng_counter: u128,
    pub best: Option<(usize, f64)>,
    pub velocity: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, train: &TrainConfig) -> Self {
        Self {
            model: state.params.config().clone(),
            train: train.clone(),
            params: state.params.clone(),
            resume: Some(ResumeState {
                step: state.step,
                epoch: state.epoch,
                rng_seed: state.rng.seed(),
                rng_stream: state.rng.stream(),
                rng_counter: state.rng.counter(),
                best: state.best,
                velocity: state.velocity.clone(),
            }),
        }
    }

    /// Rebuilds a training state; a checkpoint without optimizer state
    /// resumes with zero velocity at step 0.
    pub fn into_state(self) -> TrainState {
        let seed = self.train.seed;
        match self.resume {
            Some(r) => TrainState {
                params: self.params,
                velocity: r.velocity,
                step: r.step,
                epoch: r.epoch,
                rng: RngState::restore(r.rng_seed, r.rng_stream, r.rng_counter),
                best: r.best,
            },
            None => TrainState::new(self.params, seed),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC} {VERSION}\n[config]\n");
        head.push_str(&render(&[&self.model as &dyn KvConfig, &self.train]));
        head.push_str("[state]\n");
        let mut arrays: Vec<(String, &Tensor)> = self
            .params
            .names()
            .iter()
            .cloned()
            .zip(self.params.tensors())
            .collect();
        if let Some(r) = &self.resume {
            head.push_str(&format!(
                "step = {}\nepoch = {}\nrng_seed = {}\nrng_stream = {}\nrng_counter = {}\n",
                r.step, r.epoch, r.rng_seed, r.rng_stream, r.rng_counter
            ));
            if let Some((e, v)) = r.best {
                head.push_str(&format!("best_epoch = {e}\nbest_loss_bits = {}\n", v.to_bits()));
            }
            for (name, v) in self.params.names().iter().zip(&r.velocity) {
                arrays.push((format!("{VELOCITY_PREFIX}{name}"), v));
            }
        }
        head.push_str(&format!("[arrays] {}\n", arrays.len()));

        let mut out = head.into_bytes();
        for (name, t) in arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8".into()))
        };

        let first = next_line()?;
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad("not a parttrack checkpoint".into()))?;
        if version != VERSION.to_string() {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        if next_line()? != "[config]" {
            return Err(bad("missing [config] section".into()));
        }
        let mut config_text = String::new();
        loop {
            let l = next_line()?;
            if l == "[state]" {
                break;
            }
            config_text.push_str(l);
            config_text.push('\n');
        }
        let mut state_text = String::new();
        let count: usize = loop {
            let l = next_line()?;
            if let Some(n) = l.strip_prefix("[arrays]") {
                break n.trim().parse().map_err(|_| bad(format!("bad array count `{n}`")))?;
            }
            state_text.push_str(l);
            state_text.push('\n');
        };

        let mut model = ModelConfig::default();
        let mut train = TrainConfig::default();
        apply_pairs(&mut [&mut model, &mut train], &parse_pairs(&config_text)?)
            .map_err(|e| bad(format!("config header: {e}")))?;

        let mut reader = Reader { bytes, pos };
        let mut params = Vec::new();
        let mut velocity = Vec::new();
        for _ in 0..count {
            let (name, t) = reader.array()?;
            match name.strip_prefix(VELOCITY_PREFIX) {
                Some(p) => velocity.push((p.to_string(), t)),
                None => params.push((name, t)),
            }
        }
        if reader.pos != bytes.len() {
            return Err(bad("trailing bytes after the last array".into()));
        }
        let params = ModelParams::from_named(&model, params)?;

        let resume = if state_text.trim().is_empty() {
            None
        } else {
            let pairs = parse_pairs(&state_text)?;
            let get = |k: &str| pairs.iter().find(|(_, key, _)| key == k).map(|(_, _, v)| v.as_str());
            let num = |k: &str| -> Result<u128> {
                get(k)
                    .ok_or_else(|| bad(format!("state is missing `{k}`")))?
                    .parse()
                    .map_err(|_| bad(format!("state `{k}` is not an integer")))
            };
            let best = match (get("best_epoch"), get("best_loss_bits")) {
                (Some(e), Some(b)) => Some((
                    e.parse().map_err(|_| bad("bad best_epoch".into()))?,
                    f64::from_bits(b.parse().map_err(|_| bad("bad best_loss_bits".into()))?),
                )),
                _ => None,
            };
            let mut vel = Vec::with_capacity(params.len());
            for (name, t) in params.names().iter().zip(params.tensors()) {
                let v = velocity
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, v)| v.clone())
                    .ok_or_else(|| bad(format!("missing velocity for `{name}`")))?;
                if v.shape() != t.shape() {
                    return Err(bad(format!("velocity for `{name}` has the wrong shape")));
                }
                vel.push(v);
            }
            Some(ResumeState {
                step: num("step")? as u64,
                epoch: num("epoch")? as usize,
                rng_seed: num("rng_seed")? as u64,
                rng_stream: num("rng_stream")? as u64,
                rng_counter: num("rng_counter")?,
                best,
                velocity: vel,
            })
        };
        Ok(Self {
            model,
            train,
            params,
            resume,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated array data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn array(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let dims = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        if len > self.bytes.len() / 8 {
            return Err(Error::Checkpoint(format!("array `{name}` claims {len} values")));
        }
        let raw = self.take(len * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, Tensor::new(&dims, data)?))
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads and insists that the stored model config equals `expected`.
pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load(path)?;
    if &ck.model != expected {
        let diffs: Vec<String> = ck
            .model
            .entries()
            .into_iter()
            .zip(expected.entries())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, b)| format!("{}: checkpoint {} vs requested {}", a.0, a.1, b.1))
            .collect();
        return Err(Error::Checkpoint(format!("config mismatch ({})", diffs.join(", "))));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Patch;
    use crate::model::PartSource;

    fn state() -> TrainState {
        let mut s = TrainState::init(&ModelConfig::toy(), 4).unwrap();
        s.step = 17;
        s.epoch = 2;
        s.best = Some((1, 0.123));
        s.rng.uniform();
        s.velocity[0].data_mut()[0] = 0.5;
        s
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let s = state();
        let cfg = TrainConfig {
            lambda: 0.3,
            ..TrainConfig::default()
        };
        let bytes = Checkpoint::from_state(&s, &cfg).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.train, cfg);
        assert_eq!(back.model, ModelConfig::toy());
        for (a, b) in back.params.tensors().iter().zip(s.params.tensors()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let r = back.clone().into_state();
        assert_eq!((r.step, r.epoch, r.best), (17, 2, Some((1, 0.123))));
        assert_eq!(r.velocity, s.velocity);
        let (mut r1, mut r2) = (r.rng.clone(), s.rng.clone());
        assert_eq!(r1.uniform().to_bits(), r2.uniform().to_bits());

        let patch = Patch {
            size: 32,
            data: (0..32 * 32 * 3).map(|i| (i % 7) as f64 / 7.0).collect(),
        };
        let fa = s.params.extract_features(&patch, PartSource::Template).unwrap();
        let fb = back.params.extract_features(&patch, PartSource::Template).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(Checkpoint::from_bytes(&back.to_bytes()).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = Checkpoint::from_state(&state(), &TrainConfig::default()).to_bytes();
        assert!(Checkpoint::from_bytes(b"hello\n").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let text = String::from_utf8_lossy(&bytes).replace("parttrack-checkpoint 1", "parttrack-checkpoint 9");
        assert!(Checkpoint::from_bytes(text.as_bytes()).is_err());
    }

    #[test]
    fn mismatched_config_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("m.ckpt");
        save(&p, &Checkpoint::from_state(&state(), &TrainConfig::default())).unwrap();
        assert!(load_matching(&p, &ModelConfig::toy()).is_ok());
        let other = ModelConfig {
            layers: 2,
            ..ModelConfig::toy()
        };
        let err = load_matching(&p, &other).unwrap_err();
        assert!(err.to_string().contains("layers"), "{err}");
    }
}
