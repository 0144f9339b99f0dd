//! Single-file checkpoints.
//!
//! ```text
//! SCRIBBLEGATE_CKPT_v1\n
//! u64 length + resolved config text
//! u64 length + state text (key = value)
//! u32 tensor count, then per tensor:
//!   u32 name length + name, u32 rank, u64 dims..., f32 data (little endian)
//! ```
//!
//! Segmentor tensors live under `seg/`, discriminator tensors under `disc/`,
//! optimizer moments under `adam/`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Adam, ParamStore, Tensor};
use crate::config::ExperimentConfig;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::segmentor::Segmentor;
use crate::trainer::TrainState;

pub const MAGIC: &str = "SCRIBBLEGATE_CKPT_v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub state: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn state_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.state.get(key).ok_or_else(|| bad(format!("missing state key `{key}`")))?;
        raw.parse().map_err(|_| bad(format!("state key `{key}` has bad value `{raw}`")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC.as_bytes());
        buf.push(b'\n');
        let text = |buf: &mut Vec<u8>, s: &str| {
            buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
            buf.extend_from_slice(s.as_bytes());
        };
        text(&mut buf, &self.config.to_text());
        let state: String = self.state.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        text(&mut buf, &state);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        let magic = r.take(MAGIC.len() + 1)?;
        if magic != format!("{MAGIC}\n").as_bytes() {
            return Err(bad("not a scribblegate checkpoint (bad magic)"));
        }
        let config_text = r.text()?;
        let config = ExperimentConfig::parse_str(&config_text)?;
        let mut state = BTreeMap::new();
        for line in r.text()?.lines() {
            if let Some((k, v)) = line.split_once('=') {
                state.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor::new(&shape, data)));
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Self { config, state, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("text section is not UTF-8"))
    }
}

fn push_store(out: &mut Vec<(String, Tensor)>, prefix: &str, store: &ParamStore) {
    for (name, t) in store.named_params() {
        out.push((format!("{prefix}/{name}"), t.clone()));
    }
    for (name, t) in store.named_buffers() {
        out.push((format!("{prefix}/buffer/{name}"), t.clone()));
    }
}

fn push_adam(out: &mut Vec<(String, Tensor)>, prefix: &str, store: &ParamStore, adam: &Adam) {
    for (i, (name, _)) in store.named_params().enumerate() {
        out.push((format!("adam/{prefix}/m/{name}"), adam.first[i].clone()));
        out.push((format!("adam/{prefix}/v/{name}"), adam.second[i].clone()));
    }
}

fn restore_store(ckpt: &Checkpoint, prefix: &str, store: &mut ParamStore) -> Result<()> {
    let names: Vec<String> = store.named_params().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let key = format!("{prefix}/{name}");
        let t = ckpt.tensor(&key).ok_or_else(|| bad(format!("missing tensor `{key}`")))?;
        let id = store.param_id(&name).expect("name from the same store");
        if t.shape() != store.get(id).shape() {
            return Err(bad(format!("`{key}` has shape {:?}, expected {:?}", t.shape(), store.get(id).shape())));
        }
        *store.get_mut(id) = t.clone();
    }
    let names: Vec<String> = store.named_buffers().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let key = format!("{prefix}/buffer/{name}");
        let t = ckpt.tensor(&key).ok_or_else(|| bad(format!("missing tensor `{key}`")))?;
        let id = store.buffer_id(&name).expect("name from the same store");
        if t.shape() != store.buffer(id).shape() {
            return Err(bad(format!("`{key}` has the wrong shape")));
        }
        *store.buffer_mut(id) = t.clone();
    }
    Ok(())
}

fn restore_adam(ckpt: &Checkpoint, prefix: &str, store: &ParamStore, adam: &mut Adam, step: u64) -> Result<()> {
    for (i, (name, _)) in store.named_params().enumerate() {
        for (kind, slot) in [("m", &mut adam.first[i]), ("v", &mut adam.second[i])] {
            let key = format!("adam/{prefix}/{kind}/{name}");
            *slot = ckpt.tensor(&key).ok_or_else(|| bad(format!("missing tensor `{key}`")))?.clone();
        }
    }
    adam.step = step;
    Ok(())
}

fn rng_state(rng: &ChaCha8Rng) -> String {
    let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    format!("{seed}:{}:{}", rng.get_stream(), rng.get_word_pos())
}

fn parse_rng(s: &str) -> Result<ChaCha8Rng> {
    let parts: Vec<&str> = s.split(':').collect();
    let [seed_hex, stream, pos] = parts[..] else {
        return Err(bad(format!("bad rng state `{s}`")));
    };
    if seed_hex.len() != 64 {
        return Err(bad("rng seed must be 32 bytes"));
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| bad("rng seed is not hex"))?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream.parse().map_err(|_| bad("bad rng stream"))?);
    rng.set_word_pos(pos.parse().map_err(|_| bad("bad rng position"))?);
    Ok(rng)
}

/// Captures the whole training state.
pub fn from_state(cfg: &ExperimentConfig, state: &TrainState) -> Checkpoint {
    let mut tensors = Vec::new();
    push_store(&mut tensors, "seg", state.segmentor.params());
    push_adam(&mut tensors, "seg", state.segmentor.params(), &state.seg_adam);
    let mut meta = BTreeMap::new();
    if let (Some(d), Some(a)) = (&state.discriminator, &state.disc_adam) {
        push_store(&mut tensors, "disc", d.params());
        push_adam(&mut tensors, "disc", d.params(), a);
        meta.insert("disc_adam_step".into(), a.step.to_string());
        meta.insert("input_height".into(), d.config().input_size.0.to_string());
        meta.insert("input_width".into(), d.config().input_size.1.to_string());
    }
    meta.insert("epoch".into(), state.epoch.to_string());
    meta.insert("step".into(), state.step.to_string());
    meta.insert("seg_adam_step".into(), state.seg_adam.step.to_string());
    // bit pattern keeps -inf and exact values
    meta.insert("best_val_metric_bits".into(), state.best_val_metric.to_bits().to_string());
    meta.insert("best_epoch".into(), state.best_epoch.map_or("none".into(), |e| e.to_string()));
    meta.insert("epochs_since_improvement".into(), state.epochs_since_improvement.to_string());
    meta.insert("data_rng".into(), rng_state(&state.data_rng));
    meta.insert("noise_rng".into(), rng_state(&state.noise_rng));
    meta.insert("init_seed".into(), state.init_seed.to_string());
    Checkpoint { config: cfg.clone(), state: meta, tensors }
}

pub fn save_state(path: &Path, cfg: &ExperimentConfig, state: &TrainState) -> Result<()> {
    from_state(cfg, state).write(path)
}

/// Rebuilds the segmentor stored in a checkpoint.
pub fn load_segmentor(ckpt: &Checkpoint) -> Result<Segmentor> {
    let mut seg = Segmentor::new(ckpt.config.segmentor_config(), ckpt.config.init_seed)?;
    restore_store(ckpt, "seg", seg.params_mut())?;
    Ok(seg)
}

/// Rebuilds the full training state for resuming.
pub fn restore_state(ckpt: &Checkpoint) -> Result<TrainState> {
    let cfg = &ckpt.config;
    let input_size = if cfg.flags.use_discriminator {
        (ckpt.state_value("input_height")?, ckpt.state_value("input_width")?)
    } else {
        (cfg.image_size.max(1 << cfg.depths), cfg.image_size.max(1 << cfg.depths))
    };
    let mut state = TrainState::new(cfg, input_size)?;
    restore_store(ckpt, "seg", state.segmentor.params_mut())?;
    let seg_step = ckpt.state_value("seg_adam_step")?;
    restore_adam(ckpt, "seg", state.segmentor.params(), &mut state.seg_adam, seg_step)?;
    if let (Some(d), Some(a)) = (state.discriminator.as_mut(), state.disc_adam.as_mut()) {
        restore_store(ckpt, "disc", d.params_mut())?;
        let step = ckpt.state_value("disc_adam_step")?;
        restore_adam(ckpt, "disc", d.params(), a, step)?;
    }
    state.epoch = ckpt.state_value("epoch")?;
    state.step = ckpt.state_value("step")?;
    state.best_val_metric = f64::from_bits(ckpt.state_value("best_val_metric_bits")?);
    let best: String = ckpt.state_value("best_epoch")?;
    state.best_epoch = if best == "none" { None } else { Some(best.parse().map_err(|_| bad("bad best_epoch"))?) };
    state.epochs_since_improvement = ckpt.state_value("epochs_since_improvement")?;
    state.data_rng = parse_rng(&ckpt.state_value::<String>("data_rng")?)?;
    state.noise_rng = parse_rng(&ckpt.state_value::<String>("noise_rng")?)?;
    state.init_seed = ckpt.state_value("init_seed")?;
    Ok(state)
}

/// The discriminator of a checkpoint, if it has one.
pub fn load_discriminator(ckpt: &Checkpoint) -> Result<Option<Discriminator>> {
    Ok(restore_state(ckpt)?.discriminator)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            image_size: 16,
            num_classes: 3,
            encoder_filters: vec![2, 2, 2, 2, 2],
            disc_filters: vec![2, 2, 2, 2, 2],
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_restores_everything() {
        let cfg = small_cfg();
        let mut state = TrainState::new(&cfg, (16, 16)).unwrap();
        state.epoch = 7;
        state.best_val_metric = 0.25;
        state.best_epoch = Some(3);
        let _: u64 = rand::Rng::random(&mut state.noise_rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_state(&path, &cfg, &state).unwrap();
        let ckpt = Checkpoint::read(&path).unwrap();
        assert_eq!(ckpt, from_state(&cfg, &state));
        let back = restore_state(&ckpt).unwrap();
        assert_eq!(back.epoch, 7);
        assert_eq!(back.best_epoch, Some(3));
        assert_eq!(back.noise_rng, state.noise_rng);
        assert_eq!(back.segmentor.params().values(), state.segmentor.params().values());
        assert!(ckpt.tensors.iter().any(|(n, _)| n.starts_with("disc/")));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"NOT_A_CHECKPOINT_AT_ALL\n").unwrap();
        assert!(matches!(Checkpoint::read(&path), Err(Error::Checkpoint(_))));
        let cfg = small_cfg();
        save_state(&path, &cfg, &TrainState::new(&cfg, (16, 16)).unwrap()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Checkpoint::read(&path), Err(Error::Checkpoint(_))));
    }
}
