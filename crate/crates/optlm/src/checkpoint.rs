//! Single-file checkpoints: an 8-byte magic, a JSON manifest describing every
//! tensor section, the raw little-endian payload, and a SHA-256 of the payload
//! at the end. Round-trips are bit-exact, including optimizer moments and the
//! RNG stream position, so a resumed run replays the original exactly.

use crate::backbone::{BackboneConfig, BackboneParams};
use crate::error::{Error, Result};
use crate::objectives::KlController;
use crate::plugin::{OptionConfig, PluginParams};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;
use crate::train::{Adam, TrainConfig, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"OPTLMCK\n";

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    section: String,
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    offset: u64,
    byte_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainMeta {
    config: TrainConfig,
    step: usize,
    alpha: f64,
    /// ChaCha word position, decimal u128 (JSON numbers cannot hold it).
    rng_word_pos: String,
    adam_t: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: Dtype,
    backbone_config: BackboneConfig,
    option_config: Option<OptionConfig>,
    train: Option<TrainMeta>,
    params: Vec<ParamEntry>,
}

struct Writer {
    params: Vec<ParamEntry>,
    payload: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { params: Vec::new(), payload: Vec::new() }
    }

    fn push<F: Scalar>(&mut self, section: &str, name: &str, t: &Tensor<F>) {
        let offset = self.payload.len() as u64;
        for &v in &t.data {
            v.write_le(&mut self.payload);
        }
        self.params.push(ParamEntry {
            section: section.into(),
            name: name.into(),
            shape: t.shape.clone(),
            dtype: F::DTYPE,
            offset,
            byte_len: self.payload.len() as u64 - offset,
        });
    }
}

fn write_file(path: &Path, manifest: &Manifest, payload: &[u8]) -> Result<()> {
    let manifest_bytes = serde_json::to_vec(manifest)?;
    let mut out = Vec::with_capacity(8 + 8 + manifest_bytes.len() + payload.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.extend_from_slice(payload);
    let digest = Sha256::digest(payload);
    out.extend_from_slice(&digest);
    std::fs::write(path, out)?;
    Ok(())
}

fn read_file(path: &Path) -> Result<(Manifest, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16 + mlen;
    if bytes.len() < payload_start + 32 {
        return Err(Error::Checkpoint(format!(
            "{} is truncated",
            path.display()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::Checkpoint(format!("bad checkpoint manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {} is not supported (this build reads version {})",
            manifest.format_version, FORMAT_VERSION
        )));
    }
    let payload = &bytes[payload_start..bytes.len() - 32];
    let stored = &bytes[bytes.len() - 32..];
    let digest = Sha256::digest(payload);
    if digest.as_slice() != stored {
        return Err(Error::Checkpoint(format!(
            "{}: payload checksum mismatch (file truncated or corrupted)",
            path.display()
        )));
    }
    Ok((manifest, payload.to_vec()))
}

fn read_tensor<F: Scalar>(entry: &ParamEntry, payload: &[u8]) -> Result<Tensor<F>> {
    if entry.dtype != F::DTYPE {
        return Err(Error::Checkpoint(format!(
            "section {}.{} stored as {:?}, requested {:?}",
            entry.section, entry.name, entry.dtype, F::DTYPE
        )));
    }
    let width = match F::DTYPE {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let numel: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let end = start + entry.byte_len as usize;
    if entry.byte_len as usize != numel * width || end > payload.len() {
        return Err(Error::Checkpoint(format!(
            "section {}.{} has inconsistent extent",
            entry.section, entry.name
        )));
    }
    let data = payload[start..end].chunks_exact(width).map(F::read_le).collect();
    Tensor::new(entry.shape.clone(), data)
}

/// Fill the named tensors of `dest` from one section, checking that every
/// expected name is present with the expected shape.
fn fill_section<F: Scalar>(
    section: &str,
    manifest: &Manifest,
    payload: &[u8],
    dest: Vec<(String, &mut Tensor<F>)>,
) -> Result<()> {
    for (name, t) in dest {
        let entry = manifest
            .params
            .iter()
            .find(|e| e.section == section && e.name == name)
            .ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing {section}.{name}"))
            })?;
        if entry.shape != t.shape {
            return Err(Error::Checkpoint(format!(
                "{section}.{name} has shape {:?}, expected {:?}",
                entry.shape, t.shape
            )));
        }
        *t = read_tensor(entry, payload)?;
    }
    Ok(())
}

pub fn save_backbone<F: Scalar>(path: &Path, backbone: &BackboneParams<F>) -> Result<()> {
    let mut w = Writer::new();
    for (name, t) in backbone.named_tensors() {
        w.push("backbone", &name, t);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: F::DTYPE,
        backbone_config: backbone.config.clone(),
        option_config: None,
        train: None,
        params: w.params,
    };
    write_file(path, &manifest, &w.payload)
}

pub fn load_backbone<F: Scalar>(path: &Path) -> Result<BackboneParams<F>> {
    let (manifest, payload) = read_file(path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut backbone = BackboneParams::<F>::init(&manifest.backbone_config, &mut rng)?;
    fill_section("backbone", &manifest, &payload, backbone.named_tensors_mut())?;
    Ok(backbone)
}

pub fn save_train_state<F: Scalar>(path: &Path, state: &TrainState<F>) -> Result<()> {
    let mut w = Writer::new();
    for (name, t) in state.backbone.named_tensors() {
        w.push("backbone", &name, t);
    }
    for (name, t) in state.plugin.named_tensors() {
        w.push("plugin", &name, t);
    }
    for (i, (name, t)) in state.plugin.named_tensors().iter().enumerate() {
        let m = Tensor::new(t.shape.clone(), state.adam.m[i].clone())?;
        let v = Tensor::new(t.shape.clone(), state.adam.v[i].clone())?;
        w.push("adam_m", name, &m);
        w.push("adam_v", name, &v);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: F::DTYPE,
        backbone_config: state.backbone.config.clone(),
        option_config: Some(state.plugin.config.clone()),
        train: Some(TrainMeta {
            config: state.config.clone(),
            step: state.step,
            alpha: state.controller.alpha,
            rng_word_pos: state.rng.get_word_pos().to_string(),
            adam_t: state.adam.t,
        }),
        params: w.params,
    };
    write_file(path, &manifest, &w.payload)
}

/// Load backbone + plug-in parameters for inference or evaluation.
pub fn load_model<F: Scalar>(
    path: &Path,
) -> Result<(BackboneParams<F>, Option<PluginParams<F>>)> {
    let (manifest, payload) = read_file(path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut backbone = BackboneParams::<F>::init(&manifest.backbone_config, &mut rng)?;
    fill_section("backbone", &manifest, &payload, backbone.named_tensors_mut())?;
    let plugin = match &manifest.option_config {
        None => None,
        Some(oc) => {
            let mut plugin =
                PluginParams::<F>::init(oc, manifest.backbone_config.hidden_dim, &mut rng)?;
            fill_section("plugin", &manifest, &payload, plugin.named_tensors_mut())?;
            Some(plugin)
        }
    };
    Ok((backbone, plugin))
}

/// Restore a full training state; the returned state continues the original
/// run bit-for-bit.
pub fn load_train_state<F: Scalar>(path: &Path) -> Result<TrainState<F>> {
    let (manifest, payload) = read_file(path)?;
    let meta = manifest
        .train
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint holds no training state".into()))?;
    let oc = manifest
        .option_config
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint holds no plug-in".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut backbone = BackboneParams::<F>::init(&manifest.backbone_config, &mut rng)?;
    fill_section("backbone", &manifest, &payload, backbone.named_tensors_mut())?;
    let mut plugin = PluginParams::<F>::init(oc, manifest.backbone_config.hidden_dim, &mut rng)?;
    fill_section("plugin", &manifest, &payload, plugin.named_tensors_mut())?;

    let mut state = TrainState::new(meta.config.clone(), backbone, plugin)?;
    let names: Vec<String> =
        state.plugin.named_tensors().iter().map(|(n, _)| n.clone()).collect();
    let mut adam = Adam::new(
        state.plugin.named_tensors().iter().map(|(_, t)| t.numel()).collect(),
        meta.config.learning_rate,
    );
    adam.t = meta.adam_t;
    for (i, name) in names.iter().enumerate() {
        for (section, buf) in [("adam_m", &mut adam.m[i]), ("adam_v", &mut adam.v[i])] {
            let entry = manifest
                .params
                .iter()
                .find(|e| e.section == section && &e.name == name)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("checkpoint is missing {section}.{name}"))
                })?;
            let t: Tensor<f64> = read_tensor(entry, &payload)?;
            if t.numel() != buf.len() {
                return Err(Error::Checkpoint(format!(
                    "{section}.{name} has inconsistent extent"
                )));
            }
            *buf = t.data;
        }
    }
    state.adam = adam;
    state.controller = KlController::from_state(meta.config.kl, meta.alpha)?;
    let pos: u128 = meta
        .rng_word_pos
        .parse()
        .map_err(|_| Error::Checkpoint("bad RNG position in checkpoint".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(meta.config.seed);
    rng.set_word_pos(pos);
    state.rng = rng;
    state.step = meta.step;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::GrammarSpec;
    use crate::plugin::Estimator;
    use crate::train::precompute_features;

    fn tiny_setup(dir: &Path) -> (TrainState<f32>, crate::train::FrozenFeatures<f32>) {
        let spec: GrammarSpec = serde_json::from_value(serde_json::json!({
            "vocab_size": 16,
            "slots": [{"fillers": [[4], [5], [6]]}],
            "templates": [{"items": [
                {"lit": [0, 2]}, {"slot": 0}, {"lit": [3]}
            ]}]
        }))
        .unwrap();
        spec.validate().unwrap();
        let corpus = spec.generate_corpus(12, 1).unwrap();
        let bc = BackboneConfig {
            vocab_size: 16,
            hidden_dim: 16,
            n_layers: 1,
            n_heads: 2,
            context_len: 8,
            tied_embeddings: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let backbone = BackboneParams::<f32>::init(&bc, &mut rng).unwrap();
        let oc = OptionConfig {
            k: 4,
            encoder_hidden: 8,
            decoder_hidden: 8,
            policy_hidden: 8,
            option_embed_dim: 4,
            estimator: Estimator::StraightThroughGumbel,
            gumbel_temperature: 1.0,
        };
        let plugin = PluginParams::init(&oc, bc.hidden_dim, &mut rng).unwrap();
        let config = TrainConfig {
            steps: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            grad_clip: 1.0,
            seed: 99,
            kl: Default::default(),
            checkpoint_every: 0,
        };
        let state = TrainState::new(config, backbone, plugin).unwrap();
        let features = precompute_features(&state.backbone, &corpus).unwrap();
        let _ = dir;
        (state, features)
    }

    #[test]
    fn backbone_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (state, _) = tiny_setup(dir.path());
        let path = dir.path().join("backbone.ckpt");
        save_backbone(&path, &state.backbone).unwrap();
        let loaded = load_backbone::<f32>(&path).unwrap();
        assert_eq!(loaded.config, state.backbone.config);
        for ((n1, a), (_, b)) in loaded.named_tensors().iter().zip(state.backbone.named_tensors())
        {
            assert_eq!(a.shape, b.shape, "{n1}");
            assert!(
                a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{n1} changed across the round trip"
            );
        }
    }

    #[test]
    fn resumed_training_replays_the_original_run() {
        let dir = tempfile::tempdir().unwrap();
        let (mut state, features) = tiny_setup(dir.path());
        let mut reference_reports = Vec::new();
        for _ in 0..3 {
            reference_reports.push(state.train_step(&features).unwrap());
        }
        let path = dir.path().join("mid.ckpt");
        save_train_state(&path, &state).unwrap();
        for _ in 0..3 {
            reference_reports.push(state.train_step(&features).unwrap());
        }

        let mut resumed = load_train_state::<f32>(&path).unwrap();
        assert_eq!(resumed.step, 3);
        let mut resumed_reports = Vec::new();
        for _ in 0..3 {
            resumed_reports.push(resumed.train_step(&features).unwrap());
        }
        for (a, b) in reference_reports[3..].iter().zip(&resumed_reports) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.ce.to_bits(), b.ce.to_bits());
            assert_eq!(a.kl.to_bits(), b.kl.to_bits());
            assert_eq!(a.policy.to_bits(), b.policy.to_bits());
            assert_eq!(a.alpha.to_bits(), b.alpha.to_bits());
        }
        for ((n, a), (_, b)) in
            resumed.plugin.named_tensors().iter().zip(state.plugin.named_tensors())
        {
            assert!(
                a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{n} diverged after resume"
            );
        }
    }

    #[test]
    fn corruption_and_version_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (state, _) = tiny_setup(dir.path());
        let path = dir.path().join("state.ckpt");
        save_train_state(&path, &state).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // truncation loses payload bytes -> checksum failure
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 40]).unwrap();
        let err = load_train_state::<f32>(&cut).unwrap_err().to_string();
        assert!(err.contains("checksum") || err.contains("truncated"), "{err}");

        // flipped payload byte -> checksum failure
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 100;
        flipped[mid] ^= 0xff;
        let flip = dir.path().join("flip.ckpt");
        std::fs::write(&flip, &flipped).unwrap();
        let err = load_train_state::<f32>(&flip).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");

        // unknown format version -> error naming both versions
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest_str = String::from_utf8(bytes[16..16 + mlen].to_vec()).unwrap();
        let bumped = manifest_str.replace("\"format_version\":1", "\"format_version\":9");
        assert_ne!(manifest_str, bumped);
        let mut rebuilt = Vec::new();
        rebuilt.extend_from_slice(&bytes[..8]);
        rebuilt.extend_from_slice(&(bumped.len() as u64).to_le_bytes());
        rebuilt.extend_from_slice(bumped.as_bytes());
        rebuilt.extend_from_slice(&bytes[16 + mlen..]);
        let vpath = dir.path().join("v9.ckpt");
        std::fs::write(&vpath, &rebuilt).unwrap();
        let err = load_train_state::<f32>(&vpath).unwrap_err().to_string();
        assert!(err.contains('9') && err.contains('1'), "{err}");

        // wrong dtype on load
        let err = load_train_state::<f64>(&path).unwrap_err().to_string();
        assert!(err.to_lowercase().contains("f32"), "{err}");

        // not a checkpoint at all
        let junk = dir.path().join("junk.ckpt");
        std::fs::write(&junk, b"hello world, definitely not a checkpoint").unwrap();
        assert!(load_model::<f32>(&junk).is_err());
    }
}
