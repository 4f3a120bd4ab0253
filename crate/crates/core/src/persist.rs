//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/params/<network>.l<i>.{weight,bias}.bin
//! <dir>/optim/<param>.{m,v}.bin        (optional)
//! ```
//!
//! Each blob is an 8-byte little-endian element count followed by the
//! elements as little-endian `f32`. The manifest records every blob's byte
//! length and SHA-256, plus everything needed to rebuild the model.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Activation, AdamW, Moments};
use crate::error::{GateError, Result};
use crate::model::{AnyModel, GateModel, Model, ModelConfig, ModelKind, MtlModel, SingleModel};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkEntry {
    pub name: String,
    pub frozen: bool,
    pub layers: Vec<LayerShape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub stage: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Blobs named `<param>.m` and `<param>.v`.
    pub moments: Vec<BlobEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub config: ModelConfig,
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    pub networks: Vec<NetworkEntry>,
    pub params: Vec<BlobEntry>,
    pub lineage: Vec<LineageEntry>,
    pub dataset_metadata_hash: Option<String>,
    pub optimizer: Option<OptimizerEntry>,
}

/// Provenance stored alongside the parameters.
#[derive(Debug, Clone, Default)]
pub struct CheckpointInfo {
    pub lineage: Vec<LineageEntry>,
    pub dataset_metadata_hash: Option<String>,
}

/// Restored optimizer state, keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step_count: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn capture(opt: &AdamW, model: &dyn Model) -> Self {
        let moments = model
            .named_params()
            .into_iter()
            .filter_map(|(n, t)| opt.moments(t).map(|m| (n, m.clone())))
            .collect();
        OptimizerState {
            step_count: opt.step_count(),
            moments,
        }
    }

    /// Installs the moments into `opt` for the matching tensors of `model`.
    pub fn restore(&self, opt: &mut AdamW, model: &dyn Model) -> Result<()> {
        let params: BTreeMap<String, _> = model.named_params().into_iter().collect();
        for (name, m) in &self.moments {
            let t = params
                .get(name)
                .ok_or_else(|| GateError::Checkpoint(format!("optimizer state for unknown parameter `{name}`")))?;
            opt.set_moments(t, m.clone())?;
        }
        opt.set_step_count(self.step_count);
        Ok(())
    }
}

pub fn encode_blob(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * values.len());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_blob(bytes: &[u8], name: &str) -> Result<Vec<f64>> {
    let bad = || GateError::Checkpoint(format!("malformed blob for `{name}`"));
    let head: [u8; 8] = bytes.get(..8).ok_or_else(bad)?.try_into().expect("8 bytes");
    let n = u64::from_le_bytes(head) as usize;
    let body = &bytes[8..];
    if body.len() != n.checked_mul(4).ok_or_else(bad)? {
        return Err(bad());
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_blob(root: &Path, file: &str, name: &str, shape: Vec<usize>, values: &[f64]) -> Result<BlobEntry> {
    let bytes = encode_blob(values);
    let path = root.join(file);
    fs::write(&path, &bytes).map_err(|e| GateError::io(&path, e))?;
    Ok(BlobEntry {
        name: name.to_string(),
        file: file.to_string(),
        shape,
        bytes: bytes.len() as u64,
        sha256: sha256_hex(&bytes),
    })
}

fn read_blob(root: &Path, entry: &BlobEntry) -> Result<Vec<f64>> {
    let path = root.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => GateError::Checkpoint(format!("missing blob `{}`", entry.file)),
        _ => GateError::io(&path, e),
    })?;
    if bytes.len() as u64 != entry.bytes || sha256_hex(&bytes) != entry.sha256 {
        return Err(GateError::Checksum(entry.name.clone()));
    }
    let values = decode_blob(&bytes, &entry.name)?;
    if values.len() != entry.shape.iter().product::<usize>() {
        return Err(GateError::Checkpoint(format!("blob `{}` disagrees with its shape", entry.name)));
    }
    Ok(values)
}

fn registry(model: &AnyModel) -> (Vec<String>, Vec<String>) {
    match model {
        AnyModel::Gate(m) => (m.source_tasks().to_vec(), m.target_tasks().to_vec()),
        AnyModel::Mtl(m) => (m.source_tasks().to_vec(), m.target_tasks().to_vec()),
        AnyModel::Single(m) => (vec![m.task_id().to_string()], Vec::new()),
    }
}

/// Writes `model` (and optionally optimizer state) to `dir`. The directory
/// is assembled next to its final location and renamed into place; an
/// existing checkpoint at `dir` is replaced.
pub fn save(model: &AnyModel, optimizer: Option<(&AdamW, &OptimizerState)>, info: &CheckpointInfo, dir: &Path) -> Result<Manifest> {
    let m = model.as_model();
    for (name, t) in m.named_params() {
        if t.values().iter().any(|v| !v.is_finite()) {
            return Err(GateError::NonFinite(format!("parameter `{name}`")));
        }
    }
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| GateError::io(parent, e))?;
    let file_name = dir
        .file_name()
        .ok_or_else(|| GateError::Checkpoint(format!("invalid checkpoint path {}", dir.display())))?;
    let tmp = parent.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| GateError::io(&tmp, e))?;
    }
    fs::create_dir_all(tmp.join("params")).map_err(|e| GateError::io(&tmp, e))?;

    let result = (|| {
        let mut params = Vec::new();
        for (name, t) in m.named_params() {
            params.push(write_blob(&tmp, &format!("params/{name}.bin"), &name, t.shape().to_vec(), t.values())?);
        }
        let networks = m
            .networks()
            .into_iter()
            .map(|(name, mlp)| NetworkEntry {
                name,
                frozen: mlp.is_frozen(),
                layers: mlp
                    .layers()
                    .iter()
                    .map(|l| LayerShape {
                        input: l.input_dim(),
                        output: l.output_dim(),
                        activation: l.activation,
                        dropout: l.dropout_rate,
                    })
                    .collect(),
            })
            .collect();
        let optimizer = match optimizer {
            None => None,
            Some((opt, state)) => {
                fs::create_dir_all(tmp.join("optim")).map_err(|e| GateError::io(&tmp, e))?;
                let mut moments = Vec::new();
                for (name, mo) in &state.moments {
                    let n = mo.m.len();
                    moments.push(write_blob(&tmp, &format!("optim/{name}.m.bin"), &format!("{name}.m"), vec![n], &mo.m)?);
                    moments.push(write_blob(&tmp, &format!("optim/{name}.v.bin"), &format!("{name}.v"), vec![n], &mo.v)?);
                }
                let c = opt.config;
                Some(OptimizerEntry {
                    step_count: state.step_count,
                    learning_rate: c.learning_rate,
                    beta1: c.beta1,
                    beta2: c.beta2,
                    epsilon: c.epsilon,
                    weight_decay: c.weight_decay,
                    moments,
                })
            }
        };
        let (sources, targets) = registry(model);
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            model_kind: m.kind(),
            config: m.config().clone(),
            sources,
            targets,
            networks,
            params,
            lineage: info.lineage.clone(),
            dataset_metadata_hash: info.dataset_metadata_hash.clone(),
            optimizer,
        };
        let path = tmp.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| GateError::io(&path, e))?;
        Ok(manifest)
    })();
    let manifest = match result {
        Ok(m) => m,
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            return Err(e);
        }
    };

    if dir.exists() {
        let replaceable = dir.join(MANIFEST).exists()
            || fs::read_dir(dir).map_err(|e| GateError::io(dir, e))?.next().is_none();
        if !replaceable {
            let _ = fs::remove_dir_all(&tmp);
            return Err(GateError::Checkpoint(format!(
                "{} exists and is not a checkpoint directory",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| GateError::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| GateError::io(dir, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(GateError::Checkpoint(format!("no {MANIFEST} in {}", dir.display())));
    }
    let text = fs::read_to_string(&path).map_err(|e| GateError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(GateError::Checkpoint(format!(
            "unsupported checkpoint format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

pub struct Loaded {
    pub model: AnyModel,
    pub manifest: Manifest,
    pub optimizer: Option<OptimizerState>,
}

/// Rebuilds the model stored in `dir`.
pub fn load(dir: &Path) -> Result<Loaded> {
    let manifest = read_manifest(dir)?;
    let (s, t, c) = (manifest.sources.clone(), manifest.targets.clone(), manifest.config.clone());
    let mut model: AnyModel = match manifest.model_kind {
        ModelKind::Gate => GateModel::with_registry(c, s, t)?.into(),
        ModelKind::Mtl => MtlModel::with_registry(c, s, t)?.into(),
        ModelKind::Single => {
            let task = s
                .first()
                .ok_or_else(|| GateError::Checkpoint("single-task checkpoint without a task".into()))?;
            SingleModel::new(c, task, 0)?.into()
        }
    };
    let m = model.as_model_mut();

    let expected: Vec<NetworkEntry> = m
        .networks()
        .into_iter()
        .map(|(name, mlp)| NetworkEntry {
            name,
            frozen: false,
            layers: mlp
                .layers()
                .iter()
                .map(|l| LayerShape {
                    input: l.input_dim(),
                    output: l.output_dim(),
                    activation: l.activation,
                    dropout: l.dropout_rate,
                })
                .collect(),
        })
        .collect();
    let stored: BTreeMap<&str, &NetworkEntry> = manifest.networks.iter().map(|n| (n.name.as_str(), n)).collect();
    if stored.len() != expected.len() {
        return Err(GateError::Checkpoint("network list disagrees with the task registry".into()));
    }
    for e in &expected {
        let s = stored
            .get(e.name.as_str())
            .ok_or_else(|| GateError::Checkpoint(format!("network `{}` missing from manifest", e.name)))?;
        if s.layers != e.layers {
            return Err(GateError::Checkpoint(format!("network `{}` shape disagrees with the config", e.name)));
        }
    }

    let blobs: BTreeMap<&str, &BlobEntry> = manifest.params.iter().map(|b| (b.name.as_str(), b)).collect();
    for (net, mlp) in m.networks_mut() {
        for (pname, t) in mlp.named_params_mut() {
            let name = format!("{net}.{pname}");
            let entry = blobs
                .get(name.as_str())
                .ok_or_else(|| GateError::Checkpoint(format!("missing blob entry for `{name}`")))?;
            if entry.shape != t.shape() {
                return Err(GateError::Checkpoint(format!("blob `{name}` has shape {:?}", entry.shape)));
            }
            let values = read_blob(dir, entry)?;
            t.values_mut().copy_from_slice(&values);
        }
        mlp.set_frozen(stored[net.as_str()].frozen);
    }

    let optimizer = match &manifest.optimizer {
        None => None,
        Some(o) => {
            let mut parts: BTreeMap<String, (Option<Vec<f64>>, Option<Vec<f64>>)> = BTreeMap::new();
            for b in &o.moments {
                let values = read_blob(dir, b)?;
                if let Some(p) = b.name.strip_suffix(".m") {
                    parts.entry(p.to_string()).or_default().0 = Some(values);
                } else if let Some(p) = b.name.strip_suffix(".v") {
                    parts.entry(p.to_string()).or_default().1 = Some(values);
                } else {
                    return Err(GateError::Checkpoint(format!("unexpected optimizer blob `{}`", b.name)));
                }
            }
            let moments = parts
                .into_iter()
                .map(|(name, (m, v))| match (m, v) {
                    (Some(m), Some(v)) => Ok((name, Moments { m, v })),
                    _ => Err(GateError::Checkpoint(format!("incomplete optimizer moments for `{name}`"))),
                })
                .collect::<Result<_>>()?;
            Some(OptimizerState {
                step_count: o.step_count,
                moments,
            })
        }
    };
    Ok(Loaded {
        model,
        manifest,
        optimizer,
    })
}

pub fn load_gate(dir: &Path) -> Result<GateModel> {
    load(dir)?.model.into_gate()
}

pub fn load_mtl(dir: &Path) -> Result<MtlModel> {
    load(dir)?.model.into_mtl()
}

/// Writes pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| GateError::io(parent, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| GateError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| GateError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Files of a checkpoint with their SHA-256, for comparisons.
pub fn blob_checksums(dir: &Path) -> Result<BTreeMap<PathBuf, String>> {
    let manifest = read_manifest(dir)?;
    let mut out = BTreeMap::new();
    for b in manifest.params.iter().chain(manifest.optimizer.iter().flat_map(|o| &o.moments)) {
        let path = dir.join(&b.file);
        let bytes = fs::read(&path).map_err(|e| GateError::io(&path, e))?;
        out.insert(PathBuf::from(&b.file), sha256_hex(&bytes));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{AdamWConfig, GateRng, Mode, Tensor};
    use rand::{Rng, SeedableRng};

    fn config() -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            backbone_hidden: vec![5],
            embedding_dim: 4,
            encoder_hidden: vec![4],
            latent_dim: 3,
            transfer_hidden: vec![3],
            ..ModelConfig::default()
        }
    }

    fn gate() -> GateModel {
        let mut m = GateModel::new(config(), &["a".into(), "b".into()], 4).unwrap();
        m.add_target_unit("t", 9).unwrap();
        m
    }

    fn probe() -> Tensor {
        let mut rng = GateRng::seed_from_u64(1);
        Tensor::matrix(16, 3, (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn blob_format() {
        let b = encode_blob(&[1.0, -2.5]);
        assert_eq!(&b[..8], &2u64.to_le_bytes());
        assert_eq!(&b[8..12], &1.0f32.to_le_bytes());
        assert_eq!(decode_blob(&b, "x").unwrap(), vec![1.0, -2.5]);
        assert!(decode_blob(&b[..10], "x").is_err());
    }

    #[test]
    fn round_trip_is_stable_and_evaluation_equivalent() {
        let dir = tempfile::tempdir().unwrap();
        let m = gate();
        let a = dir.path().join("a");
        save(&m.clone().into(), None, &CheckpointInfo::default(), &a).unwrap();
        let loaded = load(&a).unwrap();
        let back = loaded.model.clone().into_gate().unwrap();
        assert_eq!(back.source_tasks(), m.source_tasks());
        assert_eq!(back.target_tasks(), m.target_tasks());
        assert_eq!(back.freeze_flags(), m.freeze_flags());
        let mut r = GateRng::seed_from_u64(0);
        for task in ["a", "b", "t"] {
            let x = m.gate_forward(task, &probe(), Mode::Eval, &mut r).unwrap();
            let y = back.gate_forward(task, &probe(), Mode::Eval, &mut r).unwrap();
            let delta = x
                .prediction
                .values()
                .iter()
                .zip(y.prediction.values())
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            assert!(delta < 1e-5, "{delta}");
        }
        let b = dir.path().join("b");
        save(&loaded.model, None, &CheckpointInfo::default(), &b).unwrap();
        assert_eq!(blob_checksums(&a).unwrap(), blob_checksums(&b).unwrap());
        assert_eq!(fs::read(a.join(MANIFEST)).unwrap(), fs::read(b.join(MANIFEST)).unwrap());
    }

    #[test]
    fn tampering_names_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c");
        save(&gate().into(), None, &CheckpointInfo::default(), &p).unwrap();
        let blob = p.join("params/unit.b.head.l0.weight.bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[9] ^= 0x40;
        fs::write(&blob, bytes).unwrap();
        match load(&p) {
            Err(GateError::Checksum(name)) => assert_eq!(name, "unit.b.head.l0.weight"),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn kind_mismatch_and_missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mtl");
        let mtl = MtlModel::new(config(), &["a".into()], 1).unwrap();
        save(&mtl.into(), None, &CheckpointInfo::default(), &p).unwrap();
        assert!(matches!(load_gate(&p), Err(GateError::KindMismatch { .. })));
        let empty = dir.path().join("empty");
        fs::create_dir(&empty).unwrap();
        assert!(matches!(load(&empty), Err(GateError::Checkpoint(_))));
    }

    #[test]
    fn refuses_non_finite_and_foreign_directories() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = gate();
        m.backbone_mut().layers_mut()[0].bias.values_mut()[0] = f64::NAN;
        assert!(matches!(
            save(&m.into(), None, &CheckpointInfo::default(), &dir.path().join("x")),
            Err(GateError::NonFinite(_))
        ));
        let foreign = dir.path().join("f");
        fs::create_dir(&foreign).unwrap();
        fs::write(foreign.join("keep.txt"), "x").unwrap();
        assert!(save(&gate().into(), None, &CheckpointInfo::default(), &foreign).is_err());
        assert!(foreign.join("keep.txt").exists());
    }

    #[test]
    fn optimizer_state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = SingleModel::new(config(), "t", 2).unwrap();
        for (_, mlp) in m.networks_mut() {
            for (_, t) in mlp.named_params_mut() {
                let g = vec![0.5; t.len()];
                t.accumulate_grad(&g).unwrap();
            }
        }
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        {
            let mut ps: Vec<&mut Tensor> = m
                .networks_mut()
                .into_iter()
                .flat_map(|(_, mlp)| mlp.named_params_mut().into_iter().map(|(_, t)| t))
                .collect();
            opt.step(&mut ps).unwrap();
        }
        let state = OptimizerState::capture(&opt, &m);
        let p = dir.path().join("s");
        save(&m.clone().into(), Some((&opt, &state)), &CheckpointInfo::default(), &p).unwrap();
        let loaded = load(&p).unwrap();
        let restored = loaded.optimizer.unwrap();
        assert_eq!(restored.step_count, 1);
        assert_eq!(restored.moments.len(), state.moments.len());
        let mut fresh = AdamW::new(AdamWConfig::default()).unwrap();
        restored.restore(&mut fresh, loaded.model.as_model()).unwrap();
        assert_eq!(fresh.step_count(), 1);
    }
}
