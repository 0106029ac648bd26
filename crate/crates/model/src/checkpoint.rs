//! Checkpoint directories: `manifest.json` plus little-endian `f64` blobs for
//! parameters and optimizer moments.

use crate::multiagent::{MultiAgentConfig, MultiAgentModel};
use crate::nn::Params;
use crate::optim::{AdamW, MomentState};
use crate::{ModelConfig, ModelError, Result, SeamModel};
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";
const OPTIMIZER: &str = "optimizer.bin";
const CONSISTENCY_PREFIX: &str = "consistency.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    SingleAgent,
    MultiAgent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f64` elements into `params.bin`.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub frozen_prefixes: Vec<String>,
    pub steps: u64,
    /// `(name, len)`; `optimizer.bin` holds `m` then `v` for each in order.
    pub moments: Vec<(String, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub multi_agent: Option<MultiAgentConfig>,
    pub dtype: String,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: usize,
    pub params: Vec<ParamEntry>,
    pub optimizer: Option<OptimizerMeta>,
}

/// A loaded checkpoint.
pub struct Checkpoint {
    pub manifest: Manifest,
    values: Vec<f64>,
    pub optimizer: Option<AdamW>,
}

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io { path: path.display().to_string(), source }
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(ModelError::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

pub fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(ModelError::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(ModelError::Checkpoint(format!("{}: truncated blob of {} bytes", path.display(), bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect())
}

/// Writes a checkpoint. Existing files of the same names are replaced.
pub fn save(
    dir: &Path,
    model: &ModelConfig,
    multi_agent: Option<&MultiAgentConfig>,
    params: &[&Params],
    dtype: DType,
    step: usize,
    optimizer: Option<&AdamW>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut entries = Vec::new();
    let mut values = Vec::new();
    for ps in params {
        for (name, var) in ps.iter() {
            let v = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            entries.push(ParamEntry { name: name.clone(), shape: var.dims().to_vec(), offset: values.len() });
            values.extend(v);
        }
    }
    let opt_meta = match optimizer {
        Some(o) => {
            let mut blob = Vec::new();
            for m in &o.moments {
                blob.extend_from_slice(&m.m);
                blob.extend_from_slice(&m.v);
            }
            write_atomic(&dir.join(OPTIMIZER), &to_bytes(&blob))?;
            Some(OptimizerMeta {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                clip_norm: o.clip_norm,
                frozen_prefixes: o.frozen_prefixes.clone(),
                steps: o.steps,
                moments: o.moments.iter().map(|m| (m.name.clone(), m.m.len())).collect(),
            })
        }
        None => None,
    };
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: if multi_agent.is_some() { CheckpointKind::MultiAgent } else { CheckpointKind::SingleAgent },
        model: model.clone(),
        multi_agent: multi_agent.cloned(),
        dtype: dtype_name(dtype)?.into(),
        step,
        params: entries,
        optimizer: opt_meta,
    };
    write_atomic(&dir.join(PARAMS), &to_bytes(&values))?;
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    write_atomic(&dir.join(MANIFEST), &json)
}

pub fn save_model(dir: &Path, model: &SeamModel, step: usize, optimizer: Option<&AdamW>) -> Result<()> {
    save(dir, &model.cfg, None, &[&model.params], model.dtype, step, optimizer)
}

pub fn save_multi_agent(dir: &Path, model: &MultiAgentModel, step: usize, optimizer: Option<&AdamW>) -> Result<()> {
    let m = &model.marginal;
    save(dir, &m.cfg, Some(&model.cfg), &model.all_params(), m.dtype, step, optimizer)
}

impl Checkpoint {
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = std::fs::read(&mpath).map_err(|e| io_err(&mpath, e))?;
        let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", mpath.display())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let ppath = dir.join(PARAMS);
        let values = from_bytes(&ppath, &std::fs::read(&ppath).map_err(|e| io_err(&ppath, e))?)?;
        let needed: usize = manifest.params.iter().map(|p| p.offset + p.shape.iter().product::<usize>()).max().unwrap_or(0);
        if values.len() < needed {
            return Err(ModelError::Checkpoint(format!("{}: {} values, manifest needs {needed}", ppath.display(), values.len())));
        }
        let optimizer = match &manifest.optimizer {
            Some(meta) => {
                let opath = dir.join(OPTIMIZER);
                let blob = from_bytes(&opath, &std::fs::read(&opath).map_err(|e| io_err(&opath, e))?)?;
                let total: usize = meta.moments.iter().map(|(_, n)| 2 * n).sum();
                if blob.len() != total {
                    return Err(ModelError::Checkpoint(format!("{}: {} values, manifest needs {total}", opath.display(), blob.len())));
                }
                let mut off = 0;
                let moments = meta
                    .moments
                    .iter()
                    .map(|(name, n)| {
                        let m = blob[off..off + n].to_vec();
                        let v = blob[off + n..off + 2 * n].to_vec();
                        off += 2 * n;
                        MomentState { name: name.clone(), m, v }
                    })
                    .collect();
                Some(AdamW {
                    beta1: meta.beta1,
                    beta2: meta.beta2,
                    eps: meta.eps,
                    weight_decay: meta.weight_decay,
                    clip_norm: meta.clip_norm,
                    frozen_prefixes: meta.frozen_prefixes.clone(),
                    steps: meta.steps,
                    moments,
                })
            }
            None => None,
        };
        Ok(Self { manifest, values, optimizer })
    }

    pub fn dtype(&self) -> Result<DType> {
        parse_dtype(&self.manifest.dtype)
    }

    /// Copies stored values into `params`. Names under `optional_prefix` may be
    /// missing from the checkpoint and keep their current values; stored names
    /// under `ignored_prefix` without a counterpart are skipped. Every other
    /// difference is reported at once.
    pub fn apply(&self, params: &Params, optional_prefix: Option<&str>, ignored_prefix: Option<&str>) -> Result<()> {
        let has = |p: Option<&str>, name: &str| p.is_some_and(|p| name.starts_with(p));
        let mut problems = Vec::new();
        for (name, var) in params.iter() {
            match self.manifest.params.iter().find(|e| &e.name == name) {
                Some(e) if e.shape != var.dims() => {
                    problems.push(format!("{name}: checkpoint shape {:?}, model shape {:?}", e.shape, var.dims()))
                }
                Some(_) => {}
                None if has(optional_prefix, name) => {}
                None => problems.push(format!("{name}: missing from checkpoint")),
            }
        }
        for e in &self.manifest.params {
            if params.get(&e.name).is_none() && !has(ignored_prefix, &e.name) {
                problems.push(format!("{}: not a model parameter", e.name));
            }
        }
        if !problems.is_empty() {
            return Err(ModelError::Checkpoint(format!("manifest does not match the model:\n  {}", problems.join("\n  "))));
        }
        for (name, var) in params.iter() {
            if let Some(e) = self.manifest.params.iter().find(|e| &e.name == name) {
                let n: usize = e.shape.iter().product();
                let t = Tensor::from_vec(self.values[e.offset..e.offset + n].to_vec(), e.shape.as_slice(), var.device())?
                    .to_dtype(var.dtype())?;
                var.set(&t)?;
            }
        }
        Ok(())
    }

    /// The marginal model; consistency parameters of a multi-agent
    /// checkpoint are ignored.
    pub fn model(&self) -> Result<SeamModel> {
        let m = SeamModel::new(self.manifest.model.clone(), 0, self.dtype()?)?;
        self.apply(&m.params, None, Some(CONSISTENCY_PREFIX))?;
        Ok(m)
    }

    /// The multi-agent model. From a single-agent checkpoint the consistency
    /// module is freshly initialized with `seed` and `cfg`.
    pub fn multi_agent_model(&self, cfg: Option<MultiAgentConfig>, seed: u64) -> Result<MultiAgentModel> {
        let cfg = cfg.or_else(|| self.manifest.multi_agent.clone()).unwrap_or_default();
        let marginal = self.model()?;
        let ma = MultiAgentModel::new(marginal, cfg, seed)?;
        let optional = match self.manifest.kind {
            CheckpointKind::SingleAgent => Some(CONSISTENCY_PREFIX),
            CheckpointKind::MultiAgent => None,
        };
        self.apply(&ma.params, optional, Some(""))?;
        Ok(ma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { d_model: 16, n_heads: 2, blocks_fa: 1, blocks_fs: 1, blocks_ft: 1, ..Default::default() }
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = SeamModel::new(small(), 3, DType::F64).unwrap();
        m.params.randomize(9, 0.3).unwrap();
        save_model(dir.path(), &m, 7, None).unwrap();
        let ck = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(ck.manifest.step, 7);
        let back = ck.model().unwrap();
        for (name, v) in m.params.iter() {
            let a = v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let b = back.params.get(name).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn shape_mismatch_lists_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let m = SeamModel::new(small(), 0, DType::F64).unwrap();
        save_model(dir.path(), &m, 0, None).unwrap();
        let mut ck = Checkpoint::load(dir.path()).unwrap();
        ck.manifest.model.d_model = 32;
        let err = ck.model().err().expect("must fail").to_string();
        assert!(err.contains("checkpoint shape") && err.contains("agent_in.weight"), "{err}");
    }
}
