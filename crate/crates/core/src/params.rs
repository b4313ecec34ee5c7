//! Named parameter tensors, batch-norm buffers, and their binding into a graph.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{container, BatchStats, Graph, Mode, Rng, RunningStats, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    running: BTreeMap<String, RunningStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Registers a batch-norm layer: `prefix.gamma` = 1, `prefix.beta` = 0 and
    /// running statistics (mean 0, var 1).
    pub fn insert_batchnorm(&mut self, prefix: &str, features: usize) {
        self.insert(format!("{prefix}.gamma"), Tensor::ones(&[features]));
        self.insert(format!("{prefix}.beta"), Tensor::zeros(&[features]));
        self.running.insert(prefix.to_string(), RunningStats::new(features));
    }

    pub fn running(&self, prefix: &str) -> Result<&RunningStats> {
        self.running
            .get(prefix)
            .ok_or_else(|| Error::Invalid(format!("no running statistics for `{prefix}`")))
    }

    pub fn running_mut(&mut self, prefix: &str) -> Result<&mut RunningStats> {
        self.running
            .get_mut(prefix)
            .ok_or_else(|| Error::Invalid(format!("no running statistics for `{prefix}`")))
    }

    pub fn running_iter(&self) -> impl Iterator<Item = (&String, &RunningStats)> {
        self.running.iter()
    }

    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)]) -> Result<()> {
        for (name, stats) in updates {
            self.running_mut(name)?.update(stats);
        }
        Ok(())
    }

    /// Writes every parameter and running statistic into one container file
    /// (concatenated records) and returns the name → offset manifest.
    pub fn write_container(&self, path: &Path) -> Result<TensorManifest> {
        let mut w = BufWriter::new(File::create(path)?);
        let mut entries = Vec::new();
        let mut offset = 0u64;
        let mut emit = |name: String, kind: EntryKind, t: &Tensor, w: &mut BufWriter<File>| -> Result<()> {
            let len = container::write_tensor(w, t)?;
            entries.push(ManifestEntry {
                name,
                kind,
                offset,
                shape: t.shape().to_vec(),
            });
            offset += len;
            Ok(())
        };
        for (name, t) in &self.params {
            emit(name.clone(), EntryKind::Param, t, &mut w)?;
        }
        for (name, rs) in &self.running {
            let n = rs.mean.len();
            emit(
                format!("{name}.running_mean"),
                EntryKind::RunningMean,
                &Tensor::new(vec![n], rs.mean.clone())?,
                &mut w,
            )?;
            emit(
                format!("{name}.running_var"),
                EntryKind::RunningVar,
                &Tensor::new(vec![n], rs.var.clone())?,
                &mut w,
            )?;
        }
        w.flush()?;
        Ok(TensorManifest { entries })
    }

    pub fn read_container(path: &Path, manifest: &TensorManifest) -> Result<ParamStore> {
        let mut r = BufReader::new(File::open(path)?);
        let mut store = ParamStore::new();
        for e in &manifest.entries {
            r.seek(SeekFrom::Start(e.offset))?;
            let t = container::read_tensor(&mut r)?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!(
                    "`{}`: manifest shape {:?} but container holds {:?}",
                    e.name,
                    e.shape,
                    t.shape()
                )));
            }
            match e.kind {
                EntryKind::Param => store.insert(e.name.clone(), t),
                EntryKind::RunningMean | EntryKind::RunningVar => {
                    let suffix = if e.kind == EntryKind::RunningMean {
                        ".running_mean"
                    } else {
                        ".running_var"
                    };
                    let prefix = e.name.strip_suffix(suffix).ok_or_else(|| {
                        Error::Format(format!("buffer name `{}` lacks {suffix}", e.name))
                    })?;
                    let rs = store
                        .running
                        .entry(prefix.to_string())
                        .or_insert_with(|| RunningStats::new(t.len()));
                    if e.kind == EntryKind::RunningMean {
                        rs.mean = t.into_data();
                    } else {
                        rs.var = t.into_data();
                    }
                }
            }
        }
        Ok(store)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Param,
    RunningMean,
    RunningVar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: EntryKind,
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub entries: Vec<ManifestEntry>,
}

/// Fan-in uniform initialization `U(−a, a)`, `a = sqrt(1 / fan_in)`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let a = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.uniform(-a, a))
}

/// How FC-block outputs are regularized during a forward pass.
#[derive(Clone, Debug)]
pub struct NoiseSpec {
    pub rng: Rng,
    pub half_width: f64,
}

/// One forward pass: the graph under construction, the parameters it reads,
/// and the side effects (batch-norm statistics) it produces.
pub struct ForwardCtx<'a> {
    pub graph: Graph,
    pub store: &'a ParamStore,
    pub mode: Mode,
    /// Training-time output noise + clamp for the attention blocks.
    pub noise: Option<NoiseSpec>,
    /// Bind parameters as differentiable leaves (otherwise as constants).
    pub trainable: bool,
    bound: HashMap<String, Var>,
    bn_updates: Vec<(String, BatchStats)>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, graph: Graph) -> Self {
        Self {
            graph,
            store,
            mode,
            noise: None,
            trainable: false,
            bound: HashMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn trainable(mut self, yes: bool) -> Self {
        self.trainable = yes;
        self
    }

    pub fn with_noise(mut self, noise: Option<NoiseSpec>) -> Self {
        self.noise = noise;
        self
    }

    /// Graph variable for a named parameter (bound once per pass).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.trainable {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Batch norm using `prefix.gamma`, `prefix.beta` and the stored running
    /// statistics; train-mode batch statistics are queued for the caller.
    pub fn batchnorm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let running = self.store.running(prefix)?;
        let (y, stats) = self.graph.batchnorm(x, gamma, beta, running, self.mode)?;
        if let Some(s) = stats {
            self.bn_updates.push((prefix.to_string(), s));
        }
        Ok(y)
    }

    pub fn bn_updates(&self) -> &[(String, BatchStats)] {
        &self.bn_updates
    }

    /// Gradients of all bound parameters after `graph.backward`. Parameters
    /// the loss does not depend on get zeros.
    pub fn gradients(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .bound
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .graph
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.graph.shape(v)));
                (name.clone(), g)
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn bound_var(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }
}
