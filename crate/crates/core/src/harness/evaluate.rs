use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, ClassSplit, Dataset, Episode, SplitPart};
use crate::error::{Error, Result};
use crate::head::episode_accuracy;
use crate::model::{EpisodeBatch, Model};
use crate::numeric::{Graph, Rng};
use crate::parallel::{map_indexed, Execution};

/// Episode geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub mean_accuracy: f64,
    /// `1.96·σ/√E` with σ the sample standard deviation.
    pub ci95: f64,
    /// Set when E = 1 and the interval is undefined (reported as 0).
    pub ci_degenerate: bool,
    pub episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub per_episode: Option<Vec<f64>>,
    pub wall_time_secs: f64,
}

/// Mean, 95 % half-width and the degenerate flag for per-episode accuracies.
pub fn mean_ci95(accs: &[f64]) -> (f64, f64, bool) {
    let e = accs.len();
    if e == 0 {
        return (0.0, 0.0, true);
    }
    let mean = accs.iter().sum::<f64>() / e as f64;
    if e == 1 {
        return (mean, 0.0, true);
    }
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (e - 1) as f64;
    (mean, 1.96 * var.sqrt() / (e as f64).sqrt(), false)
}

/// Which episodes to draw and how to run them.
#[derive(Clone, Copy, Debug)]
pub struct EvalPlan<'a> {
    pub dataset: &'a Dataset,
    pub split: &'a ClassSplit,
    pub part: SplitPart,
    pub spec: EpisodeSpec,
    pub episodes: usize,
    /// Episode `e` is sampled with seed `base_seed + e`.
    pub base_seed: u64,
    pub execution: Execution,
    pub keep_per_episode: bool,
}

impl EvalPlan<'_> {
    pub fn episode(&self, e: usize) -> Result<Episode> {
        let classes = self.split.part(self.part);
        let mut rng = Rng::new(self.base_seed.wrapping_add(e as u64));
        let ep = sample_episode(
            self.dataset,
            classes,
            self.spec.n_way,
            self.spec.k_shot,
            self.spec.n_query,
            &mut rng,
        )?;
        if self.part != SplitPart::Train {
            if let Some(id) = ep.class_ids.iter().find(|id| self.split.train_class_ids.contains(id)) {
                return Err(Error::Data(format!(
                    "evaluation episode {e} drew training class {id}"
                )));
            }
        }
        Ok(ep)
    }

    /// Graph for one episode: when episodes already run in parallel the
    /// kernels inside stay sequential.
    fn graph(&self) -> Graph {
        if self.execution.is_parallel() {
            Graph::with_execution(Execution::Sequential)
        } else {
            Graph::new()
        }
    }
}

/// Accuracy of one eval-mode episode.
pub fn episode_eval(model: &Model, plan: &EvalPlan, e: usize) -> Result<f64> {
    let ep = plan.episode(e)?;
    let batch = EpisodeBatch::from_episode(&ep, plan.dataset)?;
    let logits = model.eval_logits(&batch, plan.graph())?;
    Ok(episode_accuracy(&logits, &batch.query_labels))
}

pub fn evaluate(model: &Model, plan: &EvalPlan) -> Result<MetricsRecord> {
    let start = Instant::now();
    let accs = map_indexed(plan.execution, plan.episodes, |e| episode_eval(model, plan, e))
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    let (mean, ci, degenerate) = mean_ci95(&accs);
    Ok(MetricsRecord {
        mean_accuracy: mean,
        ci95: ci,
        ci_degenerate: degenerate,
        episodes: accs.len(),
        n_way: plan.spec.n_way,
        k_shot: plan.spec.k_shot,
        per_episode: plan.keep_per_episode.then_some(accs),
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}
