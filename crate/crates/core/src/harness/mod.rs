//! Training, evaluation, ablation and sweep drivers.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod evaluate;
pub mod gradcheck;
pub mod optim;
pub mod sweep;
pub mod train;

pub use ablation::{ablation_grid, AblationRow, ABLATION_ROWS};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use config::{DataSource, ExperimentConfig};
pub use evaluate::{evaluate, mean_ci95, EpisodeSpec, EvalPlan, MetricsRecord};
pub use optim::Sgd;
pub use sweep::{sweep_nk, SweepCell};
pub use train::{train, train_step, LogRow, TrainOutcome};

use crate::data::{build_split, generate_synthetic, load_dataset, load_image_folder, ClassSplit, Dataset, SplitPart};
use crate::error::{Error, Result};

/// Dataset and class split described by `cfg`.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(Dataset, ClassSplit)> {
    let ds = match cfg.data.source {
        DataSource::Synthetic => generate_synthetic(&cfg.data.synthetic)?,
        DataSource::Folder => {
            let path = cfg.data.path.as_deref().ok_or_else(|| Error::Config("data.path missing".into()))?;
            let load = load_image_folder(path, cfg.data.image_size)?;
            for w in &load.warnings {
                log::warn!("{w}");
            }
            load.dataset
        }
        DataSource::Saved => {
            let path = cfg.data.path.as_deref().ok_or_else(|| Error::Config("data.path missing".into()))?;
            load_dataset(path)?
        }
    };
    let [a, b, c] = cfg.split.fractions;
    let split = build_split(&ds, (a, b, c), cfg.split.seed)?;
    if split.part(SplitPart::Test).len() < cfg.eval.n_way {
        return Err(Error::Config(format!(
            "eval.n_way = {} exceeds the {} test classes",
            cfg.eval.n_way,
            split.test_class_ids.len()
        )));
    }
    Ok((ds, split))
}

/// Test-split evaluation plan from the `[eval]` section.
pub fn test_plan<'a>(cfg: &ExperimentConfig, ds: &'a Dataset, split: &'a ClassSplit) -> EvalPlan<'a> {
    EvalPlan {
        dataset: ds,
        split,
        part: SplitPart::Test,
        spec: EpisodeSpec {
            n_way: cfg.eval.n_way,
            k_shot: cfg.eval_k_shot(),
            n_query: cfg.eval.n_query,
        },
        episodes: cfg.eval.episodes,
        base_seed: cfg.eval.base_seed,
        execution: cfg.execution,
        keep_per_episode: cfg.eval.keep_per_episode,
    }
}
