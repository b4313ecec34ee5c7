use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{augment, sample_episode, AugmentFlags, ClassSplit, Dataset, SplitPart};
use crate::error::{Error, Result};
use crate::head::{episode_accuracy, episode_loss};
use crate::model::{EpisodeBatch, Model};
use crate::numeric::{mix, Graph, Mode, Rng, Tensor};
use crate::parallel::Execution;
use crate::params::NoiseSpec;

use super::config::ExperimentConfig;
use super::evaluate::{evaluate, EpisodeSpec, EvalPlan};
use super::optim::Sgd;

const VAL_SEED_SALT: u64 = 0x5641_4c00;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub episode: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation accuracy (the last ones when
    /// validation is off).
    pub best: Model,
    pub last: Model,
    pub best_val_acc: Option<f64>,
    pub best_episode: usize,
    pub log: Vec<LogRow>,
    pub wall_time_secs: f64,
}

pub fn write_log_csv(rows: &[LogRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "episode,loss,train_acc,val_acc")?;
    for r in rows {
        let val = r.val_acc.map(|v| v.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{val}", r.episode, r.loss, r.train_acc)?;
    }
    Ok(())
}

pub fn save_log_csv(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_log_csv(rows, &mut f)?;
    f.flush()?;
    Ok(())
}

/// Seed of training episode `e` for run seed `seed`.
pub fn episode_seed(seed: u64, e: usize) -> u64 {
    mix(seed, e as u64)
}

/// Loss and accuracy of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub loss: f64,
    pub accuracy: f64,
}

/// One forward/backward/update on `batch`; batch-norm running statistics are
/// folded in after the parameter update.
pub fn train_step(
    model: &mut Model,
    opt: &mut Sgd,
    batch: &EpisodeBatch,
    noise: Option<NoiseSpec>,
    execution: Execution,
) -> Result<StepResult> {
    let (loss, accuracy, grads, bn) = {
        let mut ctx = model
            .context(Mode::Train, Graph::with_execution(execution))
            .trainable(true)
            .with_noise(noise);
        let out = model.forward(&mut ctx, batch)?;
        let loss = episode_loss(&mut ctx.graph, out.logits, &batch.query_labels)?;
        let loss_value = ctx.graph.value(loss).data()[0];
        let acc = episode_accuracy(ctx.graph.value(out.logits), &batch.query_labels);
        if !loss_value.is_finite() {
            return Ok(StepResult {
                loss: loss_value,
                accuracy: acc,
            });
        }
        ctx.graph.backward(loss)?;
        (loss_value, acc, ctx.gradients(), ctx.bn_updates().to_vec())
    };
    opt.step(&mut model.params, &grads)?;
    model.params.apply_bn_updates(&bn)?;
    Ok(StepResult { loss, accuracy })
}

fn augmented(images: &Tensor, rng: &mut Rng, flags: AugmentFlags) -> Result<Tensor> {
    if !flags.any() {
        return Ok(images.clone());
    }
    let n = images.shape()[0];
    let parts = (0..n)
        .map(|i| {
            let s = images.shape();
            let img = images.narrow(i, i + 1)?.reshape(&s[1..])?;
            Ok(augment(&img, rng, flags))
        })
        .collect::<Result<Vec<Tensor>>>()?;
    Tensor::stack(&parts.iter().collect::<Vec<_>>())
}

/// Builds a training batch for episode `e`.
pub fn training_batch(cfg: &ExperimentConfig, ds: &Dataset, split: &ClassSplit, e: usize) -> Result<(EpisodeBatch, Rng)> {
    let seed = episode_seed(cfg.seed, e);
    let root = Rng::new(seed);
    let t = &cfg.train;
    let ep = sample_episode(
        ds,
        split.part(SplitPart::Train),
        t.n_way,
        t.k_shot,
        t.n_query,
        &mut root.derive(0),
    )?;
    let mut batch = EpisodeBatch::from_episode(&ep, ds)?;
    if t.augment.any() {
        let mut arng = root.derive(2);
        batch.support = augmented(&batch.support, &mut arng, t.augment)?;
        batch.query = augmented(&batch.query, &mut arng, t.augment)?;
    }
    Ok((batch, root.derive(1)))
}

pub fn validation_plan<'a>(cfg: &ExperimentConfig, ds: &'a Dataset, split: &'a ClassSplit) -> EvalPlan<'a> {
    EvalPlan {
        dataset: ds,
        split,
        part: SplitPart::Val,
        spec: EpisodeSpec {
            n_way: cfg.eval.n_way,
            k_shot: cfg.eval_k_shot(),
            n_query: cfg.train.val_n_query.unwrap_or(cfg.eval.n_query),
        },
        episodes: cfg.train.val_episodes,
        base_seed: mix(cfg.seed, VAL_SEED_SALT),
        execution: cfg.execution,
        keep_per_episode: false,
    }
}

/// Episodic training from `model`'s current parameters.
pub fn train(cfg: &ExperimentConfig, ds: &Dataset, split: &ClassSplit, mut model: Model) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut opt = Sgd::new(&cfg.optim);
    let validate = cfg.train.val_every > 0
        && cfg.train.val_episodes > 0
        && split.val_class_ids.len() >= cfg.eval.n_way;
    if cfg.train.val_every > 0 && !validate {
        log::warn!(
            "validation disabled: {} val classes for {}-way episodes",
            split.val_class_ids.len(),
            cfg.eval.n_way
        );
    }
    let mut log = Vec::with_capacity(cfg.train.episodes);
    let mut best: Option<(f64, usize, Model)> = None;
    for e in 0..cfg.train.episodes {
        let (batch, noise_rng) = training_batch(cfg, ds, split, e)?;
        let noise = Some(NoiseSpec {
            rng: noise_rng,
            half_width: cfg.model.tdm.noise_half_width,
        });
        let step = train_step(&mut model, &mut opt, &batch, noise, cfg.execution)?;
        if !step.loss.is_finite() {
            return Err(Error::Diverged {
                episode: e,
                seed: episode_seed(cfg.seed, e),
                loss: step.loss,
            });
        }
        let mut row = LogRow {
            episode: e,
            loss: step.loss,
            train_acc: step.accuracy,
            val_acc: None,
        };
        if validate && (e + 1) % cfg.train.val_every == 0 {
            let rec = evaluate(&model, &validation_plan(cfg, ds, split))?;
            log::info!("episode {}: loss {:.4}, val acc {:.4}", e + 1, step.loss, rec.mean_accuracy);
            row.val_acc = Some(rec.mean_accuracy);
            if best.as_ref().is_none_or(|(b, _, _)| rec.mean_accuracy > *b) {
                best = Some((rec.mean_accuracy, e, model.clone()));
            }
        }
        log.push(row);
    }
    let (best_val_acc, best_episode, best_model) = match best {
        Some((acc, e, m)) => (Some(acc), e, m),
        None => (None, cfg.train.episodes.saturating_sub(1), model.clone()),
    };
    Ok(TrainOutcome {
        best: best_model,
        last: model,
        best_val_acc,
        best_episode,
        log,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}
