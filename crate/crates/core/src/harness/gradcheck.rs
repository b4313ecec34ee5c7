//! Finite-difference check of every parameter gradient of the episode loss
//! on a micro model.

use crate::attention::TdmConfig;
use crate::backbone::BackboneConfig;
use crate::data::{generate_synthetic, sample_episode, SynthConfig};
use crate::error::Result;
use crate::head::{episode_loss, HeadConfig, Metric};
use crate::model::{EpisodeBatch, Model, ModelConfig};
use crate::numeric::gradcheck::{relative_error, GradCheckEntry};
use crate::numeric::{Graph, Mode, Rng, Tensor};

pub const MICRO_STEP: f64 = 1e-4;
pub const MICRO_TOLERANCE: f64 = 1e-3;

/// 2-way 1-shot, 16×16 images, 8-channel backbone, all attention enabled.
pub fn micro_setup(seed: u64, metric: Metric) -> Result<(Model, EpisodeBatch)> {
    let ds = generate_synthetic(&SynthConfig {
        n_classes: 2,
        instances_per_class: 3,
        image_size: 16,
        patch_size: 4,
        patch_count_per_class: 2,
        jitter: 1,
        seed,
        ..SynthConfig::default()
    })?;
    let ep = sample_episode(&ds, &[0, 1], 2, 1, 2, &mut Rng::new(seed))?;
    let batch = EpisodeBatch::from_episode(&ep, &ds)?;
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            width: 8,
            iam_blocks: vec![0, 1],
        },
        tdm: TdmConfig::with_flags(true, true, true),
        head: HeadConfig {
            metric,
            ..HeadConfig::default()
        },
    };
    let mut model = Model::init(cfg, seed)?;
    // Move the attention heads away from tanh(0) so the check is not
    // dominated by the near-identity initialization.
    let mut rng = Rng::new(seed ^ 0xfc2);
    for name in model.params.names().into_iter().filter(|n| n.ends_with("fc2.bias")) {
        let t = model.params.get_mut(&name)?;
        *t = Tensor::from_fn(t.shape(), |_| rng.uniform(-0.5, 0.5));
    }
    Ok((model, batch))
}

/// Loss and branch pattern of an eval-mode forward.
fn eval_loss(model: &Model, batch: &EpisodeBatch) -> Result<(f64, Vec<usize>)> {
    let mut ctx = model.context(Mode::Eval, Graph::new());
    let out = model.forward(&mut ctx, batch)?;
    let loss = episode_loss(&mut ctx.graph, out.logits, &batch.query_labels)?;
    Ok((ctx.graph.value(loss).data()[0], ctx.graph.branch_pattern()))
}

/// Analytic vs central-difference gradients for every parameter tensor
/// (eval-mode forward, no noise).
///
/// Elements whose ±`step` stencil changes the branch pattern (a ReLU, clamp,
/// maxpool or argmin crossing) are left out of the comparison and counted.
pub fn check_model(model: &Model, batch: &EpisodeBatch, step: f64, tolerance: f64) -> Result<Vec<GradCheckEntry>> {
    let analytic = {
        let mut ctx = model.context(Mode::Eval, Graph::new()).trainable(true);
        let out = model.forward(&mut ctx, batch)?;
        let loss = episode_loss(&mut ctx.graph, out.logits, &batch.query_labels)?;
        ctx.graph.backward(loss)?;
        ctx.gradients()
    };
    let (_, pattern) = eval_loss(model, batch)?;
    let mut entries = Vec::with_capacity(analytic.len());
    let mut probe = model.clone();
    for (name, grad) in analytic {
        let len = grad.len();
        let mut kept_a = Vec::with_capacity(len);
        let mut kept_n = Vec::with_capacity(len);
        for i in 0..len {
            let orig = probe.params.get(&name)?.data()[i];
            probe.params.get_mut(&name)?.data_mut()[i] = orig + step;
            let (up, up_pattern) = eval_loss(&probe, batch)?;
            probe.params.get_mut(&name)?.data_mut()[i] = orig - step;
            let (down, down_pattern) = eval_loss(&probe, batch)?;
            probe.params.get_mut(&name)?.data_mut()[i] = orig;
            if up_pattern == pattern && down_pattern == pattern {
                kept_a.push(grad.data()[i]);
                kept_n.push((up - down) / (2.0 * step));
            }
        }
        let kept = kept_a.len();
        let err = relative_error(&Tensor::new(vec![kept], kept_a)?, &Tensor::new(vec![kept], kept_n)?);
        entries.push(GradCheckEntry {
            name,
            count: len,
            relative_error: err,
            excluded: len - kept,
            passed: err < tolerance && kept > 0,
        });
    }
    Ok(entries)
}

pub fn check_micro(seed: u64, metric: Metric) -> Result<Vec<GradCheckEntry>> {
    let (model, batch) = micro_setup(seed, metric)?;
    check_model(&model, &batch, MICRO_STEP, MICRO_TOLERANCE)
}
