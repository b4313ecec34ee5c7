//! Analysis outputs: per-episode weight dumps, per-class channel variance of
//! backbone features, and channel inter scores split by patch alignment.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{EpisodeBatch, Model};
use crate::numeric::{Graph, Mode, Tensor};
use crate::scores::{self, VarianceReport};

use super::evaluate::EvalPlan;

/// Eval-mode backbone features (`B×C×H×W`) of a stack of images.
pub fn features(model: &Model, images: &Tensor) -> Result<Tensor> {
    let mut ctx = model.context(Mode::Eval, Graph::new());
    let x = ctx.graph.constant(images.clone());
    let f = backbone::extract(&mut ctx, &model.config.backbone, x, model.config.tdm.iam)?;
    Ok(ctx.graph.value(f).clone())
}

fn mean_rows(t: &Tensor) -> Vec<f64> {
    let s = t.shape();
    let rows = s[0];
    let width = t.len() / rows.max(1);
    (0..width)
        .map(|c| (0..rows).map(|r| t.data()[r * width + c]).sum::<f64>() / rows as f64)
        .collect()
}

/// Writes `episode,class,channel,w_intra,w_inter,w_S,w_Q,w_T` rows for the
/// first `episodes` episodes of `plan`. Query-dependent weights (w_Q, w_T)
/// are averaged over the episode's queries; disabled modules leave blanks.
pub fn dump_weights(model: &Model, plan: &EvalPlan, episodes: usize, w: &mut impl Write) -> Result<()> {
    writeln!(w, "episode,class,channel,w_intra,w_inter,w_S,w_Q,w_T")?;
    for e in 0..episodes {
        let ep = plan.episode(e)?;
        let batch = EpisodeBatch::from_episode(&ep, plan.dataset)?;
        let mut ctx = model.context(Mode::Eval, Graph::new());
        let out = model.forward(&mut ctx, &batch)?;
        let g = &ctx.graph;
        let per_class = |v: Option<crate::numeric::Var>| v.map(|v| g.value(v).clone());
        let (wi, we, ws) = (per_class(out.w_intra), per_class(out.w_inter), per_class(out.w_support));
        let wq = out.w_query.map(|v| mean_rows(g.value(v)));
        let wt_full = g.value(out.w_task);
        let (q, n, c) = (wt_full.shape()[0], wt_full.shape()[1], wt_full.shape()[2]);
        let wt = mean_rows(&wt_full.reshape(&[q, n * c])?);
        let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for i in 0..n {
            for ch in 0..c {
                let at = |t: &Option<Tensor>| t.as_ref().map(|t| t.data()[i * c + ch]);
                writeln!(
                    w,
                    "{e},{},{ch},{},{},{},{},{}",
                    ep.class_ids[i],
                    fmt(at(&wi)),
                    fmt(at(&we)),
                    fmt(at(&ws)),
                    fmt(wq.as_ref().map(|v| v[ch])),
                    wt[i * c + ch]
                )?;
            }
        }
    }
    Ok(())
}

pub fn save_weight_dump(model: &Model, plan: &EvalPlan, episodes: usize, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    dump_weights(model, plan, episodes, &mut f)?;
    f.flush()?;
    Ok(())
}

/// Channel variance of pooled backbone features over (up to
/// `max_per_class`) instances of each listed class.
pub fn class_variance(model: &Model, ds: &Dataset, class_ids: &[usize], max_per_class: usize) -> Result<VarianceReport> {
    let groups = class_ids
        .iter()
        .map(|&id| {
            let inst = &ds.class(id).instances;
            let take: Vec<&Tensor> = inst.iter().take(max_per_class.max(1)).collect();
            features(model, &Tensor::stack(&take)?)
        })
        .collect::<Result<Vec<_>>>()?;
    scores::variance_report(class_ids, &groups)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelDiagnostic {
    pub channel: usize,
    /// Mean absolute change of the pooled activation between the shared
    /// template and the clean class images.
    pub patch_response: f64,
    pub patch_aligned: bool,
    /// Inter score averaged over classes.
    pub inter_mean: f64,
    pub intra_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub channels: Vec<ChannelDiagnostic>,
    pub aligned_inter_mean: f64,
    pub background_inter_mean: f64,
}

impl AlignmentReport {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "channel,patch_response,patch_aligned,inter_mean,intra_mean")?;
        for c in &self.channels {
            writeln!(
                w,
                "{},{},{},{},{}",
                c.channel, c.patch_response, c.patch_aligned, c.inter_mean, c.intra_mean
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Splits channels at the median patch response into patch-aligned (upper
/// half) and background (lower half), and compares their inter scores. The
/// inter scores use prototypes of the listed classes' instances.
pub fn patch_alignment(model: &Model, ds: &Dataset, class_ids: &[usize], max_per_class: usize) -> Result<AlignmentReport> {
    let meta = ds
        .synth_meta()
        .ok_or_else(|| Error::Data("patch alignment needs a synthetic dataset".into()))?;
    if class_ids.len() < 2 {
        return Err(Error::Invalid("patch alignment needs at least two classes".into()));
    }
    let template = features(model, &Tensor::stack(&[&meta.template_image()])?)?;
    let clean: Vec<Tensor> = class_ids.iter().map(|&id| meta.class_prototype_image(id)).collect();
    let clean = features(model, &Tensor::stack(&clean.iter().collect::<Vec<_>>())?)?;
    let c = template.shape()[1];
    let pool = |t: &Tensor, b: usize, ch: usize| {
        let hw = t.shape()[2] * t.shape()[3];
        let start = (b * c + ch) * hw;
        t.data()[start..start + hw].iter().sum::<f64>() / hw as f64
    };
    let response: Vec<f64> = (0..c)
        .map(|ch| {
            let t = pool(&template, 0, ch);
            (0..class_ids.len()).map(|b| (pool(&clean, b, ch) - t).abs()).sum::<f64>() / class_ids.len() as f64
        })
        .collect();

    let protos = class_ids
        .iter()
        .map(|&id| {
            let take: Vec<&Tensor> = ds.class(id).instances.iter().take(max_per_class.max(1)).collect();
            let f = features(model, &Tensor::stack(&take)?)?;
            let maps: Vec<Tensor> = (0..f.shape()[0])
                .map(|i| f.narrow(i, i + 1)?.reshape(&f.shape()[1..]))
                .collect::<Result<_>>()?;
            scores::prototype_map(&maps)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = protos.len();
    let mut inter = vec![0.0; c];
    let mut intra = vec![0.0; c];
    for i in 0..n {
        for (acc, v) in inter.iter_mut().zip(scores::inter_scores_map(&protos, i)?) {
            *acc += v / n as f64;
        }
        for (acc, v) in intra.iter_mut().zip(scores::intra_scores_map(&protos[i])?) {
            *acc += v / n as f64;
        }
    }

    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| response[b].total_cmp(&response[a]).then(a.cmp(&b)));
    let mut aligned = vec![false; c];
    for &ch in &order[..c / 2] {
        aligned[ch] = true;
    }
    let mean_of = |flag: bool| {
        let v: Vec<f64> = (0..c).filter(|&ch| aligned[ch] == flag).map(|ch| inter[ch]).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    Ok(AlignmentReport {
        aligned_inter_mean: mean_of(true),
        background_inter_mean: mean_of(false),
        channels: (0..c)
            .map(|ch| ChannelDiagnostic {
                channel: ch,
                patch_response: response[ch],
                patch_aligned: aligned[ch],
                inter_mean: inter[ch],
                intra_mean: intra[ch],
            })
            .collect(),
    })
}
