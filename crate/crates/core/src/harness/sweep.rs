use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ClassSplit, Dataset, SplitPart};
use crate::error::Result;
use crate::model::Model;

use super::config::ExperimentConfig;
use super::evaluate::{evaluate, EpisodeSpec, MetricsRecord};
use super::test_plan;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub n_way: usize,
    pub k_shot: usize,
    /// `None` when the cell was skipped; `note` says why.
    pub metrics: Option<MetricsRecord>,
    pub note: Option<String>,
}

/// Evaluates one trained model on every `(N, K)` of `n_list × k_list`,
/// row-major in `n_list`.
pub fn sweep_nk(
    cfg: &ExperimentConfig,
    model: &Model,
    ds: &Dataset,
    split: &ClassSplit,
    n_list: &[usize],
    k_list: &[usize],
) -> Result<Vec<SweepCell>> {
    let available = split.part(SplitPart::Test).len();
    let mut cells = Vec::with_capacity(n_list.len() * k_list.len());
    for &n in n_list {
        for &k in k_list {
            if n > available || n == 0 || k == 0 {
                let note = format!("skipped: {n}-way {k}-shot with {available} test classes");
                log::warn!("{note}");
                cells.push(SweepCell {
                    n_way: n,
                    k_shot: k,
                    metrics: None,
                    note: Some(note),
                });
                continue;
            }
            let mut plan = test_plan(cfg, ds, split);
            plan.spec = EpisodeSpec {
                n_way: n,
                k_shot: k,
                ..plan.spec
            };
            cells.push(SweepCell {
                n_way: n,
                k_shot: k,
                metrics: Some(evaluate(model, &plan)?),
                note: None,
            });
        }
    }
    Ok(cells)
}

pub fn write_sweep_csv(cells: &[SweepCell], w: &mut impl Write) -> Result<()> {
    writeln!(w, "n_way,k_shot,mean_accuracy,ci95,episodes,note")?;
    for c in cells {
        match &c.metrics {
            Some(m) => writeln!(w, "{},{},{},{},{},", c.n_way, c.k_shot, m.mean_accuracy, m.ci95, m.episodes)?,
            None => writeln!(w, "{},{},,,,{}", c.n_way, c.k_shot, c.note.as_deref().unwrap_or(""))?,
        }
    }
    Ok(())
}

pub fn save_sweep_csv(cells: &[SweepCell], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_sweep_csv(cells, &mut f)?;
    f.flush()?;
    Ok(())
}
