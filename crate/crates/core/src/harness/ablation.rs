use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::TdmConfig;
use crate::data::{ClassSplit, Dataset};
use crate::error::Result;
use crate::model::Model;

use super::config::ExperimentConfig;
use super::evaluate::{evaluate, EpisodeSpec, MetricsRecord};
use super::test_plan;
use super::train::train;

/// Flag rows in table order: none, S, Q, I, SQ, SI, QI, SQI.
pub const ABLATION_ROWS: [(bool, bool, bool); 8] = [
    (false, false, false),
    (true, false, false),
    (false, true, false),
    (false, false, true),
    (true, true, false),
    (true, false, true),
    (false, true, true),
    (true, true, true),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub sam: bool,
    pub qam: bool,
    pub iam: bool,
    pub results: Vec<MetricsRecord>,
}

impl AblationRow {
    pub fn label(&self) -> String {
        let mut s = String::new();
        for (on, c) in [(self.sam, 'S'), (self.qam, 'Q'), (self.iam, 'I')] {
            if on {
                s.push(c);
            }
        }
        if s.is_empty() {
            s.push_str("none");
        }
        s
    }
}

/// Trains and evaluates every flag combination from the same seed, then
/// evaluates each on every `(N, K)` in `settings`.
pub fn ablation_grid(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    split: &ClassSplit,
    settings: &[(usize, usize)],
) -> Result<Vec<AblationRow>> {
    ABLATION_ROWS
        .iter()
        .map(|&(sam, qam, iam)| {
            let mut c = cfg.clone();
            c.model.tdm = TdmConfig {
                sam,
                qam,
                iam,
                ..cfg.model.tdm.clone()
            };
            let model = Model::init(c.model.clone(), c.seed)?;
            let trained = train(&c, ds, split, model)?;
            let results = settings
                .iter()
                .map(|&(n, k)| {
                    let mut plan = test_plan(&c, ds, split);
                    plan.spec = EpisodeSpec {
                        n_way: n,
                        k_shot: k,
                        ..plan.spec
                    };
                    evaluate(&trained.best, &plan)
                })
                .collect::<Result<Vec<_>>>()?;
            log::info!("ablation row sam={sam} qam={qam} iam={iam} done");
            Ok(AblationRow { sam, qam, iam, results })
        })
        .collect()
}

pub fn write_ablation_csv(rows: &[AblationRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "row,sam,qam,iam,n_way,k_shot,mean_accuracy,ci95,episodes")?;
    for r in rows {
        for m in &r.results {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.label(),
                r.sam,
                r.qam,
                r.iam,
                m.n_way,
                m.k_shot,
                m.mean_accuracy,
                m.ci95,
                m.episodes
            )?;
        }
    }
    Ok(())
}

pub fn save_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ablation_csv(rows, &mut f)?;
    f.flush()?;
    Ok(())
}
