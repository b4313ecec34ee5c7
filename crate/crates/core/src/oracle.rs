//! Brute-force loop implementations of the score and weighting math, and a
//! randomized comparison against the graph implementations.

use serde::{Deserialize, Serialize};

use crate::attention::{apply_to_query, apply_to_support};
use crate::error::Result;
use crate::numeric::{Graph, Rng, Tensor};
use crate::scores;

pub fn prototype(maps: &[Tensor]) -> Tensor {
    let shape = maps[0].shape();
    let mut out = Tensor::zeros(shape);
    for i in 0..out.len() {
        let mut s = 0.0;
        for m in maps {
            s += m.data()[i];
        }
        out.data_mut()[i] = s / maps.len() as f64;
    }
    out
}

pub fn mean_spatial(map: &Tensor) -> Tensor {
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for ch in 0..c {
                s += map.at(&[ch, y, x]);
            }
            out.data_mut()[y * w + x] = s / c as f64;
        }
    }
    out
}

fn channel_distance(map: &Tensor, ch: usize, m: &Tensor) -> f64 {
    let (h, w) = (map.shape()[1], map.shape()[2]);
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            let d = map.at(&[ch, y, x]) - m.at(&[y, x]);
            s += d * d;
        }
    }
    s / (h * w) as f64
}

pub fn intra_scores(map: &Tensor) -> Vec<f64> {
    let m = mean_spatial(map);
    (0..map.shape()[0]).map(|ch| channel_distance(map, ch, &m)).collect()
}

pub fn inter_scores(protos: &[Tensor], i: usize) -> Vec<f64> {
    let means: Vec<Tensor> = protos.iter().map(mean_spatial).collect();
    (0..protos[i].shape()[0])
        .map(|ch| {
            let mut best = f64::INFINITY;
            for (j, mj) in means.iter().enumerate() {
                if j != i {
                    best = best.min(channel_distance(&protos[i], ch, mj));
                }
            }
            best
        })
        .collect()
}

/// `supports: N×K×C×H×W`, `w: N×C`.
pub fn apply_support(supports: &Tensor, w: &Tensor) -> Tensor {
    let s = supports.shape().to_vec();
    let mut out = supports.clone();
    for i in 0..s[0] {
        for k in 0..s[1] {
            for c in 0..s[2] {
                for y in 0..s[3] {
                    for x in 0..s[4] {
                        let idx = [i, k, c, y, x];
                        let o = supports.offset(&idx);
                        out.data_mut()[o] = w.at(&[i, c]) * supports.at(&idx);
                    }
                }
            }
        }
    }
    out
}

/// `query: C×H×W`, `w: N×C` → `N×C×H×W`.
pub fn apply_query(query: &Tensor, w: &Tensor) -> Tensor {
    let (c, h, wd) = (query.shape()[0], query.shape()[1], query.shape()[2]);
    let n = w.shape()[0];
    let mut out = Tensor::zeros(&[n, c, h, wd]);
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..wd {
                    let o = out.offset(&[i, ch, y, x]);
                    out.data_mut()[o] = w.at(&[i, ch]) * query.at(&[ch, y, x]);
                }
            }
        }
    }
    out
}

pub fn pooled(map: &Tensor) -> Vec<f64> {
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    (0..c)
        .map(|ch| {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    s += map.at(&[ch, y, x]);
                }
            }
            s / (h * w) as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub name: String,
    pub trials: usize,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub entries: Vec<OracleEntry>,
}

impl OracleReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_abs_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.entries.iter().all(|e| e.max_abs_error < tolerance)
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Compares every graph implementation against its loop oracle on `trials`
/// random cases with C ≤ 8, H, W ≤ 4.
pub fn run_suite(trials: usize, seed: u64) -> Result<OracleReport> {
    const NAMES: [&str; 7] = [
        "prototype",
        "mean_spatial",
        "intra_scores",
        "inter_scores",
        "apply_to_support",
        "apply_to_query",
        "pooled",
    ];
    let mut worst = [0.0f64; 7];
    let mut rng = Rng::new(seed);
    for _ in 0..trials {
        let (c, h, w) = (1 + rng.below(8), 1 + rng.below(4), 1 + rng.below(4));
        let n = 2 + rng.below(4);
        let k = 1 + rng.below(3);
        let scale = rng.uniform(0.1, 10.0);
        let mut draw = |shape: &[usize]| Tensor::from_fn(shape, |_| scale * rng.normal());
        let supports = draw(&[n, k, c, h, w]);
        let query = draw(&[c, h, w]);
        let weights = Tensor::from_fn(&[n, c], |_| rng.uniform(0.0, 2.0));
        let class_maps = |i: usize| -> Result<Vec<Tensor>> {
            let block = supports.narrow(i, i + 1)?.reshape(&[k, c, h, w])?;
            (0..k).map(|j| block.narrow(j, j + 1)?.reshape(&[c, h, w])).collect()
        };
        let maps = class_maps(0)?;
        let protos: Vec<Tensor> = (0..n)
            .map(|i| scores::prototype_map(&class_maps(i)?))
            .collect::<Result<_>>()?;

        let errs = [
            scores::prototype_map(&maps)?.max_abs_diff(&prototype(&maps)),
            scores::mean_spatial_map(&query)?.max_abs_diff(&mean_spatial(&query)),
            max_diff(&scores::intra_scores_map(&query)?, &intra_scores(&query)),
            (0..n)
                .map(|i| Ok(max_diff(&scores::inter_scores_map(&protos, i)?, &inter_scores(&protos, i))))
                .collect::<Result<Vec<f64>>>()?
                .into_iter()
                .fold(0.0, f64::max),
            {
                let mut g = Graph::new();
                let s = g.constant(supports.clone());
                let wv = g.constant(weights.clone());
                let a = apply_to_support(&mut g, s, wv)?;
                g.value(a).max_abs_diff(&apply_support(&supports, &weights))
            },
            {
                let mut g = Graph::new();
                let q = g.constant(query.clone());
                let wv = g.constant(weights.clone());
                let a = apply_to_query(&mut g, q, wv)?;
                g.value(a).max_abs_diff(&apply_query(&query, &weights))
            },
            {
                let mut g = Graph::new();
                let q = g.constant(query.reshape(&[1, c, h, w])?);
                let p = crate::head::pooled(&mut g, q)?;
                max_diff(g.value(p).data(), &pooled(&query))
            },
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
    }
    Ok(OracleReport {
        entries: NAMES
            .iter()
            .zip(worst)
            .map(|(name, e)| OracleEntry {
                name: name.to_string(),
                trials,
                max_abs_error: e,
            })
            .collect(),
    })
}
