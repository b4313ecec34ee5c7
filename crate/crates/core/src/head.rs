//! Metric head: distances between weighted prototypes and queries, episode
//! probabilities, loss and accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{softmax_rows, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceOn {
    /// Global-average-pooled C-dimensional embeddings.
    #[default]
    Pooled,
    /// Whole C×H×W maps.
    Flattened,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub metric: Metric,
    /// Cosine scale τ in `d = τ·(1 − cos)`.
    pub temperature: f64,
    pub distance_on: DistanceOn,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Euclidean,
            temperature: 10.0,
            distance_on: DistanceOn::Pooled,
        }
    }
}

/// Distances and probabilities for every query of an episode (`Q×N`).
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLogits {
    pub distances: Tensor,
    pub probabilities: Tensor,
    pub metric: Metric,
    pub temperature: f64,
}

impl EpisodeLogits {
    pub fn from_logits(logits: &Tensor, cfg: &HeadConfig) -> Result<Self> {
        Ok(Self {
            distances: logits.map(|v| -v),
            probabilities: softmax_rows(logits)?,
            metric: cfg.metric,
            temperature: cfg.temperature,
        })
    }
}

/// `maps: B×C×H×W` → `B×C`.
pub fn pooled(g: &mut Graph, maps: Var) -> Result<Var> {
    g.global_avg_pool(maps)
}

/// Logits `−d` of shape `Q×N`.
///
/// `supports: N×K×C×H×W`, `queries: Q×C×H×W`, `task_weights: Q×N×C` (or
/// `None` for the unweighted head). The weighted prototype of class i for
/// query q is the mean over shots of `w_{q,i} ⊙ f`; because the weighting is
/// linear it is computed as `w_{q,i} ⊙ mean(f)`.
pub fn episode_logits(
    g: &mut Graph,
    cfg: &HeadConfig,
    supports: Var,
    queries: Var,
    task_weights: Option<Var>,
) -> Result<Var> {
    let ss = g.shape(supports).to_vec();
    let qs = g.shape(queries).to_vec();
    if ss.len() != 5 || qs.len() != 4 || ss[2..] != qs[1..] {
        return Err(Error::Shape {
            op: "episode_logits",
            lhs: ss,
            rhs: qs,
        });
    }
    let (n, k, c, h, w) = (ss[0], ss[1], ss[2], ss[3], ss[4]);
    let q = qs[0];
    if let Some(wt) = task_weights {
        if g.shape(wt) != [q, n, c] {
            return Err(Error::Shape {
                op: "episode_logits weights",
                lhs: g.shape(wt).to_vec(),
                rhs: vec![q, n, c],
            });
        }
    }
    // Embeddings with the channel axis at position 2 after broadcasting:
    // prototypes 1×N×C×…, queries Q×1×C×…, weights Q×N×C×1….
    let (protos, qemb, wt, feat) = match cfg.distance_on {
        DistanceOn::Pooled => {
            let flat = g.reshape(supports, &[n * k, c, h, w])?;
            let pooled_s = pooled(g, flat)?;
            let pooled_s = g.reshape(pooled_s, &[n, k, c])?;
            let p = g.mean_axes(pooled_s, &[1], false)?;
            let p = g.reshape(p, &[1, n, c])?;
            let qe = pooled(g, queries)?;
            let qe = g.reshape(qe, &[q, 1, c])?;
            (p, qe, task_weights, vec![2])
        }
        DistanceOn::Flattened => {
            let p = g.mean_axes(supports, &[1], false)?;
            let p = g.reshape(p, &[1, n, c, h, w])?;
            let qe = g.reshape(queries, &[q, 1, c, h, w])?;
            let wt = match task_weights {
                Some(v) => Some(g.reshape(v, &[q, n, c, 1, 1])?),
                None => None,
            };
            (p, qe, wt, vec![2, 3, 4])
        }
    };
    let weigh = |g: &mut Graph, x: Var| -> Result<Var> {
        match wt {
            Some(wv) => g.mul(x, wv),
            None => Ok(x),
        }
    };
    match cfg.metric {
        Metric::Euclidean => {
            let diff = g.sub(protos, qemb)?;
            let diff = weigh(g, diff)?;
            let d2 = g.square(diff);
            let d = g.sum_axes(d2, &feat, false)?;
            Ok(g.scale(d, -1.0))
        }
        Metric::Cosine => {
            let a = weigh(g, protos)?;
            let b = weigh(g, qemb)?;
            let dot = g.mul(a, b)?;
            let dot = g.sum_axes(dot, &feat, false)?;
            let na = norm(g, a, &feat)?;
            let nb = norm(g, b, &feat)?;
            check_nonzero(g.value(na), "prototype (class", ")")?;
            check_nonzero(g.value(nb), "query", "")?;
            let denom = g.mul(na, nb)?;
            let cos = g.div(dot, denom)?;
            // −τ·(1 − cos)
            let one = g.constant(Tensor::full(&vec![1; g.shape(cos).len()], 1.0));
            let gap = g.sub(one, cos)?;
            Ok(g.scale(gap, -cfg.temperature))
        }
    }
}

fn norm(g: &mut Graph, x: Var, feat: &[usize]) -> Result<Var> {
    let sq = g.square(x);
    let s = g.sum_axes(sq, feat, false)?;
    Ok(g.sqrt(s))
}

/// `norms` is `Q×N`, `1×N` or `Q×1`; names the first zero-norm row/column.
fn check_nonzero(norms: &Tensor, what: &str, close: &str) -> Result<()> {
    let cols = norms.shape()[1];
    if let Some(pos) = norms.data().iter().position(|&v| v == 0.0) {
        let (r, c) = (pos / cols, pos % cols);
        let idx = if norms.shape()[0] == 1 { c } else { r };
        return Err(Error::Invalid(format!(
            "cosine distance undefined: {what} {idx}{close} has a zero-norm embedding"
        )));
    }
    Ok(())
}

pub fn episode_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.softmax_cross_entropy(logits, labels)
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `scores: Q×N` whose argmax equals the label.
pub fn episode_accuracy(scores: &Tensor, labels: &[usize]) -> f64 {
    let n = scores.shape()[1];
    if labels.is_empty() {
        return 0.0;
    }
    let correct = scores
        .data()
        .chunks(n)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    correct as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    fn logits(cfg: &HeadConfig, s: &Tensor, q: &Tensor, w: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let sv = g.constant(s.clone());
        let qv = g.constant(q.clone());
        let wv = w.map(|t| g.constant(t.clone()));
        let l = episode_logits(&mut g, cfg, sv, qv, wv)?;
        Ok(g.value(l).clone())
    }

    #[test]
    fn pooled_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 2, 3, 3], |i| if i < 9 { 4.0 } else { -1.5 }));
        let p = pooled(&mut g, x).unwrap();
        assert_eq!(g.value(p).data(), &[4.0, -1.5]);
    }

    #[test]
    fn probabilities_examples() {
        let l = Tensor::new(vec![1, 3], vec![-0.7; 3]).unwrap();
        let e = EpisodeLogits::from_logits(&l, &HeadConfig::default()).unwrap();
        assert!(e.probabilities.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        let l = Tensor::new(vec![1, 2], vec![0.0, -(3.0f64).ln()]).unwrap();
        let e = EpisodeLogits::from_logits(&l, &HeadConfig::default()).unwrap();
        assert!((e.probabilities.data()[0] - 0.75).abs() < 1e-12);
        assert!((e.probabilities.data()[1] - 0.25).abs() < 1e-12);
        assert_eq!(e.distances.data()[1], (3.0f64).ln());
    }

    #[test]
    fn unit_weights_equal_unweighted_bitwise() {
        let mut rng = Rng::new(1);
        let s = random(&[3, 2, 4, 2, 2], &mut rng);
        let q = random(&[5, 4, 2, 2], &mut rng);
        let ones = Tensor::ones(&[5, 3, 4]);
        for metric in [Metric::Euclidean, Metric::Cosine] {
            for distance_on in [DistanceOn::Pooled, DistanceOn::Flattened] {
                let cfg = HeadConfig {
                    metric,
                    distance_on,
                    ..HeadConfig::default()
                };
                assert_eq!(logits(&cfg, &s, &q, Some(&ones)).unwrap(), logits(&cfg, &s, &q, None).unwrap());
            }
        }
    }

    #[test]
    fn euclidean_matches_pairwise_loop_and_is_symmetric() {
        let mut rng = Rng::new(2);
        let s = random(&[2, 1, 3, 2, 2], &mut rng);
        let q = random(&[2, 3, 2, 2], &mut rng);
        let l = logits(&HeadConfig::default(), &s, &q, None).unwrap();
        let pool = |t: &[f64]| -> Vec<f64> { t.chunks(4).map(|c| c.iter().sum::<f64>() / 4.0).collect() };
        for qi in 0..2 {
            for ci in 0..2 {
                let a = pool(&s.data()[ci * 12..(ci + 1) * 12]);
                let b = pool(&q.data()[qi * 12..(qi + 1) * 12]);
                let d: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
                let d_rev: f64 = b.iter().zip(&a).map(|(x, y)| (x - y).powi(2)).sum();
                assert_eq!(d, d_rev);
                assert!((l.at(&[qi, ci]) + d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let mut rng = Rng::new(3);
        let s = random(&[3, 1, 4, 2, 2], &mut rng);
        let q = random(&[2, 4, 2, 2], &mut rng);
        let cfg = HeadConfig {
            metric: Metric::Cosine,
            ..HeadConfig::default()
        };
        let base = softmax_rows(&logits(&cfg, &s, &q, None).unwrap()).unwrap();
        let scaled_q = q.map(|v| 3.7 * v);
        let scaled_s = s.map(|v| 0.2 * v);
        for (ss, qq) in [(&s, &scaled_q), (&scaled_s, &q)] {
            let p = softmax_rows(&logits(&cfg, ss, qq, None).unwrap()).unwrap();
            assert!(p.max_abs_diff(&base) < 1e-9);
        }
        let l = logits(&cfg, &s, &q, None).unwrap();
        assert!(l.data().iter().all(|&v| (-2.0 * cfg.temperature..=0.0).contains(&v)));
    }

    #[test]
    fn cosine_zero_norm_names_instance() {
        let mut rng = Rng::new(4);
        let s = random(&[2, 1, 3, 2, 2], &mut rng);
        let mut q = random(&[3, 3, 2, 2], &mut rng);
        q.data_mut()[12..24].fill(0.0);
        let cfg = HeadConfig {
            metric: Metric::Cosine,
            ..HeadConfig::default()
        };
        let err = logits(&cfg, &s, &q, None).unwrap_err().to_string();
        assert!(err.contains("query 1"), "{err}");
    }

    #[test]
    fn loss_examples() {
        let mut g = Graph::new();
        let uniform = g.param(Tensor::zeros(&[4, 5]));
        let loss = episode_loss(&mut g, uniform, &[0, 1, 2, 3]).unwrap();
        assert!((g.value(loss).data()[0] - 5f64.ln()).abs() < 1e-12);
        g.backward(loss).unwrap();
        // softmax − onehot, divided by the batch
        let grad = g.grad(uniform).unwrap();
        for r in 0..4 {
            for c in 0..5 {
                let want = (0.2 - if c == r { 1.0 } else { 0.0 }) / 4.0;
                assert!((grad.at(&[r, c]) - want).abs() < 1e-9);
            }
        }
        let mut g = Graph::new();
        let sure = g.constant(Tensor::new(vec![1, 2], vec![0.0, -60.0]).unwrap());
        let loss = episode_loss(&mut g, sure, &[0]).unwrap();
        assert!(g.value(loss).data()[0] < 1e-20);
    }

    #[test]
    fn accuracy_examples() {
        let l = Tensor::new(vec![2, 2], vec![0.0, -1.0, -2.0, -0.5]).unwrap();
        assert_eq!(episode_accuracy(&l, &[0, 1]), 1.0);
        assert_eq!(episode_accuracy(&l, &[0, 0]), 0.5);
        assert_eq!(episode_accuracy(&l.map(|v| v - 17.0), &[0, 0]), 0.5);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
