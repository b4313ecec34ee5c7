//! Channel representativeness scores and the channel-variance diagnostic.
//!
//! Graph-level functions take batched maps so that gradients reach the
//! backbone; the `*_map` wrappers evaluate single tensors.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};

fn expect_rank(g: &Graph, x: Var, rank: usize, op: &'static str) -> Result<Vec<usize>> {
    let s = g.shape(x).to_vec();
    if s.len() != rank {
        return Err(Error::Shape {
            op,
            lhs: s,
            rhs: vec![rank],
        });
    }
    Ok(s)
}

/// `supports: N×K×C×H×W` → `N×C×H×W`, the mean over the K shots.
pub fn prototypes(g: &mut Graph, supports: Var) -> Result<Var> {
    let s = expect_rank(g, supports, 5, "prototype")?;
    if s[1] == 0 {
        return Err(Error::Invalid("prototype of zero support maps".into()));
    }
    g.mean_axes(supports, &[1], false)
}

/// `maps: B×C×H×W` → `B×1×H×W`, the channel mean.
pub fn mean_spatial(g: &mut Graph, maps: Var) -> Result<Var> {
    expect_rank(g, maps, 4, "mean_spatial")?;
    g.mean_axes(maps, &[1], true)
}

/// `maps: B×C×H×W` → `B×C`, `(1/HW)·‖f_c − M‖²` per map and channel.
pub fn intra_scores(g: &mut Graph, maps: Var) -> Result<Var> {
    let m = mean_spatial(g, maps)?;
    let d = g.sub(maps, m)?;
    let d2 = g.square(d);
    g.mean_axes(d2, &[2, 3], false)
}

/// `protos: N×C×H×W` → `N×C`, `(1/HW)·min_{j≠i} ‖f^P_{i,c} − M^P_j‖²`.
pub fn inter_scores(g: &mut Graph, protos: Var) -> Result<Var> {
    let s = expect_rank(g, protos, 4, "inter_scores")?;
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if n < 2 {
        return Err(Error::Invalid(
            "inter scores need at least two classes (minimum over other classes is empty)".into(),
        ));
    }
    let m = mean_spatial(g, protos)?;
    let p5 = g.reshape(protos, &[n, 1, c, h, w])?;
    let m5 = g.reshape(m, &[1, n, 1, h, w])?;
    let d = g.sub(p5, m5)?;
    let d2 = g.square(d);
    let all = g.mean_axes(d2, &[3, 4], false)?;
    g.min_off_diagonal(all)
}

fn eval1(map: &Tensor, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(map.clone());
    let y = f(&mut g, x)?;
    Ok(g.value(y).clone())
}

fn batch1(map: &Tensor) -> Result<Tensor> {
    let mut s = vec![1];
    s.extend_from_slice(map.shape());
    map.reshape(&s)
}

/// Prototype of K maps of equal shape.
pub fn prototype_map(maps: &[Tensor]) -> Result<Tensor> {
    if maps.is_empty() {
        return Err(Error::Invalid("prototype of zero support maps".into()));
    }
    let stacked = Tensor::stack(&maps.iter().collect::<Vec<_>>())?;
    let mut s = vec![1];
    s.extend_from_slice(stacked.shape());
    let out = eval1(&stacked.reshape(&s)?, prototypes)?;
    out.reshape(maps[0].shape())
}

/// Mean spatial map (H×W) of one C×H×W map.
pub fn mean_spatial_map(map: &Tensor) -> Result<Tensor> {
    let s = map.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::Invalid(format!("expected C×H×W, got {s:?}")));
    }
    eval1(&batch1(map)?, mean_spatial)?.reshape(&s[1..])
}

/// Intra scores (length C) of one C×H×W map.
pub fn intra_scores_map(map: &Tensor) -> Result<Vec<f64>> {
    Ok(eval1(&batch1(map)?, intra_scores)?.into_data())
}

/// Inter scores of prototype `class_index` against the others.
pub fn inter_scores_map(protos: &[Tensor], class_index: usize) -> Result<Vec<f64>> {
    if class_index >= protos.len() {
        return Err(Error::Invalid(format!(
            "class index {class_index} out of range for {} prototypes",
            protos.len()
        )));
    }
    let stacked = Tensor::stack(&protos.iter().collect::<Vec<_>>())?;
    let all = eval1(&stacked, inter_scores)?;
    let c = all.shape()[1];
    Ok(all.data()[class_index * c..(class_index + 1) * c].to_vec())
}

/// Per-class channel statistics of spatially averaged activations.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceReport {
    pub class_ids: Vec<usize>,
    pub counts: Vec<usize>,
    /// `mean[i][c]`: average over the class's instances of the pooled activation.
    pub mean: Vec<Vec<f64>>,
    /// `variance[i][c]`: population variance of the pooled activation.
    pub variance: Vec<Vec<f64>>,
}

impl VarianceReport {
    pub fn max_variance(&self) -> f64 {
        self.variance.iter().flatten().copied().fold(0.0, f64::max)
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "class_id,channel,mean,variance")?;
        for (i, id) in self.class_ids.iter().enumerate() {
            for (c, (m, v)) in self.mean[i].iter().zip(&self.variance[i]).enumerate() {
                writeln!(w, "{id},{c},{m},{v}")?;
            }
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

/// `groups[i]` holds class `class_ids[i]`'s maps as a `J_i×C×H×W` tensor.
pub fn variance_report(class_ids: &[usize], groups: &[Tensor]) -> Result<VarianceReport> {
    if class_ids.len() != groups.len() {
        return Err(Error::Invalid(format!(
            "{} class ids for {} groups",
            class_ids.len(),
            groups.len()
        )));
    }
    let mut report = VarianceReport {
        class_ids: class_ids.to_vec(),
        counts: Vec::new(),
        mean: Vec::new(),
        variance: Vec::new(),
    };
    for (id, group) in class_ids.iter().zip(groups) {
        let s = group.shape();
        if s.len() != 4 || s[0] == 0 {
            return Err(Error::Invalid(format!("class {id}: expected nonempty J×C×H×W, got {s:?}")));
        }
        let (j, c, hw) = (s[0], s[1], s[2] * s[3]);
        let pooled: Vec<Vec<f64>> = (0..j)
            .map(|n| {
                (0..c)
                    .map(|ch| group.data()[(n * c + ch) * hw..(n * c + ch + 1) * hw].iter().sum::<f64>() / hw as f64)
                    .collect()
            })
            .collect();
        let mean: Vec<f64> = (0..c).map(|ch| pooled.iter().map(|p| p[ch]).sum::<f64>() / j as f64).collect();
        // Shifted by the first instance, so identical instances give exactly 0.
        let var = (0..c)
            .map(|ch| {
                let d: Vec<f64> = pooled.iter().map(|p| p[ch] - pooled[0][ch]).collect();
                let m = d.iter().sum::<f64>() / j as f64;
                (d.iter().map(|x| x * x).sum::<f64>() / j as f64 - m * m).max(0.0)
            })
            .collect();
        report.counts.push(j);
        report.mean.push(mean);
        report.variance.push(var);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn prototype_examples() {
        let m = random(&[2, 3, 3], &mut Rng::new(1));
        // Powers of two are exact; K = 3 rounds in the last place.
        assert_eq!(prototype_map(&[m.clone(), m.clone()]).unwrap(), m);
        assert_eq!(prototype_map(&vec![m.clone(); 4]).unwrap(), m);
        assert!(prototype_map(&vec![m.clone(); 3]).unwrap().max_abs_diff(&m) < 1e-15);
        let p = prototype_map(&[Tensor::full(&[2, 2, 2], 1.0), Tensor::full(&[2, 2, 2], 3.0)]).unwrap();
        assert!(p.data().iter().all(|&v| v == 2.0));
        assert!(prototype_map(&[]).is_err());
    }

    #[test]
    fn mean_spatial_examples() {
        let one = random(&[1, 3, 2], &mut Rng::new(2));
        assert_eq!(mean_spatial_map(&one).unwrap().data(), one.data());
        let two = t(&[2, 1, 2], &[1.0, 1.0, 3.0, 3.0]);
        assert_eq!(mean_spatial_map(&two).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn intra_examples() {
        let same = Tensor::from_fn(&[4, 2, 2], |i| (i % 4) as f64);
        assert!(intra_scores_map(&same).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(intra_scores_map(&t(&[2, 1, 1], &[1.0, 3.0])).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn inter_examples() {
        let p1 = t(&[2, 1, 1], &[1.0, 3.0]);
        let p2 = t(&[2, 1, 1], &[5.0, 7.0]);
        assert_eq!(inter_scores_map(&[p1.clone(), p2], 0).unwrap(), vec![25.0, 9.0]);
        let p = random(&[3, 2, 2], &mut Rng::new(4));
        let inter = inter_scores_map(&[p.clone(), p.clone()], 0).unwrap();
        let intra = intra_scores_map(&p).unwrap();
        for (a, b) in inter.iter().zip(&intra) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(inter_scores_map(&[p1], 0).is_err());
    }

    #[test]
    fn variance_examples() {
        let one = random(&[1, 3, 2, 2], &mut Rng::new(5));
        let r = variance_report(&[7], &[one]).unwrap();
        assert_eq!(r.max_variance(), 0.0);
        // pooled values 1 and 3 on the single channel
        let two = t(&[2, 1, 1, 2], &[1.0, 1.0, 3.0, 3.0]);
        let r = variance_report(&[0], &[two]).unwrap();
        assert_eq!(r.mean[0], vec![2.0]);
        assert_eq!(r.variance[0], vec![1.0]);
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "class_id,channel,mean,variance\n0,0,2,1\n");
    }

    #[test]
    fn identical_instances_have_exactly_zero_variance() {
        let map = random(&[1, 5, 3, 3], &mut Rng::new(9));
        for j in [3, 7, 11] {
            let group = Tensor::stack_rows(&vec![&map; j]).unwrap();
            let r = variance_report(&[0], &[group]).unwrap();
            assert_eq!(r.max_variance(), 0.0, "J = {j}");
        }
    }

    #[test]
    fn gradients_flow_through_scores() {
        let mut rng = Rng::new(6);
        let mut g = Graph::new();
        let x = g.param(random(&[3, 4, 2, 2], &mut rng));
        let intra = intra_scores(&mut g, x).unwrap();
        let inter = inter_scores(&mut g, x).unwrap();
        let s = g.add(intra, inter).unwrap();
        let root = g.sum_all(s).unwrap();
        g.backward(root).unwrap();
        assert!(g.grad(x).unwrap().l2_norm() > 0.0);
    }

    fn map_strategy() -> impl Strategy<Value = (usize, usize, usize, u64)> {
        (1usize..=8, 1usize..=4, 1usize..=4, any::<u64>())
    }

    proptest! {
        #[test]
        fn scores_are_nonnegative_and_shift_invariant((c, h, w, seed) in map_strategy(), k in -5.0f64..5.0) {
            let m = random(&[c, h, w], &mut Rng::new(seed));
            let s = intra_scores_map(&m).unwrap();
            prop_assert!(s.iter().all(|&v| v >= 0.0));
            let shifted = intra_scores_map(&m.map(|v| v + k)).unwrap();
            for (a, b) in s.iter().zip(&shifted) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn intra_scale_law((c, h, w, seed) in map_strategy(), lambda in -3.0f64..3.0) {
            let m = random(&[c, h, w], &mut Rng::new(seed));
            let s = intra_scores_map(&m).unwrap();
            let scaled = intra_scores_map(&m.map(|v| v * lambda)).unwrap();
            for (a, b) in s.iter().zip(&scaled) {
                prop_assert!((a * lambda * lambda - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn inter_is_a_lower_bound((c, h, w, seed) in map_strategy(), n in 2usize..5) {
            let mut rng = Rng::new(seed);
            let protos: Vec<Tensor> = (0..n).map(|_| random(&[c, h, w], &mut rng)).collect();
            let means: Vec<Tensor> = protos.iter().map(|p| mean_spatial_map(p).unwrap()).collect();
            for i in 0..n {
                let inter = inter_scores_map(&protos, i).unwrap();
                for (_, mj) in means.iter().enumerate().filter(|&(j, _)| j != i) {
                    for ch in 0..c {
                        let d: f64 = (0..h * w)
                            .map(|p| (protos[i].data()[ch * h * w + p] - mj.data()[p]).powi(2))
                            .sum::<f64>() / (h * w) as f64;
                        prop_assert!(inter[ch] <= d + 1e-12);
                    }
                }
            }
        }
    }
}
