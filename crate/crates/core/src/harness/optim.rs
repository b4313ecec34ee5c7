use std::collections::BTreeMap;

use crate::error::Result;
use crate::numeric::Tensor;
use crate::params::ParamStore;

use super::config::OptimConfig;

/// SGD with classical momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·p)`, `p ← p − η·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(cfg: &OptimConfig) -> Self {
        Self {
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates only the parameters listed in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Tensor)]) -> Result<()> {
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_and_decay_by_hand() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap());
        let mut opt = Sgd::new(&OptimConfig {
            lr: 0.1,
            momentum: 0.5,
            weight_decay: 0.1,
            ..OptimConfig::default()
        });
        let g = vec![("w".to_string(), Tensor::new(vec![1], vec![2.0]).unwrap())];
        opt.step(&mut store, &g).unwrap();
        // v = 2 + 0.1 = 2.1, p = 1 − 0.21
        assert!((store.get("w").unwrap().data()[0] - 0.79).abs() < 1e-15);
        opt.step(&mut store, &g).unwrap();
        // v = 1.05 + 2 + 0.079 = 3.129, p = 0.79 − 0.3129
        assert!((store.get("w").unwrap().data()[0] - 0.4771).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let before = store.clone();
        let mut opt = Sgd::new(&OptimConfig {
            lr: 0.0,
            ..OptimConfig::default()
        });
        opt.step(&mut store, &[("w".into(), Tensor::ones(&[2]))]).unwrap();
        assert_eq!(store, before);
    }
}
