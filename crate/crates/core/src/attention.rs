//! FC blocks, support/query attention, task-weight composition and the
//! instance attention module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, Mode, Rng, Tensor, Var};
use crate::params::{fan_in_uniform, ForwardCtx, ParamStore};
use crate::scores;

/// Lower and upper bound of every regularized weight.
pub const WEIGHT_RANGE: (f64, f64) = (0.0, 2.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdmConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Half-width of the uniform train-time noise added to FC-block outputs.
    pub noise_half_width: f64,
    pub sam: bool,
    pub qam: bool,
    pub iam: bool,
}

impl Default for TdmConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            noise_half_width: 0.2,
            sam: true,
            qam: true,
            iam: false,
        }
    }
}

impl TdmConfig {
    pub fn baseline() -> Self {
        Self {
            sam: false,
            qam: false,
            iam: false,
            ..Self::default()
        }
    }

    pub fn with_flags(sam: bool, qam: bool, iam: bool) -> Self {
        Self {
            sam,
            qam,
            iam,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.noise_half_width >= 0.0 && self.noise_half_width.is_finite()) {
            return Err(Error::Config(format!(
                "noise_half_width must be finite and ≥ 0, got {}",
                self.noise_half_width
            )));
        }
        Ok(())
    }
}

/// Registers `prefix.fc1`, `prefix.bn`, `prefix.fc2` for a width-`c` block.
/// `fc2.bias` starts at zero so initial outputs sit near 1.
pub fn init_fc_block(store: &mut ParamStore, prefix: &str, c: usize, rng: &mut Rng) {
    store.insert(format!("{prefix}.fc1.weight"), fan_in_uniform(&[2 * c, c], c, rng));
    store.insert(format!("{prefix}.fc1.bias"), fan_in_uniform(&[2 * c], c, rng));
    store.insert_batchnorm(&format!("{prefix}.bn"), 2 * c);
    store.insert(format!("{prefix}.fc2.weight"), fan_in_uniform(&[c, 2 * c], 2 * c, rng));
    store.insert(format!("{prefix}.fc2.bias"), Tensor::zeros(&[c]));
}

/// Scores `B×C` → weights `B×C`: Linear → BN → ReLU → Linear → 1+tanh, then
/// (train mode with noise configured) uniform noise and a clamp to [0, 2].
pub fn fc_forward(ctx: &mut ForwardCtx, prefix: &str, scores: Var) -> Result<Var> {
    let width = ctx.store.get(&format!("{prefix}.fc1.weight"))?.shape()[1];
    let s = ctx.graph.shape(scores).to_vec();
    if s.len() != 2 || s[1] != width {
        return Err(Error::Shape {
            op: "fc_forward",
            lhs: s,
            rhs: vec![width],
        });
    }
    let w1 = ctx.param(&format!("{prefix}.fc1.weight"))?;
    let b1 = ctx.param(&format!("{prefix}.fc1.bias"))?;
    let h = ctx.graph.linear(scores, w1, b1)?;
    let h = ctx.batchnorm(h, &format!("{prefix}.bn"))?;
    let h = ctx.graph.relu(h);
    let w2 = ctx.param(&format!("{prefix}.fc2.weight"))?;
    let b2 = ctx.param(&format!("{prefix}.fc2.bias"))?;
    let o = ctx.graph.linear(h, w2, b2)?;
    let o = ctx.graph.one_plus_tanh(o);
    match (ctx.mode, ctx.noise.as_mut()) {
        (Mode::Train, Some(noise)) if noise.half_width > 0.0 => {
            let hw = noise.half_width;
            let noisy = ctx.graph.add_noise(o, &mut noise.rng, -hw, hw)?;
            ctx.graph.clamp(noisy, WEIGHT_RANGE.0, WEIGHT_RANGE.1)
        }
        _ => Ok(o),
    }
}

/// `a·x + (1 − a)·y`; endpoints return the selected operand's values exactly.
fn lerp(g: &mut Graph, a: f64, x: Var, y: Var) -> Result<Var> {
    let xs = g.scale(x, a);
    let ys = g.scale(y, 1.0 - a);
    g.add(xs, ys)
}

#[derive(Clone, Copy, Debug)]
pub struct SamOutput {
    pub w_intra: Var,
    pub w_inter: Var,
    pub w_support: Var,
}

/// Support attention over prototypes `N×C×H×W` (one batch of N rows per block).
pub fn sam(ctx: &mut ForwardCtx, protos: Var, alpha: f64) -> Result<SamOutput> {
    let intra = scores::intra_scores(&mut ctx.graph, protos)?;
    let inter = scores::inter_scores(&mut ctx.graph, protos)?;
    let w_intra = fc_forward(ctx, "sam.intra", intra)?;
    let w_inter = fc_forward(ctx, "sam.inter", inter)?;
    let w_support = lerp(&mut ctx.graph, alpha, w_intra, w_inter)?;
    Ok(SamOutput {
        w_intra,
        w_inter,
        w_support,
    })
}

/// Query attention: `Q×C×H×W` → `Q×C`.
pub fn qam(ctx: &mut ForwardCtx, queries: Var) -> Result<Var> {
    let intra = scores::intra_scores(&mut ctx.graph, queries)?;
    fc_forward(ctx, "qam", intra)
}

/// Task weights `Q×N×C` from support weights `N×C` and query weights `Q×C`.
/// A disabled module (`None`) contributes all-ones; with both disabled the
/// result is all-ones.
pub fn compose_task_weights(
    g: &mut Graph,
    w_support: Option<Var>,
    w_query: Option<Var>,
    beta: f64,
    (q, n, c): (usize, usize, usize),
) -> Result<Var> {
    if w_support.is_none() && w_query.is_none() {
        return Ok(g.constant(Tensor::ones(&[q, n, c])));
    }
    let ws = match w_support {
        Some(v) => g.reshape(v, &[1, n, c])?,
        None => g.constant(Tensor::ones(&[1, n, c])),
    };
    let wq = match w_query {
        Some(v) => g.reshape(v, &[q, 1, c])?,
        None => g.constant(Tensor::ones(&[q, 1, c])),
    };
    let wt = lerp(g, beta, ws, wq)?;
    // β = 1 leaves the query axis at extent 1; expand so the shape is fixed.
    if g.shape(wt)[0] != q {
        let ones = g.constant(Tensor::ones(&[q, 1, 1]));
        return g.mul(wt, ones);
    }
    if g.shape(wt)[1] != n {
        let ones = g.constant(Tensor::ones(&[1, n, 1]));
        return g.mul(wt, ones);
    }
    Ok(wt)
}

/// `supports: N×K×C×H×W` scaled per class by `task_weights: N×C`.
pub fn apply_to_support(g: &mut Graph, supports: Var, task_weights: Var) -> Result<Var> {
    let s = g.shape(supports).to_vec();
    if s.len() != 5 || g.shape(task_weights) != [s[0], s[2]] {
        return Err(Error::Shape {
            op: "apply_to_support",
            lhs: s,
            rhs: g.shape(task_weights).to_vec(),
        });
    }
    let w = g.reshape(task_weights, &[s[0], 1, s[2], 1, 1])?;
    g.mul(supports, w)
}

/// One query map `C×H×W` → `N×C×H×W`, copy `i` scaled by `task_weights[i]`.
pub fn apply_to_query(g: &mut Graph, query: Var, task_weights: Var) -> Result<Var> {
    let s = g.shape(query).to_vec();
    let ws = g.shape(task_weights).to_vec();
    if s.len() != 3 || ws.len() != 2 || ws[1] != s[0] {
        return Err(Error::Shape {
            op: "apply_to_query",
            lhs: s,
            rhs: ws,
        });
    }
    let q = g.reshape(query, &[1, s[0], s[1], s[2]])?;
    let w = g.reshape(task_weights, &[ws[0], ws[1], 1, 1])?;
    g.mul(q, w)
}

/// Instance attention on an intermediate activation `B×C×H×W`: per-instance
/// intra scores → FC block → channel scaling.
pub fn iam_forward(ctx: &mut ForwardCtx, prefix: &str, x: Var) -> Result<Var> {
    let (w, _) = iam_weights(ctx, prefix, x)?;
    Ok(w)
}

/// Like [`iam_forward`] but also returns the `B×C` weight vectors.
pub fn iam_weights(ctx: &mut ForwardCtx, prefix: &str, x: Var) -> Result<(Var, Var)> {
    let s = ctx.graph.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::Shape {
            op: "iam_forward",
            lhs: s,
            rhs: vec![4],
        });
    }
    let intra = scores::intra_scores(&mut ctx.graph, x)?;
    let w = fc_forward(ctx, prefix, intra)?;
    let w4 = ctx.graph.reshape(w, &[s[0], s[1], 1, 1])?;
    Ok((ctx.graph.mul(x, w4)?, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::NoiseSpec;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    fn block(c: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        for p in ["sam.intra", "sam.inter", "qam", "iam"] {
            init_fc_block(&mut store, p, c, &mut rng);
        }
        store
    }

    fn randomize_fc2_bias(store: &mut ParamStore, rng: &mut Rng) {
        for p in ["sam.intra", "sam.inter", "qam", "iam"] {
            let b = store.get_mut(&format!("{p}.fc2.bias")).unwrap();
            *b = Tensor::from_fn(b.shape(), |_| 3.0 * rng.normal());
        }
    }

    fn run_fc(store: &ParamStore, x: &Tensor, mode: Mode, noise: Option<NoiseSpec>) -> Result<Tensor> {
        let mut ctx = ForwardCtx::new(store, mode, Graph::new()).with_noise(noise);
        let v = ctx.graph.constant(x.clone());
        let o = fc_forward(&mut ctx, "qam", v)?;
        Ok(ctx.graph.value(o).clone())
    }

    fn zero_fc2(store: &mut ParamStore, prefix: &str) {
        for s in ["weight", "bias"] {
            let t = store.get_mut(&format!("{prefix}.fc2.{s}")).unwrap();
            *t = Tensor::zeros(t.shape());
        }
    }

    #[test]
    fn zeroed_second_layer_gives_exact_ones() {
        let mut store = block(4, 1);
        zero_fc2(&mut store, "qam");
        let x = random(&[3, 4], &mut Rng::new(2));
        let o = run_fc(&store, &x, Mode::Eval, None).unwrap();
        assert!(o.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn eval_range_is_open_interval_and_train_range_closed() {
        let mut rng = Rng::new(3);
        let mut store = block(5, 3);
        randomize_fc2_bias(&mut store, &mut rng);
        let x = random(&[6, 5], &mut rng).map(|v| 10.0 * v);
        let eval = run_fc(&store, &x, Mode::Eval, None).unwrap();
        assert!(eval.data().iter().all(|&v| v > 0.0 && v < 2.0));
        let noise = || {
            Some(NoiseSpec {
                rng: Rng::new(11),
                half_width: 0.2,
            })
        };
        let a = run_fc(&store, &x, Mode::Train, noise()).unwrap();
        let b = run_fc(&store, &x, Mode::Train, noise()).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.0..=2.0).contains(&v)));
    }

    #[test]
    fn width_mismatch_fails() {
        let store = block(4, 1);
        assert!(run_fc(&store, &Tensor::zeros(&[2, 5]), Mode::Eval, None).is_err());
    }

    fn sam_out(store: &ParamStore, protos: &Tensor, alpha: f64) -> (Tensor, Tensor, Tensor) {
        let mut ctx = ForwardCtx::new(store, Mode::Eval, Graph::new());
        let p = ctx.graph.constant(protos.clone());
        let out = sam(&mut ctx, p, alpha).unwrap();
        let v = |x| ctx.graph.value(x).clone();
        (v(out.w_intra), v(out.w_inter), v(out.w_support))
    }

    #[test]
    fn sam_alpha_endpoints() {
        let mut rng = Rng::new(4);
        let store = block(3, 4);
        let protos = random(&[4, 3, 2, 2], &mut rng);
        let (wi, _, ws) = sam_out(&store, &protos, 1.0);
        assert_eq!(ws, wi);
        let (_, we, ws) = sam_out(&store, &protos, 0.0);
        assert_eq!(ws, we);
        let (wi, we, ws) = sam_out(&store, &protos, 0.5);
        for ((a, b), s) in wi.data().iter().zip(we.data()).zip(ws.data()) {
            assert_eq!(*s, 0.5 * a + 0.5 * b);
        }
    }

    #[test]
    fn sam_needs_two_classes() {
        let store = block(3, 4);
        let mut ctx = ForwardCtx::new(&store, Mode::Eval, Graph::new());
        let p = ctx.graph.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let err = sam(&mut ctx, p, 0.5).unwrap_err().to_string();
        assert!(err.contains("empty"), "{err}");
    }

    #[test]
    fn qam_examples() {
        let mut rng = Rng::new(5);
        let store = block(3, 5);
        let constant = Tensor::full(&[1, 3, 2, 2], 0.7);
        let mut ctx = ForwardCtx::new(&store, Mode::Eval, Graph::new());
        let q = ctx.graph.constant(constant);
        let w = qam(&mut ctx, q).unwrap();
        let zeros = run_fc(&store, &Tensor::zeros(&[1, 3]), Mode::Eval, None).unwrap();
        assert_eq!(ctx.graph.value(w), &zeros);

        let one = random(&[3, 2, 2], &mut rng);
        let two = Tensor::stack(&[&one, &one]).unwrap();
        let mut ctx = ForwardCtx::new(&store, Mode::Eval, Graph::new());
        let q = ctx.graph.constant(two);
        let w = qam(&mut ctx, q).unwrap();
        let w = ctx.graph.value(w);
        assert_eq!(w.data()[..3], w.data()[3..]);
        let by_hand = run_fc(
            &store,
            &Tensor::new(vec![1, 3], scores::intra_scores_map(&one).unwrap()).unwrap(),
            Mode::Eval,
            None,
        )
        .unwrap();
        assert!(Tensor::new(vec![1, 3], w.data()[..3].to_vec()).unwrap().max_abs_diff(&by_hand) < 1e-12);
    }

    fn compose(ws: Option<&Tensor>, wq: Option<&Tensor>, beta: f64, dims: (usize, usize, usize)) -> Tensor {
        let mut g = Graph::new();
        let s = ws.map(|t| g.constant(t.clone()));
        let q = wq.map(|t| g.constant(t.clone()));
        let out = compose_task_weights(&mut g, s, q, beta, dims).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn task_weight_endpoints_and_ablation() {
        let mut rng = Rng::new(6);
        let ws = Tensor::from_fn(&[3, 4], |_| rng.uniform(0.0, 2.0));
        let wq = Tensor::from_fn(&[2, 4], |_| rng.uniform(0.0, 2.0));
        let t = compose(Some(&ws), Some(&wq), 1.0, (2, 3, 4));
        assert_eq!(t.shape(), &[2, 3, 4]);
        for q in 0..2 {
            assert_eq!(&t.data()[q * 12..(q + 1) * 12], ws.data());
        }
        let t = compose(Some(&ws), Some(&wq), 0.0, (2, 3, 4));
        for q in 0..2 {
            for i in 0..3 {
                assert_eq!(&t.data()[(q * 3 + i) * 4..(q * 3 + i + 1) * 4], &wq.data()[q * 4..(q + 1) * 4]);
            }
        }
        let t = compose(None, None, 0.5, (2, 3, 4));
        assert!(t.data().iter().all(|&v| v == 1.0));
        let t = compose(None, Some(&wq), 0.5, (2, 3, 4));
        assert_eq!(t.at(&[1, 2, 3]), 0.5 + 0.5 * wq.at(&[1, 3]));
    }

    #[test]
    fn apply_examples() {
        let mut rng = Rng::new(7);
        let sup = random(&[2, 3, 4, 2, 2], &mut rng);
        let mut g = Graph::new();
        let s = g.constant(sup.clone());
        let ones = g.constant(Tensor::ones(&[2, 4]));
        let twos = g.constant(Tensor::full(&[2, 4], 2.0));
        let a = apply_to_support(&mut g, s, ones).unwrap();
        assert_eq!(g.value(a), &sup);
        let b = apply_to_support(&mut g, s, twos).unwrap();
        assert_eq!(g.value(b), &sup.map(|v| 2.0 * v));

        let query = random(&[4, 2, 2], &mut rng);
        let q = g.constant(query.clone());
        let same = g.constant(Tensor::from_fn(&[3, 4], |i| (i % 4) as f64 + 0.5));
        let out = apply_to_query(&mut g, q, same).unwrap();
        let out = g.value(out).clone();
        assert_eq!(out.shape(), &[3, 4, 2, 2]);
        assert_eq!(out.data()[..16], out.data()[16..32]);
        let mut w0 = Tensor::ones(&[3, 4]);
        w0.data_mut()[..4].fill(0.0);
        let w0 = g.constant(w0);
        let out = apply_to_query(&mut g, q, w0).unwrap();
        assert!(g.value(out).data()[..16].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weight_application_is_linear() {
        let mut rng = Rng::new(8);
        let f1 = random(&[2, 1, 3, 2, 2], &mut rng);
        let f2 = random(&[2, 1, 3, 2, 2], &mut rng);
        let w = Tensor::from_fn(&[2, 3], |_| rng.uniform(0.0, 2.0));
        let mut g = Graph::new();
        let (a, b, wv) = (g.constant(f1), g.constant(f2), g.constant(w));
        let sum = g.add(a, b).unwrap();
        let lhs = apply_to_support(&mut g, sum, wv).unwrap();
        let x = apply_to_support(&mut g, a, wv).unwrap();
        let y = apply_to_support(&mut g, b, wv).unwrap();
        let rhs = g.add(x, y).unwrap();
        assert!(g.value(lhs).max_abs_diff(g.value(rhs)) < 1e-12);
    }

    #[test]
    fn iam_identity_and_instance_independence() {
        let mut rng = Rng::new(9);
        let mut store = block(3, 9);
        let x = random(&[2, 3, 4, 4], &mut rng);
        let run = |store: &ParamStore, x: &Tensor| {
            let mut ctx = ForwardCtx::new(store, Mode::Eval, Graph::new());
            let v = ctx.graph.constant(x.clone());
            let y = iam_forward(&mut ctx, "iam", v).unwrap();
            ctx.graph.value(y).clone()
        };
        let both = run(&store, &x);
        for b in 0..2 {
            let alone = run(&store, &x.narrow(b, b + 1).unwrap());
            assert_eq!(alone.data(), &both.data()[b * 48..(b + 1) * 48]);
        }
        zero_fc2(&mut store, "iam");
        assert_eq!(run(&store, &x), x);
    }

    #[test]
    fn every_block_gets_gradient() {
        let mut rng = Rng::new(10);
        let mut store = block(3, 10);
        randomize_fc2_bias(&mut store, &mut rng);
        let protos = random(&[3, 3, 2, 2], &mut rng);
        let queries = random(&[4, 3, 2, 2], &mut rng);
        let mut ctx = ForwardCtx::new(&store, Mode::Train, Graph::new()).trainable(true);
        let p = ctx.graph.constant(protos);
        let q = ctx.graph.constant(queries);
        let q = iam_forward(&mut ctx, "iam", q).unwrap();
        let s = sam(&mut ctx, p, 0.5).unwrap();
        let wq = qam(&mut ctx, q).unwrap();
        let wt = compose_task_weights(&mut ctx.graph, Some(s.w_support), Some(wq), 0.5, (4, 3, 3)).unwrap();
        let probe = ctx.graph.constant(random(&[4, 3, 3], &mut rng));
        let y = ctx.graph.mul(wt, probe).unwrap();
        let root = ctx.graph.sum_all(y).unwrap();
        ctx.graph.backward(root).unwrap();
        for (name, grad) in ctx.gradients() {
            if name.ends_with("weight") {
                assert!(grad.l2_norm() > 0.0, "{name} has zero gradient");
            }
        }
    }
}
