//! Full episode forward pass: backbone (+ instance attention) → scores →
//! support/query attention → task weights → metric head.

use serde::{Deserialize, Serialize};

use crate::attention::{self, init_fc_block, TdmConfig};
use crate::backbone::{self, BackboneConfig};
use crate::data::{Dataset, Episode};
use crate::error::{Error, Result};
use crate::head::{self, HeadConfig};
use crate::numeric::{Graph, Mode, Rng, Tensor, Var};
use crate::params::{ForwardCtx, ParamStore};
use crate::scores;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub tdm: TdmConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.tdm.validate()?;
        if !(self.head.temperature > 0.0 && self.head.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.head.temperature
            )));
        }
        Ok(())
    }
}

/// Images and labels of one episode, supports class-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeBatch {
    pub n_way: usize,
    pub k_shot: usize,
    /// `N·K×3×S×S`
    pub support: Tensor,
    /// `Q×3×S×S`
    pub query: Tensor,
    pub query_labels: Vec<usize>,
}

impl EpisodeBatch {
    pub fn from_episode(ep: &Episode, ds: &Dataset) -> Result<Self> {
        Ok(Self {
            n_way: ep.n_way,
            k_shot: ep.k_shot,
            support: ep.support_images(ds)?,
            query: ep.query_images(ds)?,
            query_labels: ep.query_labels(),
        })
    }

    pub fn n_query(&self) -> usize {
        self.query.shape()[0]
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeForward {
    /// `Q×N` negative distances.
    pub logits: Var,
    pub w_intra: Option<Var>,
    pub w_inter: Option<Var>,
    pub w_support: Option<Var>,
    pub w_query: Option<Var>,
    /// `Q×N×C`
    pub w_task: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Every module's parameters are created regardless of the enabled flags,
    /// each from its own derived stream, so flag variants share one init.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(seed);
        let mut params = ParamStore::new();
        backbone::init_backbone(&mut params, &config.backbone, &mut root.derive(1));
        let c = config.backbone.width;
        init_fc_block(&mut params, "sam.intra", c, &mut root.derive(2));
        init_fc_block(&mut params, "sam.inter", c, &mut root.derive(3));
        init_fc_block(&mut params, "qam", c, &mut root.derive(4));
        Ok(Self { config, params })
    }

    pub fn context(&self, mode: Mode, graph: Graph) -> ForwardCtx<'_> {
        ForwardCtx::new(&self.params, mode, graph)
    }

    /// Backbone features of supports (`N×K×C×H×W`) and queries (`Q×C×H×W`),
    /// extracted as one batch.
    fn features(&self, ctx: &mut ForwardCtx, batch: &EpisodeBatch, iam: bool) -> Result<(Var, Var)> {
        let (n, k) = (batch.n_way, batch.k_shot);
        let nk = batch.support.shape()[0];
        if nk != n * k || nk == 0 {
            return Err(Error::Invalid(format!("{nk} support images for {n}-way {k}-shot")));
        }
        let q = batch.n_query();
        let images = Tensor::stack_rows(&[&batch.support, &batch.query])?;
        let x = ctx.graph.constant(images);
        let f = backbone::extract(ctx, &self.config.backbone, x, iam)?;
        let s = ctx.graph.shape(f).to_vec();
        let sup = ctx.graph.narrow(f, 0, nk)?;
        let sup = ctx.graph.reshape(sup, &[n, k, s[1], s[2], s[3]])?;
        let qry = ctx.graph.narrow(f, nk, nk + q)?;
        Ok((sup, qry))
    }

    pub fn forward(&self, ctx: &mut ForwardCtx, batch: &EpisodeBatch) -> Result<EpisodeForward> {
        let tdm = &self.config.tdm;
        let (sup, qry) = self.features(ctx, batch, tdm.iam)?;
        let (n, q, c) = (batch.n_way, batch.n_query(), ctx.graph.shape(qry)[1]);
        let sam_out = if tdm.sam {
            let protos = scores::prototypes(&mut ctx.graph, sup)?;
            Some(attention::sam(ctx, protos, tdm.alpha)?)
        } else {
            None
        };
        let w_query = if tdm.qam {
            Some(attention::qam(ctx, qry)?)
        } else {
            None
        };
        let w_support = sam_out.map(|s| s.w_support);
        let w_task = attention::compose_task_weights(&mut ctx.graph, w_support, w_query, tdm.beta, (q, n, c))?;
        let logits = head::episode_logits(&mut ctx.graph, &self.config.head, sup, qry, Some(w_task))?;
        Ok(EpisodeForward {
            logits,
            w_intra: sam_out.map(|s| s.w_intra),
            w_inter: sam_out.map(|s| s.w_inter),
            w_support,
            w_query,
            w_task,
        })
    }

    /// Unweighted prototype classifier on the plain backbone.
    pub fn protonet_logits(&self, ctx: &mut ForwardCtx, batch: &EpisodeBatch) -> Result<Var> {
        let (sup, qry) = self.features(ctx, batch, false)?;
        head::episode_logits(&mut ctx.graph, &self.config.head, sup, qry, None)
    }

    /// Eval-mode logits as a tensor.
    pub fn eval_logits(&self, batch: &EpisodeBatch, graph: Graph) -> Result<Tensor> {
        let mut ctx = self.context(Mode::Eval, graph);
        let out = self.forward(&mut ctx, batch)?;
        Ok(ctx.graph.value(out.logits).clone())
    }
}
