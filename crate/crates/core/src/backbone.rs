//! Conv-4 feature extractor: four blocks of conv3×3 → BN → ReLU → maxpool2,
//! with optional instance attention after selected blocks.

use serde::{Deserialize, Serialize};

use crate::attention::{init_fc_block, iam_forward};
use crate::error::{Error, Result};
use crate::numeric::{Rng, Var};
use crate::params::{fan_in_uniform, ForwardCtx, ParamStore};

pub const BLOCKS: usize = 4;
pub const MIN_IMAGE_SIZE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Filters per block.
    pub width: usize,
    /// Zero-based blocks followed by an instance attention module.
    pub iam_blocks: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            iam_blocks: vec![0, 1],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("backbone width must be positive".into()));
        }
        if let Some(b) = self.iam_blocks.iter().find(|&&b| b >= BLOCKS) {
            return Err(Error::Config(format!("iam block {b} does not exist (blocks 0..{BLOCKS})")));
        }
        Ok(())
    }

    /// Spatial extent of the output for an S×S input.
    pub fn output_size(image_size: usize) -> usize {
        (0..BLOCKS).fold(image_size, |s, _| s / 2)
    }
}

pub fn block_prefix(i: usize) -> String {
    format!("backbone.block{i}")
}

pub fn iam_prefix(i: usize) -> String {
    format!("iam.block{i}")
}

pub fn init_backbone(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut Rng) {
    let c = cfg.width;
    for i in 0..BLOCKS {
        let cin = if i == 0 { 3 } else { c };
        let p = block_prefix(i);
        store.insert(format!("{p}.conv.weight"), fan_in_uniform(&[c, cin, 3, 3], cin * 9, rng));
        store.insert(format!("{p}.conv.bias"), fan_in_uniform(&[c], cin * 9, rng));
        store.insert_batchnorm(&format!("{p}.bn"), c);
    }
    for &i in &cfg.iam_blocks {
        init_fc_block(store, &iam_prefix(i), c, rng);
    }
}

/// `images: B×3×S×S` → `B×C×S'×S'` with `S' = S` halved (floor) four times.
pub fn extract(ctx: &mut ForwardCtx, cfg: &BackboneConfig, images: Var, iam_enabled: bool) -> Result<Var> {
    let s = ctx.graph.shape(images).to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Shape {
            op: "extract",
            lhs: s,
            rhs: vec![0, 3, 0, 0],
        });
    }
    if s[2].min(s[3]) < MIN_IMAGE_SIZE {
        return Err(Error::Invalid(format!(
            "images of {}×{} are too small; four poolings need at least {MIN_IMAGE_SIZE}",
            s[2], s[3]
        )));
    }
    let mut x = images;
    for i in 0..BLOCKS {
        let p = block_prefix(i);
        let k = ctx.param(&format!("{p}.conv.weight"))?;
        let b = ctx.param(&format!("{p}.conv.bias"))?;
        x = ctx.graph.conv2d(x, k, b)?;
        x = ctx.batchnorm(x, &format!("{p}.bn"))?;
        x = ctx.graph.relu(x);
        x = ctx.graph.maxpool2(x)?;
        if iam_enabled && cfg.iam_blocks.contains(&i) {
            x = iam_forward(ctx, &iam_prefix(i), x)?;
        }
    }
    Ok(x)
}
