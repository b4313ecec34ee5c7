//! Datasets, class-disjoint splits and episode sampling.

mod augment;
mod episode;
mod folder;
mod persist;
mod split;
mod synth;

pub use augment::{augment, hflip, AugmentFlags};
pub use episode::{sample_episode, Episode, EpisodeItem};
pub use folder::{load_image_folder, parse_ppm, resize_bilinear, FolderLoad};
pub use persist::{load_dataset, save_dataset, DatasetManifest};
pub use split::{build_split, ClassSplit, SplitPart};
pub use synth::{generate_synthetic, Patch, SynthConfig, SynthMeta};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassRecord {
    pub id: usize,
    pub name: String,
    /// Images of shape 3×S×S.
    pub instances: Vec<Tensor>,
}

/// Labeled images grouped by class. Class ids equal their position.
#[derive(Clone, Debug)]
pub struct Dataset {
    classes: Vec<ClassRecord>,
    image_size: usize,
    synth: Option<SynthMeta>,
}

impl Dataset {
    pub fn new(classes: Vec<ClassRecord>) -> Result<Self> {
        let first = classes
            .iter()
            .flat_map(|c| c.instances.first())
            .next()
            .ok_or_else(|| Error::Data("dataset has no images".into()))?;
        let shape = first.shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
            return Err(Error::Data(format!("images must be 3×S×S, got {shape:?}")));
        }
        for (pos, c) in classes.iter().enumerate() {
            if c.id != pos {
                return Err(Error::Data(format!(
                    "class `{}` has id {} at position {pos}",
                    c.name, c.id
                )));
            }
            if c.instances.is_empty() {
                return Err(Error::Data(format!("class `{}` is empty", c.name)));
            }
            if let Some(bad) = c.instances.iter().find(|t| t.shape() != shape.as_slice()) {
                return Err(Error::Data(format!(
                    "class `{}` mixes image shapes {:?} and {shape:?}",
                    c.name,
                    bad.shape()
                )));
            }
        }
        Ok(Self {
            image_size: shape[1],
            classes,
            synth: None,
        })
    }

    pub(crate) fn with_synth(mut self, meta: SynthMeta) -> Self {
        self.synth = Some(meta);
        self
    }

    pub fn classes(&self) -> &[ClassRecord] {
        &self.classes
    }

    pub fn class(&self, id: usize) -> &ClassRecord {
        &self.classes[id]
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn image(&self, class_id: usize, instance: usize) -> &Tensor {
        &self.classes[class_id].instances[instance]
    }

    /// Generator metadata when the dataset is synthetic.
    pub fn synth_meta(&self) -> Option<&SynthMeta> {
        self.synth.as_ref()
    }

    pub fn min_instances(&self) -> usize {
        self.classes.iter().map(|c| c.instances.len()).min().unwrap_or(0)
    }
}

/// Per-channel mean and standard deviation over every pixel of every image.
pub(crate) fn channel_stats(images: &[&Tensor]) -> ([f64; 3], [f64; 3]) {
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut count = 0.0;
    for img in images {
        let plane = img.len() / 3;
        for c in 0..3 {
            for &v in &img.data()[c * plane..(c + 1) * plane] {
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        count += plane as f64;
    }
    let mut mean = [0.0; 3];
    let mut std = [1.0; 3];
    for c in 0..3 {
        mean[c] = sum[c] / count;
        let var = (sq[c] / count - mean[c] * mean[c]).max(0.0);
        std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
    }
    (mean, std)
}

pub(crate) fn normalize_in_place(img: &mut Tensor, mean: &[f64; 3], std: &[f64; 3]) {
    let plane = img.len() / 3;
    for c in 0..3 {
        for v in &mut img.data_mut()[c * plane..(c + 1) * plane] {
            *v = (*v - mean[c]) / std[c];
        }
    }
}

/// Constant images: class `c`, instance `j` is filled with `100·c + j`.
#[cfg(test)]
pub(crate) fn tiny_dataset(classes: usize, per_class: usize) -> Dataset {
    Dataset::new(
        (0..classes)
            .map(|id| ClassRecord {
                id,
                name: format!("c{id}"),
                instances: (0..per_class)
                    .map(|j| Tensor::full(&[3, 2, 2], (id * 100 + j) as f64))
                    .collect(),
            })
            .collect(),
    )
    .unwrap()
}
