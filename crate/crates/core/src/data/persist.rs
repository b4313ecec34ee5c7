//! Dataset files: `images.tnsr` holds one container record per class
//! (instances×3×S×S) and `manifest.json` indexes them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate_synthetic, ClassRecord, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::numeric::{container, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: usize,
    pub name: String,
    pub count: usize,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub image_size: usize,
    pub classes: Vec<ClassEntry>,
    pub generator: Option<SynthConfig>,
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join("images.tnsr"))?);
    let mut offset = 0;
    let mut classes = Vec::with_capacity(ds.n_classes());
    for c in ds.classes() {
        let stacked = Tensor::stack(&c.instances.iter().collect::<Vec<_>>())?;
        let len = container::write_tensor(&mut w, &stacked)?;
        classes.push(ClassEntry {
            id: c.id,
            name: c.name.clone(),
            count: c.instances.len(),
            offset,
        });
        offset += len;
    }
    w.flush()?;
    let manifest = DatasetManifest {
        image_size: ds.image_size(),
        classes,
        generator: ds.synth_meta().map(|m| m.config.clone()),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads a saved dataset. Synthetic generator metadata is rebuilt from the
/// stored config when present.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut r = BufReader::new(File::open(dir.join("images.tnsr"))?);
    let mut classes = Vec::with_capacity(manifest.classes.len());
    for e in &manifest.classes {
        r.seek(SeekFrom::Start(e.offset))?;
        let t = container::read_tensor(&mut r)?;
        let s = manifest.image_size;
        if t.shape() != [e.count, 3, s, s] {
            return Err(Error::Format(format!(
                "class `{}`: expected {}×3×{s}×{s}, found {:?}",
                e.name,
                e.count,
                t.shape()
            )));
        }
        let instances = (0..e.count)
            .map(|i| t.narrow(i, i + 1)?.reshape(&[3, s, s]))
            .collect::<Result<Vec<_>>>()?;
        classes.push(ClassRecord {
            id: e.id,
            name: e.name.clone(),
            instances,
        });
    }
    let ds = Dataset::new(classes)?;
    match &manifest.generator {
        Some(cfg) => {
            let meta = generate_synthetic(cfg)?
                .synth_meta()
                .cloned()
                .expect("generated datasets carry metadata");
            Ok(ds.with_synth(meta))
        }
        None => Ok(ds),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_and_load_synthetic() {
        let cfg = SynthConfig {
            n_classes: 3,
            instances_per_class: 4,
            image_size: 12,
            patch_size: 3,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(m.classes.len(), 3);
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.classes(), ds.classes());
        assert_eq!(back.synth_meta().unwrap().config, cfg);
    }
}
