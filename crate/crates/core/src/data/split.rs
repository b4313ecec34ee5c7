use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::numeric::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

/// Disjoint class-id sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub train_class_ids: Vec<usize>,
    pub val_class_ids: Vec<usize>,
    pub test_class_ids: Vec<usize>,
}

impl ClassSplit {
    pub fn part(&self, p: SplitPart) -> &[usize] {
        match p {
            SplitPart::Train => &self.train_class_ids,
            SplitPart::Val => &self.val_class_ids,
            SplitPart::Test => &self.test_class_ids,
        }
    }

    pub fn is_disjoint(&self) -> bool {
        let mut all: Vec<usize> = self
            .train_class_ids
            .iter()
            .chain(&self.val_class_ids)
            .chain(&self.test_class_ids)
            .copied()
            .collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        all.len() == n
    }
}

/// Shuffles the class ids with `seed` and cuts them by rounded fractions.
///
/// Train gets `round(f_train·n)` classes, val `round(f_val·n)`, test the
/// remainder. An empty train part is rejected, as is an empty part whose
/// fraction was positive.
pub fn build_split(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<ClassSplit> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "split fractions must be in [0,1] and sum to 1, got {fractions:?}"
        )));
    }
    let n = dataset.n_classes();
    if n < 3 {
        return Err(Error::Data(format!("need at least 3 classes to split, have {n}")));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut ids);
    let n_train = ((ft * n as f64).round() as usize).min(n);
    let n_val = ((fv * n as f64).round() as usize).min(n - n_train);
    let n_test = n - n_train - n_val;
    for (name, count, frac) in [("train", n_train, ft), ("val", n_val, fv), ("test", n_test, fs)] {
        if count == 0 && (name == "train" || frac > 0.0) {
            return Err(Error::Data(format!(
                "{name} part is empty ({n} classes, fractions {fractions:?})"
            )));
        }
    }
    Ok(ClassSplit {
        train_class_ids: ids[..n_train].to_vec(),
        val_class_ids: ids[n_train..n_train + n_val].to_vec(),
        test_class_ids: ids[n_train + n_val..].to_vec(),
    })
}
