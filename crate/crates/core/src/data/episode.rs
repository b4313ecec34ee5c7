use super::Dataset;
use crate::error::{Error, Result};
use crate::numeric::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EpisodeItem {
    pub class_id: usize,
    pub instance: usize,
    /// Episode-local label in `0..N`.
    pub label: usize,
}

/// One N-way K-shot task. Support and query items are class-major: all items
/// of label 0 first, then label 1, and so on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub class_ids: Vec<usize>,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|i| i.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|i| i.label).collect()
    }

    pub fn support_images(&self, ds: &Dataset) -> Result<Tensor> {
        gather(ds, &self.support)
    }

    pub fn query_images(&self, ds: &Dataset) -> Result<Tensor> {
        gather(ds, &self.query)
    }

    /// Same task with classes relabeled: new label `i` is old label `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Episode> {
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.n_way).collect::<Vec<_>>() {
            return Err(Error::Invalid(format!("{perm:?} is not a permutation of 0..{}", self.n_way)));
        }
        let relabel = |items: &[EpisodeItem]| -> Vec<EpisodeItem> {
            perm.iter()
                .enumerate()
                .flat_map(|(new, &old)| {
                    items
                        .iter()
                        .filter(move |it| it.label == old)
                        .map(move |it| EpisodeItem { label: new, ..*it })
                })
                .collect()
        };
        Ok(Episode {
            class_ids: perm.iter().map(|&o| self.class_ids[o]).collect(),
            support: relabel(&self.support),
            query: relabel(&self.query),
            ..self.clone()
        })
    }
}

fn gather(ds: &Dataset, items: &[EpisodeItem]) -> Result<Tensor> {
    let imgs: Vec<&Tensor> = items.iter().map(|i| ds.image(i.class_id, i.instance)).collect();
    Tensor::stack(&imgs)
}

/// Samples N classes from `classes` and, per class, K support plus U query
/// instances, all without replacement.
pub fn sample_episode(
    ds: &Dataset,
    classes: &[usize],
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::Invalid(format!("need N ≥ 1 and K ≥ 1, got N={n_way} K={k_shot}")));
    }
    if classes.len() < n_way {
        return Err(Error::Data(format!(
            "{n_way}-way episode needs {n_way} classes, split part has {} ({} short)",
            classes.len(),
            n_way - classes.len()
        )));
    }
    let mut pool = classes.to_vec();
    // Partial Fisher-Yates: the first N slots are a uniform draw without replacement.
    for i in 0..n_way {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    let class_ids = pool[..n_way].to_vec();
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * n_query);
    for (label, &cid) in class_ids.iter().enumerate() {
        let have = ds.class(cid).instances.len();
        let need = k_shot + n_query;
        if have < need {
            return Err(Error::Data(format!(
                "class {cid} (`{}`) has {have} instances, episode needs {need} ({} short)",
                ds.class(cid).name,
                need - have
            )));
        }
        let mut idx: Vec<usize> = (0..have).collect();
        for i in 0..need {
            let j = i + rng.below(have - i);
            idx.swap(i, j);
        }
        support.extend(idx[..k_shot].iter().map(|&instance| EpisodeItem {
            class_id: cid,
            instance,
            label,
        }));
        query.extend(idx[k_shot..need].iter().map(|&instance| EpisodeItem {
            class_id: cid,
            instance,
            label,
        }));
    }
    Ok(Episode {
        n_way,
        k_shot,
        n_query,
        class_ids,
        support,
        query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tiny_dataset;
    use crate::numeric::Rng;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn five_way_one_shot_sixteen_queries() {
        let ds = tiny_dataset(8, 20);
        let ids: Vec<usize> = (0..8).collect();
        let ep = sample_episode(&ds, &ids, 5, 1, 16, &mut Rng::new(1)).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 80);
        assert_eq!(ep.support_images(&ds).unwrap().shape(), &[5, 3, 2, 2]);
    }

    #[test]
    fn exhaustion_uses_every_instance_once() {
        let ds = tiny_dataset(2, 2);
        let ep = sample_episode(&ds, &[0, 1], 2, 1, 1, &mut Rng::new(3)).unwrap();
        let all: HashSet<(usize, usize)> = ep
            .support
            .iter()
            .chain(&ep.query)
            .map(|i| (i.class_id, i.instance))
            .collect();
        assert_eq!(all.len(), 4);
    }

    #[test]
    fn fixed_seed_same_episode() {
        let ds = tiny_dataset(10, 10);
        let ids: Vec<usize> = (0..10).collect();
        let a = sample_episode(&ds, &ids, 5, 2, 3, &mut Rng::new(11)).unwrap();
        let b = sample_episode(&ds, &ids, 5, 2, 3, &mut Rng::new(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deficits_are_named() {
        let ds = tiny_dataset(3, 4);
        let e = sample_episode(&ds, &[0, 1, 2], 4, 1, 1, &mut Rng::new(0)).unwrap_err();
        assert!(e.to_string().contains("1 short"), "{e}");
        let e = sample_episode(&ds, &[0, 1, 2], 2, 2, 3, &mut Rng::new(0)).unwrap_err();
        assert!(e.to_string().contains("1 short"), "{e}");
    }

    #[test]
    fn permutation_relabels_groups() {
        let ds = tiny_dataset(4, 6);
        let ep = sample_episode(&ds, &[0, 1, 2, 3], 3, 2, 2, &mut Rng::new(5)).unwrap();
        let p = ep.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.class_ids, vec![ep.class_ids[2], ep.class_ids[0], ep.class_ids[1]]);
        assert_eq!(p.support[0].class_id, ep.class_ids[2]);
        assert_eq!(p.support_labels(), vec![0, 0, 1, 1, 2, 2]);
        assert!(ep.permuted(&[0, 0, 1]).is_err());
    }

    proptest! {
        #[test]
        fn episode_structure(seed in any::<u64>(), n in 1usize..5, k in 1usize..4, u in 1usize..4) {
            let ds = tiny_dataset(6, 8);
            let part = [0usize, 2, 3, 5, 1];
            let ep = sample_episode(&ds, &part, n, k, u, &mut Rng::new(seed)).unwrap();
            for label in 0..n {
                prop_assert_eq!(ep.support.iter().filter(|i| i.label == label).count(), k);
                prop_assert_eq!(ep.query.iter().filter(|i| i.label == label).count(), u);
            }
            let s: HashSet<_> = ep.support.iter().map(|i| (i.class_id, i.instance)).collect();
            prop_assert!(ep.query.iter().all(|i| !s.contains(&(i.class_id, i.instance))));
            prop_assert!(ep.class_ids.iter().all(|c| part.contains(c)));
            let distinct: HashSet<_> = ep.class_ids.iter().collect();
            prop_assert_eq!(distinct.len(), n);
        }
    }
}
