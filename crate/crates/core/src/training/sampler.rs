use std::collections::{BTreeMap, VecDeque};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Result, SavsError};

/// One P×K batch: indices into the training sample list, grouped by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSpec {
    pub indices: Vec<usize>,
    pub person_ids: Vec<u32>,
}

impl BatchSpec {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Identity-balanced sampler.
///
/// Ids are served round-robin from successive shuffled passes over the id
/// list, so every id is visited once before any repeats. An id already in
/// the batch being filled is deferred to the next batch. An epoch holds
/// enough batches to cover both every id and as many images as the
/// dataset has. Ids with fewer than K images are drawn with replacement.
#[derive(Debug, Clone)]
pub struct PkSampler {
    by_id: Vec<(u32, Vec<usize>)>,
    num_images: usize,
    p: usize,
    k: usize,
}

impl PkSampler {
    pub fn new(person_ids: &[u32], batch_size: usize, images_per_id: usize) -> Result<Self> {
        if images_per_id == 0 || batch_size % images_per_id != 0 {
            return Err(SavsError::Config(format!(
                "batch_size {batch_size} is not a multiple of images_per_id {images_per_id}"
            )));
        }
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &pid) in person_ids.iter().enumerate() {
            map.entry(pid).or_default().push(i);
        }
        let p = batch_size / images_per_id;
        if map.len() < p {
            return Err(SavsError::Config(format!(
                "{} identities cannot fill batches of {p} identities",
                map.len()
            )));
        }
        Ok(PkSampler {
            by_id: map.into_iter().collect(),
            num_images: person_ids.len(),
            p,
            k: images_per_id,
        })
    }

    pub fn num_ids(&self) -> usize {
        self.by_id.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        let per_pass = self.by_id.len().div_ceil(self.p);
        per_pass.max(self.num_images.div_ceil(self.p * self.k))
    }

    pub fn epoch(&self, rng: &mut impl Rng) -> Vec<BatchSpec> {
        let mut pending: VecDeque<usize> = VecDeque::new();
        let mut batches = Vec::with_capacity(self.batches_per_epoch());
        for _ in 0..self.batches_per_epoch() {
            let mut ids: Vec<usize> = Vec::with_capacity(self.p);
            let mut deferred = Vec::new();
            while ids.len() < self.p {
                if pending.is_empty() {
                    let mut pass: Vec<usize> = (0..self.by_id.len()).collect();
                    pass.shuffle(rng);
                    pending.extend(pass);
                }
                let id = pending.pop_front().expect("refilled above");
                if ids.contains(&id) {
                    deferred.push(id);
                } else {
                    ids.push(id);
                }
            }
            for id in deferred.into_iter().rev() {
                pending.push_front(id);
            }
            let mut batch = BatchSpec {
                indices: Vec::with_capacity(self.p * self.k),
                person_ids: Vec::with_capacity(self.p * self.k),
            };
            for id in ids {
                let (pid, images) = &self.by_id[id];
                if images.len() >= self.k {
                    batch.indices.extend(images.choose_multiple(rng, self.k));
                } else {
                    batch
                        .indices
                        .extend((0..self.k).map(|_| images[rng.random_range(0..images.len())]));
                }
                batch.person_ids.extend(std::iter::repeat_n(*pid, self.k));
            }
            batches.push(batch);
        }
        batches
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeMap, BTreeSet};

    fn check_invariants(b: &BatchSpec, p: usize, k: usize, pids: &[u32]) {
        assert_eq!(b.len(), p * k);
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for (&i, &pid) in b.indices.iter().zip(&b.person_ids) {
            assert_eq!(pids[i], pid);
            *counts.entry(pid).or_default() += 1;
        }
        assert_eq!(counts.len(), p);
        assert!(counts.values().all(|&c| c == k));
    }

    #[test]
    fn exact_fit_is_one_batch_of_everything() {
        let pids: Vec<u32> = (0..8).flat_map(|p| [p; 4]).collect();
        let s = PkSampler::new(&pids, 32, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let epoch = s.epoch(&mut rng);
        assert_eq!(epoch.len(), 1);
        check_invariants(&epoch[0], 8, 4, &pids);
        let seen: BTreeSet<usize> = epoch[0].indices.iter().copied().collect();
        assert_eq!(seen, (0..32).collect());
    }

    #[test]
    fn single_image_id_repeats() {
        let mut pids = vec![0u32];
        pids.extend([1u32; 4]);
        let s = PkSampler::new(&pids, 8, 4).unwrap();
        let b = &s.epoch(&mut ChaCha8Rng::seed_from_u64(0))[0];
        check_invariants(b, 2, 4, &pids);
        assert_eq!(b.indices.iter().filter(|&&i| i == 0).count(), 4);
    }

    #[test]
    fn sixteen_ids_partition_into_two_batches() {
        let pids: Vec<u32> = (0..16).flat_map(|p| [p; 4]).collect();
        let s = PkSampler::new(&pids, 32, 4).unwrap();
        for seed in 0..20 {
            let epoch = s.epoch(&mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(epoch.len(), 2);
            let sets: Vec<BTreeSet<u32>> = epoch
                .iter()
                .map(|b| {
                    check_invariants(b, 8, 4, &pids);
                    b.person_ids.iter().copied().collect()
                })
                .collect();
            assert!(sets[0].is_disjoint(&sets[1]));
            let all: BTreeSet<u32> = sets[0].union(&sets[1]).copied().collect();
            assert_eq!(all, (0..16).collect());
        }
    }

    #[test]
    fn short_tail_is_topped_up_and_every_id_visited() {
        let pids: Vec<u32> = (0..12).flat_map(|p| [p; 4]).collect();
        let s = PkSampler::new(&pids, 32, 4).unwrap();
        let epoch = s.epoch(&mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(epoch.len(), 2);
        let mut visited = BTreeSet::new();
        for b in &epoch {
            check_invariants(b, 8, 4, &pids);
            visited.extend(b.person_ids.iter().copied());
        }
        assert_eq!(visited.len(), 12);
    }

    #[test]
    fn epoch_length_follows_image_count_and_passes_are_round_robin() {
        let pids: Vec<u32> = (0..12).flat_map(|p| [p; 16]).collect();
        let s = PkSampler::new(&pids, 32, 4).unwrap();
        assert_eq!(s.batches_per_epoch(), 6);
        let epoch = s.epoch(&mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(epoch.len(), 6);
        let stream: Vec<u32> = epoch
            .iter()
            .flat_map(|b| {
                check_invariants(b, 8, 4, &pids);
                b.person_ids.iter().step_by(4).copied().collect::<Vec<_>>()
            })
            .collect();
        // 48 id slots = 4 passes of 12; visit counts never differ by more than one
        for prefix in 1..=stream.len() {
            let mut counts = [0usize; 12];
            for &p in &stream[..prefix] {
                counts[p as usize] += 1;
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1 || prefix % 8 != 0, "prefix {prefix}: {counts:?}");
        }
    }

    #[test]
    fn too_few_ids_is_a_config_error() {
        let pids: Vec<u32> = (0..3).flat_map(|p| [p; 4]).collect();
        assert!(matches!(PkSampler::new(&pids, 32, 4), Err(SavsError::Config(_))));
        assert!(PkSampler::new(&pids, 30, 4).is_err());
    }
}
