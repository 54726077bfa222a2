use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{ClientDataset, Dataset, SplitIndices};
use crate::error::DataError;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    /// Every client holds samples from exactly `k` classes.
    KClass { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    #[serde(flatten)]
    pub mode: PartitionMode,
    pub n_clients: usize,
    pub max_per_client: usize,
    pub seed: u64,
    /// IID only: each client keeps a uniformly drawn fraction in
    /// `[1 - size_jitter, 1]` of `max_per_client`. Zero gives equal sizes.
    #[serde(default)]
    pub size_jitter: f64,
}

impl PartitionPlan {
    pub fn iid(n_clients: usize, max_per_client: usize, seed: u64) -> Self {
        Self {
            mode: PartitionMode::Iid,
            n_clients,
            max_per_client,
            seed,
            size_jitter: 0.0,
        }
    }

    pub fn k_class(k: usize, n_clients: usize, max_per_client: usize, seed: u64) -> Self {
        Self {
            mode: PartitionMode::KClass { k },
            ..Self::iid(n_clients, max_per_client, seed)
        }
    }
}

/// `(train, val, test)` sizes for an allocation of `n`: val and test take
/// `floor(n / 10)` each, train the rest.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let tenth = n / 10;
    (n - 2 * tenth, tenth, tenth)
}

/// Splits a dataset across clients, then each allocation 80/10/10.
pub fn partition(dataset: &Dataset, plan: &PartitionPlan) -> Result<Vec<ClientDataset>, DataError> {
    if plan.n_clients == 0 || plan.max_per_client == 0 {
        return Err(DataError::Partition("need at least one client and one sample per client".into()));
    }
    let allocations = match plan.mode {
        PartitionMode::Iid => iid_allocations(dataset, plan)?,
        PartitionMode::KClass { k } => k_class_allocations(dataset, plan, k)?,
    };
    Ok(allocations
        .into_iter()
        .enumerate()
        .map(|(id, mut idx)| {
            idx.shuffle(&mut seed::rng(seed::mix(seed::mix_str(plan.seed, "client-split"), id as u64)));
            let (tr, va, _) = split_sizes(idx.len());
            let source = SplitIndices {
                train: idx[..tr].to_vec(),
                val: idx[tr..tr + va].to_vec(),
                test: idx[tr + va..].to_vec(),
            };
            ClientDataset {
                client_id: id,
                train: dataset.subset(&source.train),
                val: dataset.subset(&source.val),
                test: dataset.subset(&source.test),
                source: Some(source),
            }
        })
        .collect())
}

fn iid_allocations(dataset: &Dataset, plan: &PartitionPlan) -> Result<Vec<Vec<usize>>, DataError> {
    let need = plan.n_clients * plan.max_per_client;
    if need > dataset.len() {
        return Err(DataError::Partition(format!(
            "{} clients x {} samples need {need}, dataset has {} (short by {})",
            plan.n_clients,
            plan.max_per_client,
            dataset.len(),
            need - dataset.len()
        )));
    }
    if !(0.0..1.0).contains(&plan.size_jitter) {
        return Err(DataError::Partition(format!("size_jitter must be in [0, 1), got {}", plan.size_jitter)));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut seed::rng(seed::mix_str(plan.seed, "iid-shuffle")));
    let mut jrng = seed::rng(seed::mix_str(plan.seed, "iid-jitter"));
    Ok(order
        .chunks(plan.max_per_client)
        .take(plan.n_clients)
        .map(|chunk| {
            let keep = if plan.size_jitter > 0.0 {
                let frac = 1.0 - plan.size_jitter * jrng.random::<f64>();
                ((chunk.len() as f64 * frac).round() as usize).clamp(1, chunk.len())
            } else {
                chunk.len()
            };
            chunk[..keep].to_vec()
        })
        .collect())
}

/// Client `j` takes one shard from each class `(j*k + i) mod n_classes`,
/// `i < k`. Shards are contiguous runs of a seeded per-class shuffle,
/// dealt in client order.
fn k_class_allocations(dataset: &Dataset, plan: &PartitionPlan, k: usize) -> Result<Vec<Vec<usize>>, DataError> {
    let nc = dataset.n_classes;
    if k == 0 || k > nc {
        return Err(DataError::Partition(format!("k must be in 1..={nc}, got {k}")));
    }
    if plan.max_per_client < k {
        return Err(DataError::Partition(format!(
            "max_per_client {} cannot hold {k} classes",
            plan.max_per_client
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); nc];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for (c, idx) in by_class.iter_mut().enumerate() {
        idx.shuffle(&mut seed::rng(seed::mix(seed::mix_str(plan.seed, "class-shuffle"), c as u64)));
    }
    let shard = |i: usize| plan.max_per_client / k + usize::from(i < plan.max_per_client % k);

    let mut demand = vec![0usize; nc];
    for j in 0..plan.n_clients {
        for i in 0..k {
            demand[(j * k + i) % nc] += shard(i);
        }
    }
    let short: Vec<String> = (0..nc)
        .filter(|&c| demand[c] > by_class[c].len())
        .map(|c| format!("class {c} needs {} has {}", demand[c], by_class[c].len()))
        .collect();
    if !short.is_empty() {
        return Err(DataError::Partition(format!("insufficient samples: {}", short.join(", "))));
    }

    let mut cursor = vec![0usize; nc];
    Ok((0..plan.n_clients)
        .map(|j| {
            let mut idx = Vec::with_capacity(plan.max_per_client);
            for i in 0..k {
                let c = (j * k + i) % nc;
                let s = shard(i);
                idx.extend_from_slice(&by_class[c][cursor[c]..cursor[c] + s]);
                cursor[c] += s;
            }
            idx
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    #[test]
    fn split_rounding() {
        assert_eq!(split_sizes(100), (80, 10, 10));
        assert_eq!(split_sizes(19), (17, 1, 1));
        assert_eq!(split_sizes(3), (3, 0, 0));
    }

    #[test]
    fn iid_shortfall_is_reported() {
        let ds = synth_dataset(50, 5, 2, 0);
        let err = partition(&ds, &PartitionPlan::iid(6, 10, 0)).unwrap_err();
        assert!(err.to_string().contains("short by 10"), "{err}");
    }

    #[test]
    fn k_class_shortfall_names_classes() {
        let ds = synth_dataset(50, 5, 2, 0);
        let err = partition(&ds, &PartitionPlan::k_class(1, 10, 20, 0)).unwrap_err();
        assert!(err.to_string().contains("class 0 needs 40 has 10"), "{err}");
    }

    #[test]
    fn k_out_of_range() {
        let ds = synth_dataset(50, 5, 2, 0);
        assert!(partition(&ds, &PartitionPlan::k_class(0, 2, 10, 0)).is_err());
        assert!(partition(&ds, &PartitionPlan::k_class(6, 2, 10, 0)).is_err());
    }

    #[test]
    fn jitter_keeps_sizes_bounded() {
        let ds = synth_dataset(400, 4, 2, 0);
        let mut plan = PartitionPlan::iid(10, 40, 3);
        plan.size_jitter = 0.5;
        let clients = partition(&ds, &plan).unwrap();
        let sizes: Vec<usize> = clients.iter().map(|c| c.train.len() + c.val.len() + c.test.len()).collect();
        assert!(sizes.iter().all(|&s| (20..=40).contains(&s)));
        assert!(sizes.iter().any(|&s| s < 40));
    }
}
