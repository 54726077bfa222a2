use std::collections::HashSet;
use std::path::PathBuf;

use fedbench::data::{self, load_idx, partition, synth_dataset, Dataset, PartitionPlan};
use fedbench::nn::{self, ModelSpec, OptimizerConfig, OptimizerState, ParamVector, Targets};
use proptest::prelude::*;

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist5k")
}

fn mnist() -> Dataset {
    let d = mnist_dir();
    load_idx(d.join("images.idx.gz"), d.join("labels.idx.gz")).unwrap()
}

#[test]
fn mnist_subset_has_public_format() {
    let ds = mnist();
    assert_eq!(ds.len(), 5000);
    assert_eq!(ds.image_shape(), [28, 28, 1]);
    assert_eq!(ds.n_classes, 10);
    assert_eq!(ds.class_counts(), vec![500; 10]);
    assert!(ds.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn iid_clients_on_mnist_see_many_classes() {
    // 16 x 300 is the largest 300-image allocation the 5000-image subset holds.
    let ds = mnist();
    let clients = partition(&ds, &PartitionPlan::iid(16, 300, 1)).unwrap();
    for c in &clients {
        let all = Dataset::concat(&[&c.train, &c.val, &c.test]).unwrap();
        assert_eq!(all.len(), 300);
        assert!(all.distinct_classes() >= 5);
        assert_eq!((c.train.len(), c.val.len(), c.test.len()), (240, 30, 30));
    }
}

#[test]
fn one_class_per_client() {
    let ds = synth_dataset(500, 10, 3, 2);
    let clients = partition(&ds, &PartitionPlan::k_class(1, 10, 40, 5)).unwrap();
    for c in &clients {
        let all = Dataset::concat(&[&c.train, &c.val, &c.test]).unwrap();
        assert_eq!(all.distinct_classes(), 1);
    }
}

#[test]
fn idx_round_trip_through_client_dirs() {
    let ds = synth_dataset(60, 3, 4, 8);
    // Quantize to bytes first so the round trip is exact.
    let mut q = ds.clone();
    q.images.map_inplace(|p| (p * 255.0).round() / 255.0);
    let clients = partition(&q, &PartitionPlan::iid(3, 20, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data::write_client_dirs(dir.path(), &clients).unwrap();
    let back = data::load_client_dirs(dir.path(), 3).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in clients.iter().zip(&back) {
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);
    }
}

#[test]
fn synthetic_data_is_learnable_by_central_mlp() {
    let ds = synth_dataset(600, 10, 8, 4);
    let train = ds.subset(&(0..500).collect::<Vec<_>>());
    let test = ds.subset(&(500..600).collect::<Vec<_>>());
    let spec = ModelSpec::mlp([8, 8, 1], &[32], 10, 0.0);
    let mut p = ParamVector::init(&spec, 1).unwrap();
    let mut opt = OptimizerState::new(OptimizerConfig::adam(0.01), &p);
    let mut acc = 0.0;
    for _ in 0..200 {
        let (_, g) = nn::gradients(&spec, &p, &train.images, Targets::Classes(&train.labels)).unwrap();
        opt.apply_in_place(&mut p, &g).unwrap();
        let (_, correct) = nn::evaluate(&spec, &p, &test.images, &test.labels).unwrap();
        acc = correct as f64 / test.len() as f64;
        if acc >= 0.95 {
            break;
        }
    }
    assert!(acc >= 0.95, "test accuracy {acc}");
}

fn check_partition(ds: &Dataset, plan: &PartitionPlan) {
    let clients = partition(ds, plan).unwrap();
    assert_eq!(clients.len(), plan.n_clients);
    let mut seen = HashSet::new();
    let mut allocated_train = 0;
    for c in &clients {
        let src = c.source.as_ref().unwrap();
        for &i in src.train.iter().chain(&src.val).chain(&src.test) {
            assert!(seen.insert(i), "sample {i} appears twice");
        }
        let total = src.train.len() + src.val.len() + src.test.len();
        assert!(total <= plan.max_per_client);
        let (tr, va, te) = data::split_sizes(total);
        assert_eq!((c.train.len(), c.val.len(), c.test.len()), (tr, va, te));
        allocated_train += src.train.len();
        if let data::PartitionMode::KClass { k } = plan.mode {
            let all = Dataset::concat(&[&c.train, &c.val, &c.test]).unwrap();
            assert_eq!(all.distinct_classes(), k);
        }
    }
    assert_eq!(clients.iter().map(|c| c.n_k()).sum::<usize>(), allocated_train);
    assert_eq!(partition(ds, plan).unwrap(), clients);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iid_partitions_are_disjoint_and_stable(seed in any::<u64>(), n_clients in 1usize..12, per in 3usize..30) {
        let ds = synth_dataset(400, 5, 2, 0);
        prop_assume!(n_clients * per <= ds.len());
        check_partition(&ds, &PartitionPlan::iid(n_clients, per, seed));
    }

    #[test]
    fn k_class_partitions_are_exact(seed in any::<u64>(), k in 1usize..=5, n_clients in 1usize..10, per in 5usize..25) {
        let ds = synth_dataset(500, 5, 2, 1);
        prop_assume!(per >= k);
        check_partition(&ds, &PartitionPlan::k_class(k, n_clients, per, seed));
    }
}
