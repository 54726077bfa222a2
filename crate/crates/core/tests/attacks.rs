use std::fs;

use fedbench::attacks::*;
use fedbench::data::synth_dataset;
use fedbench::nn::*;
use fedbench::strategy::BatchSize;
use proptest::prelude::*;
use rand::Rng;

fn scalar_params(v: f64) -> ParamVector {
    let spec = ModelSpec {
        input: [1, 1, 1],
        layers: vec![Layer::Dense {
            inputs: 1,
            outputs: 1,
            activation: Activation::Linear,
        }],
    };
    let mut p = ParamVector::init(&spec, 0).unwrap();
    p.values_mut().copy_from_slice(&[v, 0.0]);
    p
}

fn small_sigmoid() -> ModelSpec {
    ModelSpec::mlp([4, 4, 1], &[6, 5], 3, 0.0).for_gradient_attack()
}

fn batch(rows: &[Vec<f64>], side: usize) -> Tensor {
    let r: Vec<&[f64]> = rows.iter().map(|v| v.as_slice()).collect();
    Tensor::from_rows(&[side, side, 1], &r).unwrap()
}

#[test]
fn derived_gradient_examples() {
    let (g, approx) = derive_gradient(&scalar_params(1.0), &scalar_params(0.8), &OptimizerConfig::sgd(0.1)).unwrap();
    assert_eq!(g.values()[0], (1.0 - 0.8) / 0.1);
    assert!((g.values()[0] - 2.0).abs() < 1e-12);
    assert!(!approx);

    let p = scalar_params(0.3);
    let (g, _) = derive_gradient(&p, &p, &OptimizerConfig::sgd(0.1)).unwrap();
    assert!(g.values().iter().all(|&v| v == 0.0));

    let (_, approx) = derive_gradient(&p, &scalar_params(0.2), &OptimizerConfig::adam(0.1)).unwrap();
    assert!(approx);
    assert!(derive_gradient(&p, &p, &OptimizerConfig::sgd(0.0)).is_err());
}

#[test]
fn fedsgd_capture_recovers_the_batch_gradient() {
    let spec = small_sigmoid();
    let data = synth_dataset(6, 3, 4, 1);
    let params = ParamVector::init(&spec, 2).unwrap();
    let cap = capture_gradient(&spec, &params, &data.images, &data.labels, VictimUpdate::Fedsgd, OptimizerConfig::sgd(0.05), 0).unwrap();
    let (_, g) = gradients(&spec, &params, &data.images, Targets::Classes(&data.labels)).unwrap();
    for (a, b) in cap.derived_gradient.values().iter().zip(g.values()) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
    assert_eq!(cap.n_images, 6);
    assert_eq!(cap.epochs, 1);
}

#[test]
fn multi_epoch_capture_is_the_sum_of_step_gradients() {
    let spec = small_sigmoid();
    let data = synth_dataset(5, 3, 4, 3);
    let params = ParamVector::init(&spec, 4).unwrap();
    let lr = 0.2;
    let epochs = 4;
    let cap = capture_gradient(
        &spec,
        &params,
        &data.images,
        &data.labels,
        VictimUpdate::Fedavg {
            batch: BatchSize::Full,
            epochs,
        },
        OptimizerConfig::sgd(lr),
        9,
    )
    .unwrap();

    // Instrumented trainer: logs every step's update direction.
    let mut p = params.clone();
    let mut sum = ParamVector::zeros(params.layout().clone());
    for _ in 0..epochs {
        let (_, g) = gradients(&spec, &p, &data.images, Targets::Classes(&data.labels)).unwrap();
        sum.axpy(1.0, &g).unwrap();
        p.axpy(-lr, &g).unwrap();
    }
    let scale = sum.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, b) in cap.derived_gradient.values().iter().zip(sum.values()) {
        assert!((a - b).abs() <= 1e-9 * scale, "{a} vs {b}");
    }
    assert_eq!(cap.epochs, epochs);
}

#[test]
fn squared_loss_gradient_is_proportional_to_the_input() {
    let x = [1.0, 2.0];
    let (w, b, y) = ([0.5, 0.5], 0.0, 0.0);
    let residual = w[0] * x[0] + w[1] * x[1] + b - y;
    let dw = [2.0 * x[0] * residual, 2.0 * x[1] * residual];
    let db = 2.0 * residual;
    assert_eq!(dw, [3.0, 6.0]);
    assert_eq!([dw[0] / db, dw[1] / db], x);
}

#[test]
fn fc_reconstructs_a_single_image() {
    let spec = ModelSpec::mlp([8, 8, 1], &[64, 32], 4, 0.0);
    let data = synth_dataset(1, 4, 8, 5);
    let params = ParamVector::init(&spec, 6).unwrap();
    let cap = capture_gradient(&spec, &params, &data.images, &data.labels, VictimUpdate::Fedsgd, OptimizerConfig::sgd(0.01), 0).unwrap();
    let r = fc_attack(&cap.derived_gradient, &spec, 1, &FcConfig::default()).unwrap();
    assert!(!r.failed);
    assert_eq!(r.images.len(), 1);
    assert!(pixel_mse(&r.images[0], data.images.row(0)) < 1e-6);
}

#[test]
fn fc_identical_images_give_identical_candidates() {
    let spec = ModelSpec::mlp([8, 8, 1], &[40], 4, 0.0);
    let one = synth_dataset(1, 4, 8, 7);
    let x = batch(&vec![one.images.row(0).to_vec(); 4], 8);
    let labels = vec![one.labels[0]; 4];
    let params = ParamVector::init(&spec, 8).unwrap();
    let (_, g) = gradients(&spec, &params, &x, Targets::Classes(&labels)).unwrap();
    let cands = fc_candidates(&g, &spec, &FcConfig::default()).unwrap();
    assert!(!cands.is_empty());
    for c in &cands {
        assert!(pixel_mse(&c.image, one.images.row(0)) < 1e-20);
    }
}

#[test]
fn fc_units_active_on_one_image_return_that_image() {
    let side = 6;
    let width = side * side;
    let half = width / 2;
    let mut rng = fedbench::seed::rng(11);
    let mut left = vec![0.0; width];
    let mut right = vec![0.0; width];
    for i in 0..half {
        left[i] = rng.random_range(0.1..1.0);
        right[half + i] = rng.random_range(0.1..1.0);
    }
    let spec = ModelSpec::mlp([side, side, 1], &[12], 3, 0.0);
    let mut params = ParamVector::init(&spec, 12).unwrap();
    // Units 0..4 look only at the left half, 4..8 only at the right, with
    // positive weights; the rest mix both halves.
    {
        let v = params.values_mut();
        for unit in 0..8 {
            for i in 0..width {
                let on_left = i < half;
                v[unit * width + i] = if (unit < 4) == on_left { rng.random_range(0.05..0.5) } else { 0.0 };
            }
        }
    }
    let x = batch(&[left.clone(), right.clone()], side);
    let labels = [0usize, 2];

    // Forward-pass oracle for which images activate which units.
    let w = &params.values()[..12 * width];
    let active = |img: &[f64], unit: usize| w[unit * width..(unit + 1) * width].iter().zip(img).map(|(a, b)| a * b).sum::<f64>() > 0.0;
    let (_, g) = gradients(&spec, &params, &x, Targets::Classes(&labels)).unwrap();
    let cands = fc_candidates(&g, &spec, &FcConfig::default()).unwrap();
    let mut checked = 0;
    for c in &cands {
        let on = (active(&left, c.unit), active(&right, c.unit));
        let expect = match on {
            (true, false) => &left,
            (false, true) => &right,
            _ => continue,
        };
        assert!(pixel_mse(&c.image, expect) < 1e-20, "unit {}", c.unit);
        checked += 1;
    }
    assert!(checked >= 2);
}

#[test]
fn fc_without_active_units_fails() {
    let spec = ModelSpec::mlp([4, 4, 1], &[8], 3, 0.0);
    let zero = ParamVector::zeros(ParamVector::init(&spec, 0).unwrap().layout().clone());
    let r = fc_attack(&zero, &spec, 3, &FcConfig::default()).unwrap();
    assert!(r.failed);
    assert!(r.images.is_empty());

    let conv = ModelSpec::lenet([28, 28, 1], 10).unwrap();
    let g = ParamVector::init(&conv, 0).unwrap();
    assert!(matches!(fc_attack(&g, &conv, 1, &FcConfig::default()), Err(fedbench::error::AttackError::Config(_))));
}

#[test]
fn analytic_objective_gradient_matches_finite_differences() {
    let spec = small_sigmoid();
    let params = ParamVector::init(&spec, 21).unwrap();
    let data = synth_dataset(2, 3, 4, 22);
    let (_, target) = gradients(&spec, &params, &data.images, Targets::Classes(&data.labels)).unwrap();
    for seed in 0..5 {
        let state = random_state(&spec, 2, seed).unwrap();
        let a = dlg_gradient_analytic(&spec, &params, &target, &state).unwrap();
        let f = dlg_gradient_fd(&spec, &params, &target, &state, 1e-4).unwrap();
        assert_eq!(a.len(), 2 * (16 + 3));
        let scale = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in a.iter().zip(&f) {
            assert!((x - y).abs() <= 1e-3 * y.abs().max(1e-3 * scale), "{x} vs {y}");
        }
    }
}

#[test]
fn dlg_started_at_the_truth_returns_it() {
    let spec = small_sigmoid();
    let params = ParamVector::init(&spec, 31).unwrap();
    let data = synth_dataset(2, 3, 4, 32);
    let (_, g) = gradients(&spec, &params, &data.images, Targets::Classes(&data.labels)).unwrap();
    let mut logits = vec![0.0; 6];
    for (i, &y) in data.labels.iter().enumerate() {
        logits[i * 3 + y] = 40.0;
    }
    let init = DlgState {
        images: data.images.data().to_vec(),
        logits,
    };
    assert!(dlg_objective(&spec, &params, &g, &init).unwrap() < 1e-20);
    let r = dlg_attack(&g, &spec, &params, 2, &DlgConfig::default(), Some(init)).unwrap();
    assert_eq!(r.iterations, 0);
    assert!(!r.failed);
    assert_eq!(r.labels.as_deref(), Some(&data.labels[..]));
    let s = score_attack(&r, &data.images, &data.labels, LabelSource::Reconstructed).unwrap();
    assert_eq!(s.label_accuracy, 1.0);
    assert_eq!(s.l2_distance, 0.0);
}

#[test]
fn dlg_recovers_one_image_and_its_label() {
    let spec = ModelSpec::mlp([8, 8, 1], &[32], 4, 0.0).for_gradient_attack();
    let params = ParamVector::init(&spec, 41).unwrap();
    let data = synth_dataset(1, 4, 8, 42);
    let cap = capture_gradient(&spec, &params, &data.images, &data.labels, VictimUpdate::Fedsgd, OptimizerConfig::sgd(0.01), 0).unwrap();
    let cfg = DlgConfig {
        iterations_per_image: 300,
        ..DlgConfig::default()
    };
    for (memory, method) in [(10, "lbfgs-backtracking/analytic"), (0, "gd-backtracking/analytic")] {
        let cfg = DlgConfig { memory, ..cfg.clone() };
        let r = dlg_attack(&cap.derived_gradient, &spec, &params, 1, &cfg, None).unwrap();
        assert_eq!(r.method, method);
        let s = score_attack(&r, &data.images, &data.labels, LabelSource::Reconstructed).unwrap();
        assert_eq!(s.label_accuracy, 1.0);
        assert!(s.l2_distance < 1e-3, "{method}: l2 {}", s.l2_distance);
        assert!(r.history.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(r.final_objective, r.history.last().copied());
    }
}

#[test]
fn dlg_finite_difference_path_descends() {
    let spec = small_sigmoid();
    let params = ParamVector::init(&spec, 51).unwrap();
    let data = synth_dataset(1, 3, 4, 52);
    let (_, g) = gradients(&spec, &params, &data.images, Targets::Classes(&data.labels)).unwrap();
    let cfg = DlgConfig {
        gradient: GradientPath::FiniteDifference,
        iterations_per_image: 40,
        ..DlgConfig::default()
    };
    let r = dlg_attack(&g, &spec, &params, 1, &cfg, None).unwrap();
    assert_eq!(r.method, "lbfgs-backtracking/finite-difference");
    assert!(r.history.len() > 1);
    assert!(r.history.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn dlg_stalls_are_flagged_and_bad_configs_rejected() {
    let spec = small_sigmoid();
    let params = ParamVector::init(&spec, 61).unwrap();
    let data = synth_dataset(1, 3, 4, 62);
    let (_, g) = gradients(&spec, &params, &data.images, Targets::Classes(&data.labels)).unwrap();
    let cfg = DlgConfig {
        lr: 1e12,
        patience: 3,
        memory: 0,
        ..DlgConfig::default()
    };
    let r = dlg_attack(&g, &spec, &params, 1, &cfg, None).unwrap();
    assert!(r.failed);
    let accepted = r.history.len() - 1;
    assert!(r.iterations - accepted >= 3);
    assert!(r.iterations < 64);

    let zero_iters = DlgConfig {
        iterations_per_image: 0,
        ..DlgConfig::default()
    };
    assert!(dlg_attack(&g, &spec, &params, 1, &zero_iters, None).is_err());
    let conv = ModelSpec::lenet([28, 28, 1], 10).unwrap().for_gradient_attack();
    let cp = ParamVector::init(&conv, 0).unwrap();
    let analytic = DlgConfig {
        gradient: GradientPath::Analytic,
        ..DlgConfig::default()
    };
    assert!(dlg_attack(&cp, &conv, &cp, 1, &analytic, None).is_err());
}

fn recon(images: Vec<Vec<f64>>, labels: Vec<usize>) -> Reconstruction {
    Reconstruction {
        images,
        labels: Some(labels),
        failed: false,
        iterations: 0,
        final_objective: None,
        history: Vec::new(),
        method: String::new(),
    }
}

#[test]
fn scoring_examples() {
    let data = synth_dataset(4, 4, 4, 71);
    let rows: Vec<Vec<f64>> = (0..4).map(|i| data.images.row(i).to_vec()).collect();
    let perm = [2, 0, 3, 1];
    let r = recon(perm.iter().map(|&i| rows[i].clone()).collect(), perm.iter().map(|&i| data.labels[i]).collect());
    let s = score_attack(&r, &data.images, &data.labels, LabelSource::Reconstructed).unwrap();
    assert_eq!((s.label_accuracy, s.l2_distance), (1.0, 0.0));

    let grey = recon(vec![vec![0.5; 16]; 4], vec![0; 4]);
    let s = score_attack(&grey, &data.images, &data.labels, LabelSource::Reconstructed).unwrap();
    let expect = data.images.data().iter().map(|v| (v - 0.5) * (v - 0.5)).sum::<f64>() / 64.0;
    assert!((s.l2_distance - expect).abs() < 1e-12);

    let one = recon(vec![rows[1].clone()], vec![data.labels[1]]);
    let s = score_attack(&one, &data.images, &data.labels, LabelSource::Reconstructed).unwrap();
    assert_eq!(s.label_accuracy, 0.25);
    assert_eq!(s.l2_distance, 0.0);

    let too_many = recon(vec![rows[0].clone(); 5], vec![0; 5]);
    assert!(score_attack(&too_many, &data.images, &data.labels, LabelSource::Reconstructed).is_err());

    let weak = OracleClassifier {
        spec: ModelSpec::mlp([4, 4, 1], &[4], 4, 0.0),
        params: ParamVector::init(&ModelSpec::mlp([4, 4, 1], &[4], 4, 0.0), 0).unwrap(),
        test_accuracy: 0.5,
    };
    assert!(score_attack(&r, &data.images, &data.labels, LabelSource::Oracle(&weak)).is_err());
}

#[test]
fn pgm_dump_layout() {
    let dir = tempfile::tempdir().unwrap();
    let truth = batch(&[vec![0.0, 0.5, 1.0, 0.25]], 2);
    dump_attack_images(dir.path(), &truth, &[vec![1.0, 1.0, 0.0, 0.0]], &[0], 2, 2).unwrap();
    let t = fs::read(dir.path().join("truth_0.pgm")).unwrap();
    assert_eq!(t, b"P5\n2 2\n255\n\x00\x80\xff\x40");
    let r = fs::read(dir.path().join("recon_0.pgm")).unwrap();
    assert_eq!(&r[r.len() - 4..], &[255, 255, 0, 0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn score_is_invariant_to_reconstruction_order(seed in 0u64..1000, n in 1usize..6, extra in 0usize..3) {
        let truth = synth_dataset(n + extra, 3, 3, seed);
        let mut rng = fedbench::seed::rng(seed);
        let images: Vec<Vec<f64>> = (0..n).map(|_| (0..9).map(|_| rng.random::<f64>()).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let base = score_attack(&recon(images.clone(), labels.clone()), &truth.images, &truth.labels, LabelSource::Reconstructed).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.rotate_left(seed as usize % n);
        order.swap(0, n - 1);
        let shuffled = recon(order.iter().map(|&i| images[i].clone()).collect(), order.iter().map(|&i| labels[i]).collect());
        let s = score_attack(&shuffled, &truth.images, &truth.labels, LabelSource::Reconstructed).unwrap();
        prop_assert!((s.l2_distance - base.l2_distance).abs() < 1e-12);
        prop_assert_eq!(s.label_accuracy, base.label_accuracy);
        prop_assert!(s.l2_distance >= 0.0);
    }

    #[test]
    fn assignment_is_optimal_over_all_permutations(seed in 0u64..1000) {
        let mut rng = fedbench::seed::rng(seed);
        let cost: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        let a = assign_min_cost(&cost);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        let mut best = f64::INFINITY;
        for p in 0..24usize {
            let mut cols = vec![0, 1, 2, 3];
            let mut k = p;
            let mut perm = Vec::new();
            for m in (1..=4).rev() {
                perm.push(cols.remove(k % m));
                k /= m;
            }
            best = best.min(perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum());
        }
        prop_assert!((total - best).abs() < 1e-12);
    }
}
