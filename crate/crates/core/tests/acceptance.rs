//! Acceptance run: one PASS/FAIL line per criterion, desk scale.
//!
//! Federated criteria use a balanced 2,000-image MNIST subset over 10
//! clients (200 each, 80/10/10 splits) with a 784-64-64-10 MLP. Attack
//! criteria use a 784-512-512-10 MLP victim on held-out images.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use fedbench::attacks::AttackKind;
use fedbench::bench::{
    attack_cells, load_clients, read_lines, run_attack_cell, run_baseline_record, run_experiment, run_sweep,
    sweep_cells, AttackCampaignConfig, AttackCell, AttackRecord, AttackTask, ExperimentConfig, RecordLine, RunRecord,
};
use fedbench::metrics::ActprRecord;
use fedbench::nn::{ModelSpec, ParamVector};
use fedbench::protocol::{
    deserialize_params, run_training, serialize_params, RunOptions, StopReason, TrainingRun, HEADER_BYTES,
};
use fedbench::strategy::{aggregate, build, AggregationWeights, BatchSize, StrategyConfig, StrategyName};

mod common;

const SEEDS: [u64; 3] = [0, 1, 2];
const FEDSGD: &str = "name = \"fedsgd\"\noptimizer = { kind = \"adam\", lr = 0.002 }";
const FEDAVG: &str = "name = \"fedavg\"\nB = 8\nC = 0.5\nE = 8\noptimizer = { kind = \"adam\", lr = 0.001 }";

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn mnist(seed: u64, k: usize, strategy: &str) -> ExperimentConfig {
    let text = format!(
        r#"
schema = 1
seed = {seed}

[dataset]
source = "mnist"
images = "../../data/mnist5k/images.idx.gz"
labels = "../../data/mnist5k/labels.idx.gz"
subset = 2000
n_clients = 10
max_per_client = 200
k = {k}

[model]
name = "mlp"
hidden = [64, 64]

[strategy]
{strategy}

[stop]
max_round = 500
patience = 10

[baselines]
enabled = false
optimizer = {{ kind = "adam", lr = 0.001 }}
batch = 32
max_epochs = 100
patience = 5
"#
    );
    ExperimentConfig::from_toml(&text, &root()).expect("acceptance config")
}

fn record(cfg: &ExperimentConfig) -> ActprRecord {
    run_experiment(cfg, "").expect("run").record.expect("record")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// Runs shared by several criteria, computed on first use.
#[derive(Default)]
struct Shared {
    iid: Option<BTreeMap<u64, (f64, f64)>>,
    attack: Option<(AttackCampaignConfig, AttackTask)>,
    attacks: HashMap<String, AttackRecord>,
}

impl Shared {
    /// IID FLAcc of (FedSGD, FedAvg) per seed.
    fn iid(&mut self) -> &BTreeMap<u64, (f64, f64)> {
        self.iid.get_or_insert_with(|| {
            SEEDS
                .iter()
                .map(|&s| {
                    let sgd = record(&mnist(s, 0, FEDSGD)).fl_acc;
                    let avg = record(&mnist(s, 0, FEDAVG)).fl_acc;
                    (s, (sgd, avg))
                })
                .collect()
        })
    }

    fn campaign(&mut self) -> &(AttackCampaignConfig, AttackTask) {
        self.attack.get_or_insert_with(|| {
            let text = r#"
schema = 1
seed = 0
attacks = ["fc", "dlg"]
strategies = ["fedsgd", "fedavg"]
n_images = [1, 5, 10, 15]
epochs = [1, 16, 20]
batch = 1
victim_lr = 0.01
seeds = 11

[dataset]
source = "mnist"
images = "../../data/mnist5k/images.idx.gz"
labels = "../../data/mnist5k/labels.idx.gz"

[model]
name = "mlp"
hidden = [512, 512]

[settings.dlg]
iterations_per_image = 64
"#;
            let cfg = AttackCampaignConfig::from_toml(text, &root()).expect("attack config");
            let task = AttackTask::prepare(&cfg).expect("victim pool and label oracle");
            (cfg, task)
        })
    }

    /// Records of the matching cells, running any not seen yet.
    fn attacks(
        &mut self,
        attack: AttackKind,
        strategy: StrategyName,
        n: usize,
        epochs: usize,
        reps: usize,
    ) -> Vec<AttackRecord> {
        self.campaign();
        let (cfg, task) = self.attack.as_ref().unwrap();
        let cells: Vec<AttackCell> = attack_cells(cfg)
            .into_iter()
            .filter(|c| c.attack == attack && c.strategy == strategy && c.n_images == n && c.epochs == epochs)
            .filter(|c| c.rep < reps)
            .collect();
        assert_eq!(cells.len(), reps, "campaign grid lacks {attack:?} n={n} E={epochs}");
        let todo: Vec<&AttackCell> = cells.iter().filter(|c| !self.attacks.contains_key(&c.key)).collect();
        let fresh: Vec<AttackRecord> = todo.par_iter().map(|c| run_attack_cell(cfg, task, c, None)).collect();
        for r in fresh {
            self.attacks.insert(r.cell.clone(), r);
        }
        cells.iter().map(|c| self.attacks[&c.key].clone()).collect()
    }
}

fn l2(records: &[AttackRecord]) -> Vec<f64> {
    records.iter().map(|r| r.l2_distance.unwrap_or(f64::INFINITY)).collect()
}

fn label_acc(records: &[AttackRecord]) -> Vec<f64> {
    records.iter().map(|r| r.label_accuracy.unwrap_or(0.0)).collect()
}

fn accuracy_ordering(sh: &mut Shared) -> Verdict {
    let mut local = Vec::new();
    let mut central = Vec::new();
    let mut gap_sgd = Vec::new();
    let mut gap_avg = Vec::new();
    for &s in &SEEDS {
        let b = run_baseline_record(&mnist(s, 0, FEDAVG)).expect("baselines");
        let (sgd, avg) = sh.iid()[&s];
        local.push(b.local_acc);
        central.push(b.central_acc);
        gap_sgd.push((sgd - b.central_acc).abs());
        gap_avg.push((avg - b.central_acc).abs());
    }
    let (l, c) = (median(local.clone()), median(central.clone()));
    let (gs, ga) = (median(gap_sgd.clone()), median(gap_avg.clone()));
    verdict(
        l < c - 0.05 && gs < 0.03 && ga < 0.03,
        format!(
            "median LocalAcc {l:.3} < CentralAcc {c:.3} - 0.05; median |FedSGD-Central| {gs:.3} < 0.03; \
             median |FedAvg-Central| {ga:.3} < 0.03 (local {}, central {})",
            fmt(&local),
            fmt(&central)
        ),
    )
}

fn communication_advantage(_: &mut Shared) -> Verdict {
    let rounds = |strategy: &str| {
        let mut cfg = mnist(0, 0, strategy);
        cfg.stop.patience = 30;
        cfg.stop.target_val_acc = Some(0.90);
        let r = record(&cfg);
        (r.comm_round, r.stop_reason == StopReason::TargetReached.as_str())
    };
    let (sgd, sgd_hit) = rounds(FEDSGD);
    let (avg, avg_hit) = rounds(FEDAVG);
    let ratio = avg as f64 / sgd as f64;
    verdict(
        sgd_hit && avg_hit && avg < sgd && ratio <= 0.8,
        format!("rounds to val acc 0.90: FedAvg(B=8,C=0.5,E=8) {avg}, FedSGD {sgd}; ratio {ratio:.3} <= 0.8"),
    )
}

fn training_run(cfg: &ExperimentConfig) -> (TrainingRun, ModelSpec) {
    let (clients, shape, classes) = load_clients(cfg).expect("clients");
    let spec = cfg.model.build(shape, classes).expect("spec");
    let strategy = build(&cfg.strategy).expect("strategy");
    let init = ParamVector::init(&spec, cfg.seed).expect("init");
    let opts = RunOptions {
        network: cfg.network,
        stop: cfg.stop,
        durations: cfg.durations,
        seconds_per_flop: cfg.seconds_per_flop,
        lazy: cfg.lazy,
        quantize_on_wire: cfg.quantize_on_wire,
    };
    (run_training(&spec, strategy.as_ref(), &clients, init, &opts).expect("training"), spec)
}

fn upload_download_ratio(_: &mut Shared) -> Verdict {
    let strategy = "name = \"fedavg\"\nB = 8\nC = 0.1\nE = 1\noptimizer = { kind = \"adam\", lr = 0.001 }";
    let mut cfg = mnist(0, 0, strategy);
    cfg.stop.max_round = 20;
    cfg.stop.patience = 0;
    let (run, spec) = training_run(&cfg);
    let p = ParamVector::init(&spec, 0).unwrap().len() as u64;
    let (h, w) = (HEADER_BYTES as u64, HEADER_BYTES as u64 + 4 * p);
    // Per round: init and train request to the one trainer (weights only in
    // round 1), its upload, a weight broadcast to all ten validators and
    // their three-value results.
    let rounds = run.comm_round() as u64;
    let down: u64 = (1..=rounds).map(|r| h + if r == 1 { w } else { h } + 10 * w).sum();
    let up = rounds * (w + 10 * (h + 12));
    let client_up: u64 = run.client_bytes_sent.iter().sum();
    let client_down: u64 = run.client_bytes_received.iter().sum();
    let exact = rounds == 20
        && client_up == up
        && client_down == down
        && run.server_received() == client_up
        && run.server_sent() == client_down;
    let ratio = client_up as f64 / client_down as f64;
    verdict(
        exact && (0.08..=0.12).contains(&ratio),
        format!(
            "{rounds} rounds, uploaded {client_up} B (expected {up}), downloaded {client_down} B (expected {down}); \
             ratio {ratio:.4} in [0.08, 0.12]"
        ),
    )
}

fn time_structure(_: &mut Shared) -> Verdict {
    let mut detail = Vec::new();
    let mut additive = true;
    let mut means = Vec::new();
    for strategy in [
        FEDSGD,
        "name = \"fedavg\"\nB = 8\nC = 0.1\nE = 16\noptimizer = { kind = \"adam\", lr = 0.001 }",
    ] {
        let mut cfg = mnist(0, 0, strategy);
        cfg.stop.max_round = 5;
        cfg.stop.patience = 0;
        let (run, _) = training_run(&cfg);
        let sum: u64 = run
            .traces
            .iter()
            .flat_map(|t| t.durations.as_array())
            .map(|d| d.nanos())
            .sum();
        additive &= sum == run.time_all().nanos();
        let n = run.traces.len() as f64;
        let mean = |f: fn(&fedbench::protocol::RoundTrace) -> u64| run.traces.iter().map(f).sum::<u64>() as f64 / n;
        let sync = mean(|t| t.durations.tra_sync.nanos());
        let tr = mean(|t| t.durations.tra_run.nanos());
        detail.push(format!(
            "TimeAll {} ns == substep sum {sum} ns, TraSync {:.0} ns, TraRun {:.0} ns",
            run.time_all().nanos(),
            sync,
            tr
        ));
        means.push((sync, tr));
    }
    let (sgd, avg) = (means[0], means[1]);
    verdict(
        additive && sgd.0 > avg.0 && avg.1 > sgd.1,
        format!("FedSGD: {}; FedAvg(C=0.1,E=16): {}", detail[0], detail[1]),
    )
}

fn non_iid_gap(sh: &mut Shared) -> Verdict {
    let iid = sh.iid().clone();
    let mut avg1 = Vec::new();
    let mut avg3 = Vec::new();
    let mut sgd1 = Vec::new();
    for &s in &SEEDS {
        let (sgd_iid, avg_iid) = iid[&s];
        avg1.push(avg_iid - record(&mnist(s, 1, FEDAVG)).fl_acc);
        sgd1.push(sgd_iid - record(&mnist(s, 1, FEDSGD)).fl_acc);
        avg3.push(avg_iid - record(&mnist(s, 3, FEDAVG)).fl_acc);
    }
    let (a1, s1, a3) = (median(avg1.clone()), median(sgd1.clone()), median(avg3.clone()));
    verdict(
        a1 >= 0.03 && s1 <= 0.015 && a3 < a1,
        format!(
            "median drop vs IID: FedAvg k=1 {a1:.3} >= 0.03, FedSGD k=1 {s1:.3} <= 0.015, FedAvg k=3 {a3:.3} < k=1 \
             (FedAvg k=1 {}, FedSGD k=1 {}, FedAvg k=3 {})",
            fmt(&avg1),
            fmt(&sgd1),
            fmt(&avg3)
        ),
    )
}

fn fc_exactness(sh: &mut Shared) -> Verdict {
    let single = sh.attacks(AttackKind::Fc, StrategyName::Fedsgd, 1, 1, 1).remove(0);
    let many = sh.attacks(AttackKind::Fc, StrategyName::Fedsgd, 15, 1, 11);
    let oracle = sh.campaign().1.oracle.as_ref().map_or(f64::NAN, |o| o.test_accuracy);
    let mse = single.l2_distance.unwrap_or(f64::INFINITY);
    let acc1 = single.label_accuracy.unwrap_or(0.0);
    let accs = label_acc(&many);
    let acc15 = median(accs.clone());
    verdict(
        mse < 1e-6 && acc1 == 1.0 && acc15 >= 0.8,
        format!(
            "1 image: MSE {mse:.3e} < 1e-6, LabelAcc {acc1:.3} == 1; 15 images: median LabelAcc over 11 seeds \
             {acc15:.3} >= 0.8 {} (oracle test acc {oracle:.3})",
            fmt(&accs)
        ),
    )
}

fn attack_difficulty(sh: &mut Shared) -> Verdict {
    let mut ok = true;
    let mut detail = Vec::new();
    for kind in [AttackKind::Fc, AttackKind::Dlg] {
        let m: Vec<f64> = [1, 5, 10]
            .iter()
            .map(|&n| median(l2(&sh.attacks(kind, StrategyName::Fedsgd, n, 1, 5))))
            .collect();
        ok &= m[0] <= m[1] && m[1] <= m[2];
        detail.push(format!("{} median L2 n=1,5,10: {:.3e} <= {:.3e} <= {:.3e}", kind.label(), m[0], m[1], m[2]));
    }
    let e1 = median(l2(&sh.attacks(AttackKind::Dlg, StrategyName::Fedavg, 1, 1, 5)));
    let e16 = median(l2(&sh.attacks(AttackKind::Dlg, StrategyName::Fedavg, 1, 16, 5)));
    ok &= e16 > e1;
    detail.push(format!("DLG FedAvg(B=1) n=1 median L2 E=16 {e16:.3e} > E=1 {e1:.3e}"));
    verdict(ok, detail.join("; "))
}

fn fedavg_resists(sh: &mut Shared) -> Verdict {
    let sgd = label_acc(&sh.attacks(AttackKind::Dlg, StrategyName::Fedsgd, 5, 1, 5));
    let avg = label_acc(&sh.attacks(AttackKind::Dlg, StrategyName::Fedavg, 5, 20, 5));
    let (ms, ma) = (median(sgd.clone()), median(avg.clone()));
    verdict(
        ma <= ms,
        format!("DLG n=5 median LabelAcc: FedAvg(B=1,E=20) {ma:.3} {} <= FedSGD {ms:.3} {}", fmt(&avg), fmt(&sgd)),
    )
}

fn numeric_foundation(_: &mut Shared) -> Verdict {
    let grad_err = common::gradient_check(100, 99);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec: ModelSpec = "input(4,4,1) dense(16,8,relu) dense(8,3,linear)".parse().unwrap();
    let base = ParamVector::init(&spec, 0).unwrap();
    let mut worst_simplex: f64 = 0.0;
    let mut worst_linear: f64 = 0.0;
    let mut worst_wire: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.random_range(1..8usize);
        let counts: Vec<usize> = (0..k).map(|_| rng.random_range(1..500usize)).collect();
        let w = AggregationWeights::from_counts(&counts).unwrap();
        let s: f64 = w.as_slice().iter().sum();
        worst_simplex = worst_simplex.max((s - 1.0).abs());
        if w.as_slice().iter().any(|&p| p < 0.0) {
            worst_simplex = f64::INFINITY;
        }
        let rand_vec = |rng: &mut ChaCha8Rng| {
            base.with_values((0..base.len()).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap()
        };
        let xs: Vec<ParamVector> = (0..k).map(|_| rand_vec(&mut rng)).collect();
        let ys: Vec<ParamVector> = (0..k).map(|_| rand_vec(&mut rng)).collect();
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let zs: Vec<ParamVector> = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| {
                let mut z = x.clone();
                z.scale(a);
                z.axpy(b, y).unwrap();
                z
            })
            .collect();
        let agg = |v: &[ParamVector]| aggregate(&v.iter().collect::<Vec<_>>(), &w).unwrap();
        let (ax, ay, az) = (agg(&xs), agg(&ys), agg(&zs));
        for i in 0..base.len() {
            let want = a * ax.values()[i] + b * ay.values()[i];
            worst_linear = worst_linear.max((az.values()[i] - want).abs());
        }

        let p = rand_vec(&mut rng);
        let back = deserialize_params(&serialize_params(&p, 1, 0, 1), &p).unwrap();
        for (x, y) in p.values().iter().zip(back.values()) {
            worst_wire = worst_wire.max((x - y).abs() / x.abs().max(f64::MIN_POSITIVE));
        }
    }
    verdict(
        grad_err < 1e-4 && worst_simplex <= 1e-12 && worst_linear <= 1e-12 && worst_wire <= 2f64.powi(-24),
        format!(
            "gradient vs finite differences worst rel err {grad_err:.2e} < 1e-4 (100 cases); simplex err \
             {worst_simplex:.1e}, linearity err {worst_linear:.1e} <= 1e-12; wire round trip rel err \
             {worst_wire:.2e} <= 2^-24"
        ),
    )
}

fn strip(mut r: RunRecord) -> String {
    r.created_at.clear();
    serde_json::to_string(&r).unwrap()
}

fn reproducibility(_: &mut Shared) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs.jsonl");
    let first = run_experiment(&mnist(0, 0, FEDAVG), "").unwrap();
    fedbench::bench::append_line(&out, &RecordLine::Run(first.clone())).unwrap();
    let stored = match read_lines(&out).unwrap().remove(0) {
        RecordLine::Run(r) => r,
        _ => unreachable!(),
    };
    let again = run_experiment(&stored.config, &stored.cell).unwrap();
    let reproduced = strip(again) == strip(first);

    let mut sweep = ExperimentConfig::synth_default();
    sweep.strategy = StrategyConfig::fedavg(4, 0.5, 2, sweep.strategy.optimizer, 0);
    sweep.stop.max_round = 6;
    sweep.sweep = Some(fedbench::bench::SweepSpec {
        batch: vec![BatchSize::Size(4), BatchSize::Size(8)],
        epochs: vec![2, 4],
        ..Default::default()
    });
    let sweep = sweep.resolve(Path::new(".")).unwrap();
    let cells = sweep_cells(&sweep).unwrap();
    let set = |recs: Vec<RunRecord>| recs.into_iter().map(|r| (r.cell.clone(), strip(r))).collect::<BTreeMap<_, _>>();
    let forward = set(cells.iter().map(|c| run_experiment(&c.config, &c.key).unwrap()).collect());
    let backward = set(cells.iter().rev().map(|c| run_experiment(&c.config, &c.key).unwrap()).collect());
    let par = set(run_sweep(&sweep, &dir.path().join("sweep.jsonl"), 4, |_, _| {}).unwrap().all_records);
    let order_free = forward.len() == 4 && forward == backward && forward == par;
    verdict(
        reproduced && order_free,
        format!(
            "record re-run from its embedded config identical: {reproduced}; {} sweep records identical in \
             forward, reverse and parallel order: {order_free}",
            forward.len()
        ),
    )
}

type Criterion = fn(&mut Shared) -> Verdict;

fn main() {
    let criteria: [(&str, Criterion, f64); 10] = [
        ("accuracy ordering", accuracy_ordering, 300.0),
        ("FedAvg communication advantage", communication_advantage, 180.0),
        ("client upload/download ratio", upload_download_ratio, f64::INFINITY),
        ("time additivity and substeps", time_structure, f64::INFINITY),
        ("non-IID robustness gap", non_iid_gap, 300.0),
        ("FC attack exactness", fc_exactness, 120.0),
        ("attack difficulty monotonicity", attack_difficulty, 300.0),
        ("FedAvg resists DLG better", fedavg_resists, f64::INFINITY),
        ("numeric foundation", numeric_foundation, 60.0),
        ("determinism and reproducibility", reproducibility, f64::INFINITY),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    let suite = Instant::now();
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&mut shared)));
        let secs = t.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            Ok(v) => (v.pass && secs <= *budget, v.detail),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        let budget_note = if budget.is_finite() { format!(", budget {budget:.0} s") } else { String::new() };
        println!(
            "criterion {:>2} {} {name}: {detail} [{secs:.1} s{budget_note}]",
            i + 1,
            if pass { "PASS" } else { "FAIL" }
        );
        failed += usize::from(!pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1} s",
        criteria.len() - failed,
        suite.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
