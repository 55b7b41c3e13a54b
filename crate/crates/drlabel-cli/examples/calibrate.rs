// Scratch calibration for the trained-model acceptance runs: timing per
// epoch, head comparison, robustness margins, noisy-node effect.

use std::time::Instant;

use drlabel::dataset::DatasetRecord;
use drlabel::graph::{perturb_graph, DirectedGraph, PerturbMode};
use drlabel::model::{
    evaluate, evaluate_with_graphs, train, HeadMode, LossWeights, ModelDims, ModelParams,
    TrainConfig,
};
use drlabel::sim::{generate_dataset, DatasetConfig};
use drlabel_cli::config::{split_indices, SplitSpec};

fn gen_records_with(
    n: usize,
    atoms: (usize, usize),
    seed: u64,
    policy: &drlabel::graph::GraphPolicy,
) -> Vec<DatasetRecord> {
    let config = DatasetConfig {
        n_instances: n,
        n_atoms_min: atoms.0,
        n_atoms_max: atoms.1,
        ..DatasetConfig::default()
    };
    let ds = generate_dataset(&config, seed).unwrap();
    ds.instances
        .iter()
        .map(|inst| DatasetRecord::from_instance(inst, &policy.build(&inst.system).unwrap()))
        .collect()
}

fn gen_records(n: usize, atoms: (usize, usize), seed: u64) -> Vec<DatasetRecord> {
    gen_records_with(n, atoms, seed, &drlabel::graph::GraphPolicy::default())
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scenario = args.get(1).map(String::as_str).unwrap_or("timing");

    match scenario {
        "timing" => {
            let records = gen_records(200, (8, 20), 7);
            let dims = ModelDims::default();
            for mode in [HeadMode::Sum, HeadMode::Drlabel] {
                let params = ModelParams::init(&dims, mode, 0, 0);
                let config = TrainConfig { epochs: 2, ..TrainConfig::default() };
                let t0 = Instant::now();
                let (_, history) = train(params, &records, &records[..20], &config).unwrap();
                println!(
                    "{mode}: {:.2} s/epoch (200 inst), first losses {:?}",
                    t0.elapsed().as_secs_f64() / 2.0,
                    (history[0].train_total, history[1].train_total)
                );
            }
        }
        "compare" => {
            // head comparison + robustness at moderate budget
            let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(600);
            let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(25);
            let policy = match args.get(4).map(String::as_str) {
                Some("full") => drlabel::graph::GraphPolicy::Full,
                _ => drlabel::graph::GraphPolicy::default(),
            };
            let gbf_max: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(2.0);
            let lr: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
            let records = gen_records_with(n, (8, 14), 11, &policy);
            let spec = SplitSpec::Fractions { train: 0.7, val: 0.1, test: 0.2 };
            let (tr, va, te) = split_indices(records.len(), &spec, 5).unwrap();
            let pick = |idx: &Vec<usize>| -> Vec<DatasetRecord> {
                idx.iter().map(|&i| records[i].clone()).collect()
            };
            let (train_recs, val_recs, test_recs) = (pick(&tr), pick(&va), pick(&te));
            let dims = ModelDims { gbf_max_dist: gbf_max, ..ModelDims::default() };
            // zero-prediction baseline
            let zero_mae: f64 = {
                let mut s = 0.0;
                let mut c = 0;
                for r in &test_recs {
                    let mut inst_sum = 0.0;
                    let mut inst_n = 0;
                    for (d, &f) in r.displacements().iter().zip(&r.free_mask) {
                        if f { inst_sum += d.norm(); inst_n += 1; }
                    }
                    if inst_n > 0 { s += inst_sum / inst_n as f64; c += 1; }
                }
                s / c as f64
            };
            println!("zero-prediction node MAE baseline: {zero_mae:.4}");
            let mut checkpoints = Vec::new();
            for mode in [HeadMode::Sum, HeadMode::Drlabel] {
                let t0 = Instant::now();
                let params = ModelParams::init(&dims, mode, 0, 1);
                let config = TrainConfig {
                    epochs,
                    seed: 2,
                    lr,
                    ..TrainConfig::default()
                };
                let (trained, history) = train(params, &train_recs, &val_recs, &config).unwrap();
                let m = evaluate(&trained, &test_recs, 0.02).unwrap();
                println!(
                    "{mode}: {:.0} s total | test energy MAE {:.3} node MAE {:.4} | val node start {:.3} end {:.3}",
                    t0.elapsed().as_secs_f64(),
                    m.energy_mae,
                    m.node_l2_mae,
                    history.first().unwrap().val_node_mae,
                    history.last().unwrap().val_node_mae,
                );
                checkpoints.push(trained);
            }
            // robustness sweep
            let clean_sum = evaluate(&checkpoints[0], &test_recs, 0.02).unwrap().node_l2_mae;
            let clean_drl = evaluate(&checkpoints[1], &test_recs, 0.02).unwrap().node_l2_mae;
            println!("clean: sum {clean_sum:.4} drl {clean_drl:.4}");
            for mode in [PerturbMode::Drop, PerturbMode::AddDuplicate] {
                for frac in [0.1, 0.2, 0.3, 0.4, 0.5, 0.6] {
                    let graphs: Vec<DirectedGraph> = test_recs
                        .iter()
                        .enumerate()
                        .map(|(i, r)| {
                            perturb_graph(&r.graph(), mode, frac, 1000 + i as u64)
                                .unwrap()
                                .0
                        })
                        .collect();
                    let s = evaluate_with_graphs(&checkpoints[0], &test_recs, &graphs, 0.02)
                        .unwrap()
                        .node_l2_mae;
                    let d = evaluate_with_graphs(&checkpoints[1], &test_recs, &graphs, 0.02)
                        .unwrap()
                        .node_l2_mae;
                    println!(
                        "{mode} {frac:.1}: sum delta {:+.4} drl delta {:+.4} (margin {:+.4})",
                        s - clean_sum,
                        d - clean_drl,
                        (s - clean_sum) - (d - clean_drl)
                    );
                }
            }
        }
        "noisy" => {
            let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300);
            let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(15);
            let records = gen_records(n, (8, 12), 13);
            let spec = SplitSpec::Fractions { train: 0.7, val: 0.1, test: 0.2 };
            let (tr, va, te) = split_indices(records.len(), &spec, 5).unwrap();
            let pick = |idx: &Vec<usize>| -> Vec<DatasetRecord> {
                idx.iter().map(|&i| records[i].clone()).collect()
            };
            let (train_recs, val_recs, test_recs) = (pick(&tr), pick(&va), pick(&te));
            let dims = ModelDims::default();
            for mode in [HeadMode::Sum, HeadMode::Drlabel] {
                for noisy in [0.0, 0.5] {
                    let mut maes = Vec::new();
                    let mut node_maes = Vec::new();
                    for seed in 0..3u64 {
                        let params = ModelParams::init(&dims, mode, 0, seed);
                        let config = TrainConfig {
                            epochs,
                            seed: 100 + seed,
                            noisy_fraction: noisy,
                            noisy_sigma: 0.05,
                            weights: LossWeights::default(),
                            ..TrainConfig::default()
                        };
                        let (trained, _) = train(params, &train_recs, &val_recs, &config).unwrap();
                        let m = evaluate(&trained, &test_recs, 0.02).unwrap();
                        maes.push(m.energy_mae);
                        node_maes.push(m.node_l2_mae);
                    }
                    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
                    println!(
                        "{mode} noisy={noisy}: energy MAE mean {:.4}, node MAE mean {:.4}",
                        mean(&maes),
                        mean(&node_maes)
                    );
                }
            }
        }
        "diag" => {
            let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(400);
            let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20);
            let records = gen_records(n, (8, 14), 11);
            let spec = SplitSpec::Fractions { train: 0.8, val: 0.1, test: 0.1 };
            let (tr, va, te) = split_indices(records.len(), &spec, 5).unwrap();
            let pick = |idx: &Vec<usize>| -> Vec<DatasetRecord> {
                idx.iter().map(|&i| records[i].clone()).collect()
            };
            let (train_recs, val_recs, test_recs) = (pick(&tr), pick(&va), pick(&te));
            let dims = ModelDims::default();
            for (lambda, gamma) in [(1.0, 1.0), (0.0, 1.0), (1.0, 5.0)] {
                let params = ModelParams::init(&dims, HeadMode::Drlabel, 0, 1);
                let config = TrainConfig {
                    epochs,
                    seed: 2,
                    weights: LossWeights { lambda, gamma },
                    ..TrainConfig::default()
                };
                let (trained, history) = train(params, &train_recs, &val_recs, &config).unwrap();
                println!("lambda={lambda} gamma={gamma}");
                for row in history.iter().step_by((epochs / 6).max(1)) {
                    println!(
                        "  epoch {:2}: L_G {:.3} L_V {:.3} L_E {:.4} | val node {:.3}",
                        row.epoch, row.train_graph, row.train_node, row.train_edge, row.val_node_mae
                    );
                }
                let m = evaluate(&trained, &test_recs, 0.02).unwrap();
                // displacement outlier scan
                let mut max_disp = 0.0_f64;
                let mut big = 0usize;
                let mut count = 0usize;
                for r in &test_recs {
                    let edges: Vec<(usize, usize)> = r.edges.iter().map(|&[i, j]| (i, j)).collect();
                    let input = drlabel::model::ModelInput {
                        atom_types: &r.atom_types,
                        positions: &r.initial_positions,
                        edges: &edges,
                    };
                    let pass = drlabel::model::forward(&trained, &input, Default::default()).unwrap();
                    for d in pass.displacements() {
                        let nd = d.norm();
                        max_disp = max_disp.max(nd);
                        if nd > 10.0 { big += 1; }
                        count += 1;
                    }
                }
                println!(
                    "  test: node MAE {:.4}, energy MAE {:.3}; |D| max {:.2}, >10: {big}/{count}",
                    m.node_l2_mae, m.energy_mae, max_disp
                );
            }
        }
        "sweep" => {
            // hyperparameter probe on the near-equilibrium task
            let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(600);
            let records = gen_records_with(n, (8, 14), 11, &drlabel::graph::GraphPolicy::Full);
            let spec = SplitSpec::Fractions { train: 0.8, val: 0.2, test: 0.0 };
            let (tr, va, _) = split_indices(records.len(), &spec, 5).unwrap();
            let pick = |idx: &Vec<usize>| -> Vec<DatasetRecord> {
                idx.iter().map(|&i| records[i].clone()).collect()
            };
            let (train_recs, val_recs) = (pick(&tr), pick(&va));
            for (label, lambda, gamma, lr, hidden, n_gbf, epochs, batch) in [
                ("balance", 4.0, 4.0, 2e-3, 64usize, 32usize, 100usize, 16usize),
                ("fast-lr", 1.0, 1.0, 5e-3, 64, 32, 100, 16),
                ("balance+res", 4.0, 4.0, 2e-3, 64, 64, 100, 16),
                ("small-batch", 4.0, 4.0, 2e-3, 64, 32, 100, 8),
            ] {
                let dims = ModelDims { hidden, n_gbf, gbf_max_dist: 5.0, ..ModelDims::default() };
                let params = ModelParams::init(&dims, HeadMode::Drlabel, 0, 1);
                let config = TrainConfig {
                    epochs,
                    seed: 2,
                    lr,
                    batch_size: batch,
                    weights: LossWeights { lambda, gamma },
                    ..TrainConfig::default()
                };
                let t0 = Instant::now();
                let (_, history) = train(params, &train_recs, &val_recs, &config).unwrap();
                let h = |i: usize| &history[i.min(history.len() - 1)];
                println!(
                    "{label}: L_E {:.3}->{:.3}->{:.3}, val node {:.3}->{:.3}->{:.3} ({:.0}s)",
                    h(0).train_edge, h(epochs / 2).train_edge, h(epochs - 1).train_edge,
                    h(0).val_node_mae, h(epochs / 2).val_node_mae, h(epochs - 1).val_node_mae,
                    t0.elapsed().as_secs_f64()
                );
            }
        }
        other => eprintln!("unknown scenario {other}"),
    }
}
