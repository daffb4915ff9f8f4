//! Measured properties of the pipeline on the reference synthetic dataset.

use coe_core::data::{generate_synthetic, SyntheticSpec};
use coe_core::experiment::{load_dataset, run, sensitivity_sweep, stage_one, ExperimentConfig, SweepParam};
use coe_core::refinery::{refine_layer, KnnMode, LearnerParams};

fn reference() -> ExperimentConfig {
    ExperimentConfig {
        epochs: 200,
        ..ExperimentConfig::default()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn refined_neighbors_share_labels() {
    let spec = SyntheticSpec {
        feature_noise: 0.1,
        ..SyntheticSpec::reference(0)
    };
    let (net, labels) = generate_synthetic(&spec).unwrap();
    for layer in &net.layers {
        let params = LearnerParams::ones(net.num_nodes, net.feature_dim, 2);
        let refined = refine_layer(layer, &params, 10, KnnMode::Exact).unwrap();
        let a = refined.adjacency.to_dense();
        let mut agreement = 0.0;
        for i in 0..net.num_nodes {
            let nbrs: Vec<usize> = (0..net.num_nodes).filter(|&j| j != i && a[[i, j]] > 0.0).collect();
            let same = nbrs.iter().filter(|&&j| labels.labels[j] == labels.labels[i]).count();
            agreement += same as f64 / nbrs.len() as f64;
        }
        agreement /= net.num_nodes as f64;
        println!("{}: mean label agreement of refined neighbors {agreement:.3}", layer.name);
        assert!(agreement >= 0.8, "{}: {agreement}", layer.name);
    }
}

#[test]
fn stage_one_loss_drops_by_thirty_percent() {
    let cfg = reference();
    let ds = load_dataset(&cfg.data).unwrap();
    let (_, trace, _) = stage_one(&ds, &cfg, 0).unwrap();
    let first = trace.loss[0];
    let last = *trace.loss.last().unwrap();
    println!("Stage-1 loss {first:.4} -> {last:.4}");
    assert!(first - last >= 0.3 * first.abs(), "{first} -> {last}");
}

#[test]
fn stage_one_loss_settles_over_last_tenth() {
    let cfg = reference();
    let ds = load_dataset(&cfg.data).unwrap();
    let (_, trace, _) = stage_one(&ds, &cfg, 0).unwrap();
    let tail = &trace.loss[trace.loss.len() - trace.loss.len() / 10..];
    let worst_rise = tail.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    println!("largest step-to-step rise over the last 10% of epochs {worst_rise:.2e} (≤ 1e-3)");
    assert!(worst_rise <= 1e-3, "{worst_rise}");
}

#[test]
fn reference_run_orderings() {
    let report = run(&reference()).unwrap();
    let coe = report.accuracies("coe", "default");
    let rf = report.accuracies("rf", "default");
    let wrf = report.accuracies("wrf", "default");
    println!("CoE {:.3}, WRF {:.3}, RF {:.3}", mean(&coe), mean(&wrf), mean(&rf));
    assert!(mean(&coe) >= mean(&wrf) && mean(&wrf) >= mean(&rf));

    let seeds = &reference().seeds;
    for &s in seeds {
        let acc = |name: &str| {
            report
                .experts
                .iter()
                .find(|e| e.seed == s && e.expert == name)
                .map(|e| e.accuracy)
                .unwrap()
        };
        let best_layer = acc("layer0").max(acc("layer1"));
        println!("seed {s}: total {:.3}, best layer {best_layer:.3}", acc("total"));
        assert!(acc("total") >= best_layer - 0.01, "seed {s}");
    }
}

#[test]
fn low_sensitivity_to_alpha_and_k() {
    let cfg = reference();
    let alpha = sensitivity_sweep(&cfg, SweepParam::Alpha, &cfg.alpha_grid).unwrap();
    let grid: Vec<f64> = cfg.k_grid.iter().map(|&k| k as f64).collect();
    let k = sensitivity_sweep(&cfg, SweepParam::K, &grid).unwrap();
    let (sa, sk) = (alpha.spread.unwrap(), k.spread.unwrap());
    println!("spread over α {:.1} points, over K {:.1} points", 100.0 * sa, 100.0 * sk);
    assert!(sa <= 0.03, "α spread {sa}");
    assert!(sk <= 0.03, "K spread {sk}");
}
