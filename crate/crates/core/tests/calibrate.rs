//! Scratch calibration harness (removed before release).

use flowcount::grid::*;
use flowcount::loss::LossWeights;
use flowcount::model::*;
use flowcount::render::*;
use flowcount::sim::*;
use flowcount::train::*;
use std::collections::BTreeMap;
use std::time::Instant;

fn shape16() -> GridShape {
    GridShape::new(16, 16, 2).unwrap()
}

fn train_sim(seed: u64) -> SimConfig {
    SimConfig {
        shape: shape16(),
        n_agents: 200,
        speed_max: 0.5,
        entry_rate: 1.0,
        exit_enabled: true,
        motion_model: MotionModel::Lanes,
        seed,
        n_frames: 300,
    }
}

fn test_sim(seed: u64, n_agents: usize) -> SimConfig {
    SimConfig {
        shape: shape16(),
        n_agents,
        speed_max: 0.5,
        entry_rate: 0.0,
        exit_enabled: false,
        motion_model: MotionModel::Lanes,
        seed,
        n_frames: 30,
    }
}

struct Bench {
    train_seq: Sequence,
    targets: BTreeMap<usize, DensityMap>,
    test: Vec<(Sequence, Vec<(usize, f64)>)>,
    train_counts: Vec<f64>,
}

fn build_bench(seed: u64) -> Bench {
    let config = train_sim(seed);
    let shape = config.shape;
    let states = run(&config).unwrap();
    let frames: Vec<_> = states.iter().map(|s| rasterize(s, &config)).collect();
    let kernel = KernelSpec::new(1.0, 4.0).unwrap();
    let targets: BTreeMap<usize, DensityMap> = states
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let heads = s.head_pixels(shape);
            (
                t,
                render_density(&AnnotationFrame::new(t, heads), &kernel, shape).unwrap(),
            )
        })
        .collect();
    let train_counts: Vec<f64> = states.iter().map(|s| s.agents.len() as f64).collect();
    let mut test = Vec::new();
    for (i, n_agents) in [60usize, 110, 170].into_iter().enumerate() {
        let tc = test_sim(seed * 1000 + i as u64 + 1, n_agents);
        let tstates = run(&tc).unwrap();
        let tframes: Vec<_> = tstates.iter().map(|s| rasterize(s, &tc)).collect();
        let eval: Vec<(usize, f64)> = (1..tstates.len())
            .map(|t| (t, tstates[t].agents.len() as f64))
            .collect();
        test.push((Sequence::new(tframes).unwrap(), eval));
    }
    Bench {
        train_seq: Sequence::new(frames).unwrap(),
        targets,
        test,
        train_counts,
    }
}

fn eval_bench(regr: &FlowRegressor, bench: &Bench) -> (f64, f64) {
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for (seq, frames) in &bench.test {
        for &(t, z) in frames {
            let fwd = regr.forward(&seq.frames[t - 1], &seq.frames[t]).unwrap();
            let bwd = regr.forward(&seq.frames[t], &seq.frames[t - 1]).unwrap();
            let d = reconstruct_density(&fwd, &bwd, ReconMode::Averaged).unwrap();
            truth.push(z);
            pred.push(d.total());
        }
    }
    mae_rmse(&truth, &pred).unwrap()
}

fn baseline_mae(bench: &Bench) -> f64 {
    let mean: f64 = bench.train_counts.iter().sum::<f64>() / bench.train_counts.len() as f64;
    let mut truth = Vec::new();
    for (_, frames) in &bench.test {
        truth.extend(frames.iter().map(|&(_, z)| z));
    }
    mae_rmse(&truth, &vec![mean; truth.len()]).unwrap().0
}

#[test]
#[ignore]
fn quality_probe() {
    let arch = FlowArch {
        cell_px: 2,
        enc_channels: [4, 8, 8],
        dec_hidden: 8,
    };
    let mut means = std::collections::BTreeMap::<&str, Vec<f64>>::new();
    for seed in [1u64, 2, 3, 4, 5] {
        let bench = build_bench(seed);
        println!(
            "seed {seed}: train counts {}..{}, baseline MAE {:.2}",
            bench.train_counts[0],
            bench.train_counts.last().unwrap(),
            baseline_mae(&bench)
        );
        for (name, alpha, v, steps) in [
            ("cycle", 1.0, 1usize, 800usize),
            ("nocycle", 0.0, 1, 800),
            ("v2", 1.0, 2, 800),
            ("v5", 1.0, 5, 800),
        ] {
            let mut regr = FlowRegressor::init(arch, seed).unwrap();
            let config = TrainConfig {
                keyframe_interval: v,
                max_steps: steps,
                batch: 2,
                learning_rate: 1e-3,
                weights: LossWeights {
                    alpha,
                    ..Default::default()
                },
                seed,
                ..Default::default()
            };
            let t0 = Instant::now();
            train_three_frame(&mut regr, &bench.train_seq, &bench.targets, &config, None)
                .unwrap();
            let (mae, rmse) = eval_bench(&regr, &bench);
            means.entry(name).or_default().push(mae);
            println!(
                "  {name}: MAE {mae:.2} RMSE {rmse:.2} ({:.0}s)",
                t0.elapsed().as_secs_f64()
            );
        }
    }
    for (name, maes) in &means {
        println!(
            "MEAN {name}: {:.3}",
            maes.iter().sum::<f64>() / maes.len() as f64
        );
    }
}
