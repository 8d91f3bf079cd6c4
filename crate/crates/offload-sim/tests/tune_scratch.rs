//! Scratch tuning harness (not part of the deliverable test suite; removed
//! once the acceptance env parameters are frozen).

use offload_sim::config::{ChannelSpec, SystemConfig, Technology, TraceSource};
use offload_sim::env::Env;
use offload_sim::eval::brute_force_oracle;
use offload_sim::ppg::{evaluate, train, PpgAgent, PpgKind};
use offload_sim::traces::{SyntheticTraceSpec, TraceModel};
use rayon::prelude::*;

fn constant_source(rate_bps: f64) -> TraceSource {
    TraceSource::Synthetic(SyntheticTraceSpec {
        mean_bps: rate_bps,
        std_bps: 0.0,
        model: TraceModel::IidLognormal,
        correlation: 0.0,
        sample_period_s: 1.0,
    })
}

fn variant(seed: u64, mec: f64, size: f64, lambda: f64, i_std: f64) -> SystemConfig {
    let mut cfg = SystemConfig::default();
    cfg.num_users = 2;
    cfg.num_channels = 2;
    cfg.episode_len = 36;
    cfg.seed = seed;
    cfg.reward_scale = 1e8;
    cfg.lambda_init = lambda;
    cfg.channels = vec![
        ChannelSpec {
            id: 1,
            technology: Technology::FiveG,
            tx_power_coeff_mw_per_mbps: 5.27,
            rx_power_coeff_mw_per_mbps: None,
            uplink: constant_source(1e8),
            downlink: constant_source(1e8),
        },
        ChannelSpec {
            id: 2,
            technology: Technology::FourG,
            tx_power_coeff_mw_per_mbps: 55.0,
            rx_power_coeff_mw_per_mbps: None,
            uplink: constant_source(1e8),
            downlink: constant_source(1e8),
        },
    ];
    cfg.compute.mec_total_speed_bps = mec;
    cfg.compute.reference_intensity_cpb = Some(1.0);
    cfg.task_gen.layer_weights = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    cfg.task_gen.layer_size_mean_bits[0] = size;
    cfg.task_gen.layer_size_std_bits = [0.0; 7];
    cfg.task_gen.intensity.mean_cpb = 2.0;
    cfg.task_gen.intensity.std_cpb = i_std;
    assert!(cfg.validate().is_empty());
    cfg
}

#[test]
#[ignore]
fn tune_micro_env() {
    let variants: Vec<(&str, f64, f64, f64, f64)> = vec![
        ("A mec2e8", 2e8, 1e7, 0.0, 1.5),
        ("B mec1.5e8", 1.5e8, 1e7, 0.0, 1.5),
        ("C mec2e8 s2e7 l8", 2e8, 2e7, 8.0, 1.5),
        ("D mec1.2e8", 1.2e8, 1e7, 0.0, 1.5),
        ("E mec3e8 std2.5", 3e8, 1e7, 0.0, 2.5),
    ];
    for (name, mec, size, lambda, istd) in variants {
        let scores: Vec<(f64, f64)> = [11u64, 22, 33]
            .par_iter()
            .map(|&seed| {
                let cfg = variant(seed, mec, size, lambda, istd);
                let mut env = Env::new(&cfg).unwrap();
                let oracle = brute_force_oracle(&mut env, 40, 9000 + seed).unwrap();
                let mut cppg = PpgAgent::new(PpgKind::Cppg, &cfg, seed).unwrap();
                train(&mut env, &mut cppg, 500, seed, |_| {}).unwrap();
                let rc = evaluate(&mut env, &cppg, 40, 9000 + seed).unwrap();
                let sc = rc.iter().map(|r| r.reward).sum::<f64>() / rc.len() as f64;
                let mut ippg = PpgAgent::new(PpgKind::Ippg, &cfg, seed).unwrap();
                train(&mut env, &mut ippg, 500, seed, |_| {}).unwrap();
                let ri = evaluate(&mut env, &ippg, 40, 9000 + seed).unwrap();
                let si = ri.iter().map(|r| r.reward).sum::<f64>() / ri.len() as f64;
                (sc / oracle.mean_best_reward, si / oracle.mean_best_reward)
            })
            .collect();
        let fmt: Vec<String> = scores
            .iter()
            .map(|(c, i)| format!("cppg {c:.3} ippg {i:.3}"))
            .collect();
        println!("{name}: {}", fmt.join(" | "));
    }
}
