//! Learning-quality probe (not a correctness test).
use delaymarl_core::config::*;
use delaymarl_core::delay::DelaySpec;
use delaymarl_core::marl::{evaluate, train, NullSink};

#[test]
#[ignore]
fn oracle_probe() {
    let cfg = TrainConfig {
        env: EnvConfig { name: EnvName::GridSpread, grid: 7, n_agents: 3, time_limit: 25 },
        delay: DelaySpec::none(),
        compensator: CompensatorConfig::default(),
        algo: AlgoConfig::default(),
        curriculum: LinearSchedule::default(),
        distill: DistillConfig::default(),
        train: TrainParams { t_max: 50_000, eval_interval: 1_000_000, seed: 1, ..Default::default() },
    };
    let start = std::time::Instant::now();
    let bundle = train(&cfg, None, &mut NullSink).unwrap();
    let stats = evaluate(&bundle, &cfg.delay, 64, 123, 0).unwrap();
    eprintln!(
        "oracle 50k steps: {:.1}s, eval mean {:.2} +- {:.2}",
        start.elapsed().as_secs_f64(),
        stats.mean_return,
        stats.std_return
    );
}
