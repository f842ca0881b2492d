use super::*;
use crate::evaluation::evaluate;
use crate::simulator::Scenario;

fn short_config(duration: f64) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.sim.duration = duration;
    c
}

fn run(c: &PipelineConfig, seed: u64) -> (OdometryOutput<f64>, Scenario) {
    let scenario = Scenario::new(&c.sim, seed);
    let imu = scenario.imu();
    let out = run_odometry::<f64, _>(c, &imu, &scenario, Some(c.sim.extrinsic())).unwrap();
    (out, scenario)
}

#[test]
fn short_circuit_tracks_ground_truth() {
    let c = short_config(12.0);
    let (out, scenario) = run(&c, 3);
    assert!(!out.trajectory.is_empty());
    assert_eq!(out.trajectory.len(), out.diagnostics.len());
    assert_eq!(out.trajectory.len(), out.benchmark.len());
    let gt = scenario.groundtruth(c.groundtruth_rate);
    let report = evaluate(&out.trajectory, &gt, c.eval_max_dt, true).unwrap();
    eprintln!("ate {} are {}", report.ate_rmse, report.are_rmse_deg);
    assert!(report.ate_rmse < 0.1, "ate {}", report.ate_rmse);
    assert!(out.final_state.health().is_healthy(1e-12));
}
