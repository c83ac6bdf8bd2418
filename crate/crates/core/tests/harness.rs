use std::fs;
use std::path::Path;

use acktr::agent::StepMetrics;
use acktr::harness::{
    first_crossing, format_report, format_row, parse_metrics, plot_data, read_metrics, report_run, run, sweep_report,
    RunConfig, CONFIG_FILE, METRICS_FILE, METRICS_HEADER, STATUS_FILE,
};

const GOLDEN_HEADER: &str =
    "update_index,timesteps,episodes,mean_reward_100,policy_loss,value_loss,entropy,eta_effective,quad_kl,exact_kl,sigma_critic,step_wall_ms";

fn metrics(update_index: usize) -> StepMetrics {
    StepMetrics {
        update_index,
        timesteps: 80 * update_index,
        episodes: 3,
        mean_reward_100: Some(21.5),
        policy_loss: -0.0123456789,
        value_loss: 1234.5678,
        entropy: 0.693147,
        eta_effective: 0.25,
        quad_kl: Some(0.001),
        clip_active: false,
        exact_kl: None,
        sigma_critic: 1.0,
        step_wall_ms: 2.71828,
    }
}

#[test]
fn csv_header_and_row_are_golden() {
    assert_eq!(METRICS_HEADER.join(","), GOLDEN_HEADER);
    let row = format_row(&metrics(7), true);
    assert_eq!(row, "7,560,3,21.5000,-0.0123457,1234.57,0.693147,0.250000,0.00100000,,1.00000,2.71828");
    let untimed = format_row(&metrics(7), false);
    assert!(untimed.ends_with(",1.00000,"), "{untimed}");

    let mut m = metrics(1);
    m.mean_reward_100 = None;
    m.quad_kl = Some(f64::NAN);
    m.policy_loss = f64::INFINITY;
    assert_eq!(format_row(&m, true), "1,80,3,,,1234.57,0.693147,0.250000,,,1.00000,2.71828");
}

#[test]
fn written_rows_parse_back() {
    let text = format!("{GOLDEN_HEADER}\n{}\n{}\n", format_row(&metrics(1), true), format_row(&metrics(2), false));
    let rows = parse_metrics(&text).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].mean_reward_100, Some(21.5));
    assert_eq!(rows[1].step_wall_ms, None);
    assert_eq!(rows[1].exact_kl, None);

    let backwards = format!("{GOLDEN_HEADER}\n{}\n{}\n", format_row(&metrics(2), true), format_row(&metrics(1), true));
    assert!(parse_metrics(&backwards).is_err());
    assert!(parse_metrics("update_index,timesteps\n").is_err());
}

/// Writes a finished-looking run directory with the given trailing means.
fn fixture(dir: &Path, threshold: f64, rewards: &[Option<f64>], complete: bool) {
    fs::create_dir_all(dir).unwrap();
    let mut cfg = RunConfig::for_env("cartpole").unwrap();
    cfg.threshold = threshold;
    cfg.output_dir = dir.to_path_buf();
    fs::write(dir.join(CONFIG_FILE), cfg.to_text()).unwrap();
    let mut text = format!("{GOLDEN_HEADER}\n");
    for (i, r) in rewards.iter().enumerate() {
        let mut m = metrics(i + 1);
        m.timesteps = 100 * (i + 1);
        m.mean_reward_100 = *r;
        text.push_str(&format_row(&m, false));
        text.push('\n');
    }
    fs::write(dir.join(METRICS_FILE), text).unwrap();
    if complete {
        fs::write(dir.join(STATUS_FILE), "complete\n").unwrap();
    }
}

#[test]
fn report_cells_follow_the_threshold_rules() {
    let tmp = tempfile::tempdir().unwrap();
    let sweep = tmp.path();
    fixture(&sweep.join("a-never"), 195.0, &[Some(10.0), Some(50.0), Some(194.9)], true);
    fixture(&sweep.join("b-below-first"), 5.0, &[Some(10.0), Some(50.0)], true);
    fixture(&sweep.join("c-known-row"), 40.0, &[None, Some(10.0), Some(39.99), Some(40.0), Some(80.0)], true);
    fixture(&sweep.join("d-incomplete"), 40.0, &[Some(10.0)], false);

    let rows = sweep_report(sweep).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].timesteps_to_threshold, None);
    assert_eq!(rows[0].final_mean_reward_100, Some(194.9));
    assert_eq!(rows[1].updates_to_threshold, Some(1));
    assert_eq!(rows[1].timesteps_to_threshold, Some(100));
    assert_eq!(rows[2].updates_to_threshold, Some(4));
    assert_eq!(rows[2].timesteps_to_threshold, Some(400));
    assert!(!rows[3].complete);

    let table = format_report(&rows);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "cell,final_mean_reward_100,timesteps_to_threshold,updates_to_threshold,status");
    assert_eq!(lines[1], "a-never,194.900,,,complete");
    assert_eq!(lines[3], "c-known-row,80.0000,400,4,complete");
    assert!(lines[4].ends_with(",incomplete"));
}

#[test]
fn plot_data_matches_hand_computation() {
    let tmp = tempfile::tempdir().unwrap();
    let series = [[10.0, 20.0, 30.0], [12.0, 26.0, 30.0], [14.0, 23.0, 36.0]];
    let logs: Vec<_> = series
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let dir = tmp.path().join(format!("seed{i}"));
            fixture(&dir, 195.0, &s.map(Some), true);
            read_metrics(&dir.join(METRICS_FILE)).unwrap()
        })
        .collect();
    let out = plot_data(&logs);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "update_index,runs,timesteps_mean,mean_reward_100_mean,mean_reward_100_std");
    // update 1: mean 12, deviations -2 0 2, variance 8/2 = 4
    assert_eq!(lines[1], "1,3,100.000,12.0000,2.00000");
    // update 2: mean 23, deviations -3 3 0, variance 18/2 = 9
    assert_eq!(lines[2], "2,3,200.000,23.0000,3.00000");
    // update 3: mean 32, deviations -2 -2 4, variance 24/2 = 12
    assert_eq!(lines[3], format!("3,3,300.000,32.0000,{}", acktr::harness::format_sig6(12f64.sqrt())));
    assert_eq!(lines.len(), 4);
}

#[test]
fn crossing_ignores_blank_rewards() {
    let text = format!(
        "{GOLDEN_HEADER}\n1,80,0,,0,0,0,0,,,1,\n2,160,1,300.000,0,0,0,0,,,1,\n"
    );
    let rows = parse_metrics(&text).unwrap();
    assert_eq!(first_crossing(&rows, 195.0).map(|r| r.update_index), Some(2));
}

#[test]
fn run_directory_layout_and_reproduction() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::for_env("pendulum").unwrap();
    cfg.trainer.hidden = vec![4];
    cfg.trainer.total_timesteps = 400;
    cfg.trainer.exact_kl_interval = 2;
    cfg.record_timing = false;
    cfg.checkpoint_interval = 2;
    cfg.output_dir = tmp.path().join("first");
    let result = run(&cfg).unwrap();
    assert_eq!(result.metrics.len(), 5);
    let dir = &cfg.output_dir;
    for f in ["initial_actor", "initial_critic", "final_actor", "final_critic", "update_0000002_actor"] {
        assert!(dir.join("checkpoints").join(format!("{f}.ckpt")).is_file(), "{f}");
    }
    let report = report_run(dir).unwrap();
    assert!(report.complete);

    let mut again = RunConfig::load(&dir.join(CONFIG_FILE)).unwrap();
    assert_eq!(again, cfg);
    again.output_dir = tmp.path().join("second");
    run(&again).unwrap();
    let a = fs::read(dir.join(METRICS_FILE)).unwrap();
    let b = fs::read(again.output_dir.join(METRICS_FILE)).unwrap();
    assert_eq!(a, b);
    let final_model = acktr::harness::load_model(&dir.join("checkpoints"), "final").unwrap();
    assert_eq!(final_model, result.model);
}

#[test]
fn zero_timesteps_writes_header_and_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::for_env("gridchain").unwrap();
    cfg.trainer.total_timesteps = 0;
    cfg.output_dir = tmp.path().to_path_buf();
    let result = run(&cfg).unwrap();
    assert!(result.metrics.is_empty());
    assert_eq!(fs::read_to_string(tmp.path().join(METRICS_FILE)).unwrap(), format!("{GOLDEN_HEADER}\n"));
    assert!(tmp.path().join("checkpoints/initial.ckpt").is_file());
}
