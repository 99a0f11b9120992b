use gameirl::matops::hat_vec;
use gameirl::scenario::load_config;
use gameirl::sim::{collect_expert_batch, collect_learner_batch, step_rk4, CollectOptions, DataBatch, SignalSpec};
use gameirl::{check_rank, run_algorithm2, Error, IrlConfig, Mat, SystemDynamics, Vector};

fn scalar(a: f64, b: f64, d: f64) -> SystemDynamics {
    SystemDynamics::new(
        Mat::from_element(1, 1, a),
        Mat::from_element(1, 1, b),
        Mat::from_element(1, 1, d),
    )
    .unwrap()
}

fn reference_config() -> gameirl::scenario::ScenarioConfig {
    load_config(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../configs/two_state_game.toml"
    ))
    .unwrap()
}

fn rk4_error(h: f64) -> f64 {
    let sys = scalar(-1.0, 0.0, 0.0);
    let zero = Vector::zeros(1);
    let steps = (1.0 / h).round() as usize;
    let mut x = Vector::from_element(1, 1.0);
    for _ in 0..steps {
        x = step_rk4(&sys, &x, &zero, &zero, h).unwrap();
    }
    (x[0] - (-1.0f64).exp()).abs()
}

#[test]
fn rk4_is_fourth_order() {
    let fine = rk4_error(0.001);
    assert!(fine < 1e-10, "error {fine}");
    let ratio = rk4_error(0.02) / rk4_error(0.01);
    assert!((ratio - 16.0).abs() < 1.0, "ratio {ratio}");
}

#[test]
fn rk4_single_step_exponential() {
    let sys = scalar(-1.0, 0.0, 0.0);
    let zero = Vector::zeros(1);
    let x = step_rk4(&sys, &Vector::from_element(1, 1.0), &zero, &zero, 0.1).unwrap();
    assert!((x[0] - (-0.1f64).exp()).abs() < 1e-6);
}

fn learner_ixx(t_window: f64, h: f64) -> f64 {
    let sys = scalar(-1.0, 1.0, 0.0);
    let mut opts = CollectOptions::new(t_window, 1, Vector::from_element(1, 1.0));
    opts.h = h;
    let batch = collect_learner_batch(&sys, &Mat::zeros(1, 1), &SignalSpec::zero(), &opts).unwrap();
    batch.windows[0].i_xx[0]
}

#[test]
fn learner_ixx_matches_closed_form() {
    let t: f64 = 0.1;
    let exact = (1.0 - (-2.0 * t).exp()) / 2.0;
    assert!((learner_ixx(t, t / 100.0) - exact).abs() < 1e-7);
}

#[test]
fn trapezoid_error_is_second_order() {
    let t: f64 = 0.5;
    let exact = (1.0 - (-2.0 * t).exp()) / 2.0;
    let coarse = (learner_ixx(t, t / 8.0) - exact).abs();
    let fine = (learner_ixx(t, t / 16.0) - exact).abs();
    let ratio = coarse / fine;
    assert!((ratio - 4.0).abs() < 0.3, "ratio {ratio}");
}

#[test]
fn d_xx_is_the_hat_increment() {
    let cfg = reference_config();
    let (k_t, _) = cfg.expert_gain().unwrap();
    let (expert, learner) = cfg.collect(&k_t).unwrap();
    for batch in [&expert, &learner] {
        for w in &batch.windows {
            let inc = hat_vec(w.end_state.as_slice()).unwrap() - hat_vec(w.start_state.as_slice()).unwrap();
            assert_eq!(w.d_xx, inc);
        }
        for pair in batch.windows.windows(2) {
            assert_eq!(pair[0].end_state, pair[1].start_state);
        }
    }
}

#[test]
fn reference_batches_pass_rank_conditions() {
    let cfg = reference_config();
    let (k_t, _) = cfg.expert_gain().unwrap();
    let (expert, learner) = cfg.collect(&k_t).unwrap();
    assert_eq!(expert.len(), 510);
    let rank = check_rank(&expert, &learner);
    assert!(rank.passed(), "{rank:?}");
    assert_eq!(rank.expert_required, 7);
    assert_eq!(rank.learner_required, 3);
}

#[test]
fn no_probing_no_disturbance_fails_rank() {
    let cfg = reference_config();
    let (k_t, _) = cfg.expert_gain().unwrap();
    let opts = CollectOptions::new(cfg.data.t_window, 510, cfg.data.x0.clone());
    let expert = collect_expert_batch(&cfg.dynamics, &k_t, &SignalSpec::zero(), &SignalSpec::zero(), &opts).unwrap();
    let k_b = cfg.learner.k_b.clone().unwrap();
    let learner = collect_learner_batch(&cfg.dynamics, &k_b, &SignalSpec::zero(), &opts).unwrap();
    let rank = check_rank(&expert, &learner);
    assert!(!rank.expert_pass);
    assert!(rank.expert_rank < rank.expert_required);

    let irl = IrlConfig::new(cfg.learner.r.clone(), cfg.learner.gamma, cfg.learner.q0.clone()).unwrap();
    match run_algorithm2(&expert, &learner, &irl) {
        Err(Error::RankDeficient { .. }) => {}
        other => panic!("expected rank deficiency, got {other:?}"),
    }
}

#[test]
fn batches_are_reproducible_and_csv_lossless() {
    let cfg = reference_config();
    let (k_t, _) = cfg.expert_gain().unwrap();
    let (e1, l1) = cfg.collect(&k_t).unwrap();
    let (e2, l2) = cfg.collect(&k_t).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(l1, l2);

    for batch in [&e1, &l1] {
        let mut buf = Vec::new();
        batch.write_csv(&mut buf).unwrap();
        let back = DataBatch::read_csv(buf.as_slice()).unwrap();
        assert_eq!(&back, batch);
        let mut again = Vec::new();
        back.write_csv(&mut again).unwrap();
        assert_eq!(buf, again);
    }
}

#[test]
fn different_seeds_give_different_data() {
    let mut cfg = reference_config();
    let (k_t, _) = cfg.expert_gain().unwrap();
    let (e1, _) = cfg.collect(&k_t).unwrap();
    cfg.reseed(12345);
    let (e2, _) = cfg.collect(&k_t).unwrap();
    assert_ne!(e1, e2);
}
