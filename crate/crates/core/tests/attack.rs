use std::sync::Arc;

use ppfl_core::analysis::{collusion_attack, AnalysisError, AttackResult};
use ppfl_core::config::{ExperimentConfig, Scenario};
use ppfl_core::dpnoise::NoiseHook;
use ppfl_core::experiment::{run_attack, split_dataset, Split};
use ppfl_core::keyexchange::DhParams;
use ppfl_core::protocol::{Capture, Federation, MemorySink, Mode, RoundTranscript};
use ppfl_core::regression::synthetic;

fn config(n: usize, mode: Mode, hook: NoiseHook, iterations: u32, scenarios: &[Scenario]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        n_clients: n,
        local_iterations: 2,
        local_size: 20,
        dh_group: "toy23".into(),
        mode,
        noise_hook: hook,
        epsilon: 0.05,
        ..Default::default()
    };
    cfg.attack.iterations = iterations;
    cfg.attack.scenarios = scenarios.to_vec();
    cfg
}

fn data(cfg: &ExperimentConfig) -> Split {
    split_dataset(&synthetic(400, 3, 9).unwrap(), cfg).unwrap()
}

fn transcripts(cfg: &ExperimentConfig) -> Vec<RoundTranscript> {
    let split = data(cfg);
    let params = cfg.protocol_params(3, Capture::Weights([0].into())).unwrap();
    let (mut fed, initial) = Federation::setup(Arc::new(params), &cfg.seeds, split.train).unwrap();
    let mut out = Vec::new();
    let mut sink = MemorySink::new(|t| out.push(t));
    fed.run_fifo(initial, &mut sink, |_| {}).unwrap();
    drop(sink);
    out
}

fn by_scenario(results: &[AttackResult], s: Scenario) -> &AttackResult {
    results.iter().find(|r| r.scenario == s).unwrap()
}

#[test]
fn without_noise_the_naive_attack_is_exact() {
    let cfg = config(5, Mode::Oblivious, NoiseHook::Zero, 30, &[Scenario::Naive]);
    let run = run_attack(&cfg, &data(&cfg), Arc::new(DhParams::toy())).unwrap();
    let r = &run.results[0];
    assert_eq!(r.estimates.len(), 30);
    for (e, a) in r.estimates.iter().zip(&r.actuals) {
        assert!((e - a).abs() < 1e-5, "{e} vs {a}");
    }
    assert!(r.r_squared.defined);
    assert!(r.r_squared.value > 1.0 - 1e-6, "{:?}", r.r_squared);
}

#[test]
fn non_oblivious_residual_is_the_honest_share() {
    let mut cfg = config(6, Mode::NonOblivious, NoiseHook::Live, 25, &[Scenario::NonOblivious]);
    cfg.rounds = 25;
    let ts = transcripts(&cfg);
    let fp = cfg.fixed_point_params().unwrap();
    let r = collusion_attack(&ts, 0, 0, 6, Scenario::NonOblivious, fp, 1).unwrap();
    for (t, res) in ts.iter().zip(r.residuals()) {
        let share = t.party(0, 0).unwrap().local_share.unwrap();
        assert!((res - share).abs() < 1e-5, "round {}: {res} vs {share}", t.round);
    }
}

#[test]
fn scenario_and_mode_must_agree() {
    let mut cfg = config(4, Mode::NonOblivious, NoiseHook::Live, 3, &[]);
    cfg.rounds = 3;
    let fp = cfg.fixed_point_params().unwrap();
    let ts = transcripts(&cfg);
    let err = collusion_attack(&ts, 0, 0, 4, Scenario::Diff, fp, 1).unwrap_err();
    assert!(matches!(err, AnalysisError::ModeMismatch { scenario: Scenario::Diff, .. }), "{err}");

    cfg.mode = Mode::Oblivious;
    let ts = transcripts(&cfg);
    let err = collusion_attack(&ts, 0, 0, 4, Scenario::NonOblivious, fp, 1).unwrap_err();
    assert!(matches!(err, AnalysisError::ModeMismatch { .. }), "{err}");
}

#[test]
fn untracked_weights_are_missing() {
    let mut cfg = config(4, Mode::Oblivious, NoiseHook::Live, 2, &[]);
    cfg.rounds = 2;
    let fp = cfg.fixed_point_params().unwrap();
    let ts = transcripts(&cfg);
    let err = collusion_attack(&ts, 1, 0, 4, Scenario::Naive, fp, 1).unwrap_err();
    assert!(matches!(err, AnalysisError::MissingLogs { .. }), "{err}");
}

#[test]
fn leakage_orders_the_scenarios() {
    let n = 10;
    let iterations = 600;
    let obl = config(n, Mode::Oblivious, NoiseHook::Live, iterations, &[
        Scenario::Naive,
        Scenario::Random,
        Scenario::Mean,
        Scenario::Diff,
    ]);
    let non = config(n, Mode::NonOblivious, NoiseHook::Live, iterations, &[Scenario::NonOblivious]);
    let dh = Arc::new(DhParams::toy());
    let a = run_attack(&obl, &data(&obl), Arc::clone(&dh)).unwrap().results;
    let b = run_attack(&non, &data(&non), dh).unwrap().results;
    let v = |r: &AttackResult| r.residual_variance();
    let naive = v(by_scenario(&a, Scenario::Naive));
    let random = v(by_scenario(&a, Scenario::Random));
    let mean = v(by_scenario(&a, Scenario::Mean));
    let diff = v(by_scenario(&a, Scenario::Diff));
    let non_obl = v(&b[0]);
    eprintln!("naive {naive} random {random} mean {mean} diff {diff} non_obl {non_obl}");

    for (name, v) in [("mean", mean), ("diff", diff)] {
        assert!(non_obl < v && v < naive, "{name}: {v}");
    }
    // RANDOM matches NAIVE in expectation; 600 draws put the ratio within 0.25.
    assert!((random / naive - 1.0).abs() < 0.25, "{random} vs {naive}");
    // The honest share carries 1/n of one Laplace variance, the oblivious
    // total n-1 of them.
    let ratio = naive / non_obl;
    let expected = (n * (n - 1)) as f64;
    assert!(ratio > 0.6 * expected && ratio < 1.4 * expected, "{ratio} vs {expected}");

    let lambda = obl.laplace_scale().unwrap();
    let predicted = 2.0 * (n - 1) as f64 * lambda * lambda;
    assert!((naive / predicted - 1.0).abs() < 0.25, "{naive} vs {predicted}");
}
