use founddiff::dadiff::{Denoiser, DenoiserConfig, InitMode};
use founddiff::diffusion::*;
use founddiff::numcore::{Rng, Tape};
use proptest::prelude::*;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn pair(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = Rng::new(seed);
    let nd: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let ld: Vec<f64> = nd.iter().map(|v| v + 0.05 * rng.normal()).collect();
    let res = ld.iter().zip(&nd).map(|(l, c)| l - c).collect();
    (nd, ld, res)
}

proptest! {
    #[test]
    fn schedule_invariants(steps in 1usize..2000, eta in 0.0f64..2.0) {
        let s = DiffusionSchedule::new(steps, eta).unwrap();
        prop_assert_eq!(s.alpha_bar[steps], 1.0);
        prop_assert_eq!(s.alpha_bar[0], 0.0);
        prop_assert_eq!(s.beta_bar[0], 0.0);
        for t in 1..=steps {
            prop_assert!(s.alpha_bar[t] > s.alpha_bar[t - 1]);
            prop_assert!(s.beta_sq(t) >= 0.0);
        }
    }
}

#[test]
fn forward_sample_endpoints() {
    let s = DiffusionSchedule::new(100, 0.2).unwrap();
    let (nd, ld, res) = pair(30, 1);
    let eps = Rng::new(2).normals(30);
    assert_eq!(forward_sample(&nd, &res, 0, &eps, &s), nd);
    let end = forward_sample(&nd, &res, 100, &vec![0.0; 30], &s);
    assert!(max_diff(&end, &ld) < 1e-15);
}

#[test]
fn single_steps_compose_to_the_marginal() {
    let s = DiffusionSchedule::new(10, 0.3).unwrap();
    let n = 10_000;
    let mut rng = Rng::new(3);
    let (nd, res) = (0.4, -0.1);
    let mut x = vec![nd; n];
    for t in 1..=s.steps {
        let step_sd = s.beta_sq(t).sqrt();
        let step_mean = s.alpha(t) * res;
        for v in x.iter_mut() {
            *v += step_mean + step_sd * rng.normal();
        }
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let target_var = (0.3f64).powi(2);
    assert!((mean - (nd + res)).abs() < 3.0 * (target_var / n as f64).sqrt());
    assert!((var - target_var).abs() < 3.0 * target_var * (2.0 / (n - 1) as f64).sqrt());
}

#[test]
fn noise_estimate_round_trip() {
    let s = DiffusionSchedule::new(100, 0.2).unwrap();
    let (nd, ld, res) = pair(50, 4);
    let eps = Rng::new(5).normals(50);
    let i_t = forward_sample(&nd, &res, 50, &eps, &s);
    assert!(max_diff(&estimate_noise(&i_t, &ld, &res, 50, &s).unwrap(), &eps) < 1e-12);
    let i_end = forward_sample(&nd, &res, 100, &vec![0.0; 50], &s);
    assert!(max_diff(&estimate_noise(&i_end, &ld, &res, 100, &s).unwrap(), &vec![0.0; 50]) < 1e-12);
    let flat = DiffusionSchedule::new(100, 0.0).unwrap();
    assert!(estimate_noise(&i_t, &ld, &res, 50, &flat).is_err());
    assert!(estimate_noise(&i_t, &ld, &res, 0, &s).is_err());
}

#[test]
fn ddim_step_cases() {
    let s = DiffusionSchedule::new(100, 0.2).unwrap();
    let (nd, ld, res) = pair(40, 6);
    let eps = Rng::new(7).normals(40);
    let i_t = forward_sample(&nd, &res, 80, &eps, &s);
    let last = ddim_step(&i_t, 80, 0, &res, Some(&eps), &s, &ld).unwrap();
    let want: Vec<f64> = ld.iter().zip(&res).map(|(l, r)| l - r).collect();
    assert_eq!(last, want);
    assert!(max_diff(&last, &nd) < 1e-14);
    // with the true residual and noise, a jump lands on the marginal
    let mid = ddim_step(&i_t, 80, 30, &res, Some(&eps), &s, &ld).unwrap();
    assert!(max_diff(&mid, &forward_sample(&nd, &res, 30, &eps, &s)) < 1e-14);
    let flat = DiffusionSchedule::new(100, 0.0).unwrap();
    let no_noise = ddim_step(&ld, 100, 50, &res, None, &flat, &ld).unwrap();
    let want: Vec<f64> = ld.iter().zip(&res).map(|(l, r)| l - 0.5 * r).collect();
    assert!(max_diff(&no_noise, &want) < 1e-15);
    assert!(ddim_step(&ld, 50, 50, &res, None, &s, &ld).is_err());
    assert!(ddim_step(&ld, 80, 50, &res, None, &s, &ld).is_err());
}

#[test]
fn oracle_sampler_returns_clean_image() {
    let s = DiffusionSchedule::new(100, 0.2).unwrap();
    let (nd, ld, res) = pair(64, 8);
    let mut rng = Rng::new(9);
    for steps in [1, 2, 10] {
        for stochastic in [false, true] {
            let oracle = OraclePredictor::new(res.clone());
            let plan = SamplerPlan::uniform(100, steps, stochastic).unwrap();
            let out = sample_unclamped(&oracle, &ld, &plan, &s, &mut rng).unwrap();
            assert!(max_diff(&out, &nd) < 1e-10, "steps {steps}");
            assert_eq!(oracle.calls.get(), steps);
        }
    }
}

fn tiny_net(seed: u64) -> Denoiser {
    let cfg = DenoiserConfig { widths: vec![8, 16], n_state: 2, d_e: 4, ..Default::default() };
    Denoiser::new(cfg, InitMode::Default, &mut Rng::new(seed)).unwrap()
}

#[test]
fn zero_net_without_noise_returns_input() {
    let s = DiffusionSchedule::new(100, 0.0).unwrap();
    let net = tiny_net(10);
    let (_, ld, _) = pair(16 * 16, 11);
    let ld: Vec<f64> = ld.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let plan = SamplerPlan::uniform(100, 2, false).unwrap();
    let out = denoise(&net, &ld, 16, &[0.5; 4], &[0.5; 4], &plan, &s, &mut Rng::new(0)).unwrap();
    assert_eq!(out, ld);
}

#[test]
fn stochastic_sampling_is_reproducible() {
    let s = DiffusionSchedule::new(100, 0.2).unwrap();
    let mut net = tiny_net(12);
    founddiff::verify::randomize(&mut net.params, 0.05, &mut Rng::new(1));
    let (_, ld, _) = pair(16 * 16, 13);
    let plan = SamplerPlan::uniform(100, 2, true).unwrap();
    let run = || denoise(&net, &ld, 16, &[0.5; 4], &[0.5; 4], &plan, &s, &mut Rng::new(77)).unwrap();
    let a = run();
    assert_eq!(a, run());
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
}

fn items(count: usize, size: usize, seed: u64) -> Vec<TrainItem> {
    (0..count as u64)
        .map(|k| {
            let (nd, ld, _) = pair(size * size, seed + k);
            let mut rng = Rng::new(seed + 100 + k);
            TrainItem { size, ldct: ld, ndct: nd, e_d: rng.normals(4), e_a: rng.normals(4) }
        })
        .collect()
}

#[test]
fn zero_net_loss_is_mean_squared_residual() {
    let s = DiffusionSchedule::new(100, 0.2).unwrap();
    let net = tiny_net(14);
    let batch = items(3, 16, 15);
    let tape = Tape::new();
    let p = net.params.bind(&tape);
    let loss = residual_loss(&net, &p, &tape, &batch, &s, &mut Rng::new(1)).unwrap().item();
    let n = (3 * 16 * 16) as f64;
    let want: f64 = batch
        .iter()
        .flat_map(|it| it.ldct.iter().zip(&it.ndct).map(|(l, c)| (l - c).powi(2)))
        .sum::<f64>()
        / n;
    assert!((loss - want).abs() < 1e-15 * want.max(1.0) * 16.0);
}

#[test]
fn zero_predictor_expected_loss_matches_dataset() {
    let s = DiffusionSchedule::new(100, 0.2).unwrap();
    let net = tiny_net(16);
    let data = items(6, 16, 17);
    let dataset_mean: f64 = data
        .iter()
        .flat_map(|it| it.ldct.iter().zip(&it.ndct).map(|(l, c)| (l - c).powi(2)))
        .sum::<f64>()
        / (6 * 256) as f64;
    let mut rng = Rng::new(18);
    let draws = 300;
    let mut total = 0.0;
    for _ in 0..draws {
        let batch = vec![data[rng.below(6)].clone(), data[rng.below(6)].clone()];
        let tape = Tape::new();
        let p = net.params.bind_frozen(&tape);
        total += residual_loss(&net, &p, &tape, &batch, &s, &mut rng).unwrap().item();
    }
    let mc = total / draws as f64;
    assert!((mc - dataset_mean).abs() < 0.02 * dataset_mean, "{mc} vs {dataset_mean}");
}

#[test]
fn training_reduces_loss() {
    let data = items(4, 16, 19);
    let mut net = tiny_net(20);
    let cfg = DenoiserTrainConfig {
        net: net.config.clone(),
        iterations: 200,
        batch: 2,
        patch: 0,
        lr_max: 3e-3,
        lr_min: 3e-4,
        ..Default::default()
    };
    let sched = DiffusionSchedule::new(cfg.steps, cfg.eta).unwrap();
    let before = eval_loss(&net, &data, &sched, 5).unwrap();
    let losses = train_denoiser(&cfg, &mut net, &data, 0, &mut Rng::new(21)).unwrap();
    assert_eq!(losses.len(), 200);
    let after = eval_loss(&net, &data, &sched, 5).unwrap();
    assert!(after <= 0.5 * before, "{before} -> {after}");
}
