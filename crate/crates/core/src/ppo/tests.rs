use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::cstr_env::Interval;
use crate::shac::{EpisodeEnv, FeatureMap};
use crate::test_support::{test_model, test_scenario};

const LN_2PI_HALF: f64 = 0.918_938_533_204_672_7;

/// Mean = W·obs + b with a 2×2 weight.
struct Linear;

impl GaussianPolicy for Linear {
    type Obs = Vec<f64>;

    fn mean(&self, tape: &Tape, bound: &Bound, obs: &Vec<f64>) -> Result<NodeId> {
        let x = tape.constant(Tensor::matrix(2, 1, obs.clone()));
        let wx = tape.matmul(bound.get("W"), x)?;
        let wx = tape.reshape(wx, &[2])?;
        Ok(tape.add(wx, bound.get("b"))?)
    }
}

fn linear_params(rng: &mut ChaCha8Rng) -> ParamSet {
    let n = Normal::new(0.0, 0.5).unwrap();
    let mut p = ParamSet::new();
    p.insert("W", Tensor::matrix(2, 2, (0..4).map(|_| n.sample(rng)).collect()));
    p.insert("b", Tensor::vector((0..2).map(|_| n.sample(rng)).collect()));
    p
}

/// Samples drawn from the current policy, so every ratio is exactly one.
fn on_policy_batch(params: &ParamSet, std: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<PpoSample<Vec<f64>>> {
    let g = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|_| {
            let obs = vec![g.sample(rng), g.sample(rng)];
            let mean = Linear.mean_value(params, &obs).unwrap();
            let action: Vec<f64> = mean.iter().zip(std).map(|(m, s)| m + s * g.sample(rng)).collect();
            PpoSample {
                logp_old: log_density(&action, &mean, std),
                features: vec![0.0; 3],
                action,
                obs,
                advantage: g.sample(rng),
                ret: 0.0,
            }
        })
        .collect()
}

fn toy_critic(rng: &mut ChaCha8Rng) -> Critic {
    let b = Interval::new(-1.0, 1.0);
    let f = FeatureMap {
        bounds: [b; 3],
        price_mean: 0.0,
        price_std: 1.0,
        horizon: 0,
    };
    Critic::new(f, &[8], 1.0, rng)
}

#[test]
fn logprob_at_mean_is_normalizing_constant() {
    let tape = Tape::new();
    let std = [0.3, 2.0];
    let m = tape.constant(Tensor::vector(vec![1.0, -4.0]));
    let lp = gaussian_logprob(&tape, &[1.0, -4.0], m, &std).unwrap();
    let expect = -(0.3f64.ln() + LN_2PI_HALF + 2.0f64.ln() + LN_2PI_HALF);
    assert!((tape.scalar_value(lp) - expect).abs() < 1e-14);
}

#[test]
fn doubling_std_at_mean_lowers_logprob_by_log_two_per_channel() {
    let u = [0.5, 0.1];
    let a = log_density(&u, &u, &[0.4, 1.5]);
    let b = log_density(&u, &u, &[0.8, 3.0]);
    assert!((a - b - 2.0 * 2.0f64.ln()).abs() < 1e-14);
}

#[test]
fn logprob_gradient_in_mean_is_scaled_residual() {
    let tape = Tape::new();
    let (u, mean, std) = ([0.7, -1.2], vec![0.2, 0.4], [0.5, 1.3]);
    let m = tape.input(Tensor::vector(mean.clone()));
    let lp = gaussian_logprob(&tape, &u, m, &std).unwrap();
    assert!((tape.scalar_value(lp) - log_density(&u, &mean, &std)).abs() < 1e-14);
    let g = tape.backward(lp).unwrap().wrt(m);
    for i in 0..2 {
        let expect = (u[i] - mean[i]) / std[i].powi(2);
        assert!((g.data()[i] - expect).abs() < 1e-13);
    }
}

#[test]
fn logprob_rejects_non_positive_std() {
    let tape = Tape::new();
    let m = tape.constant(Tensor::vector(vec![0.0, 0.0]));
    assert!(gaussian_logprob(&tape, &[0.0, 0.0], m, &[1.0, 0.0]).is_err());
}

#[test]
fn gae_with_zero_values_and_unit_lambda_gives_discounted_returns() {
    let r = [1.0, -2.0, 0.5, 3.0];
    let z = [0.0; 4];
    let (adv, ret) = gae_advantages(&r, &z, &z, &[false; 4], 0.9, 1.0);
    let mut g = 0.0;
    for t in (0..4).rev() {
        g = r[t] + 0.9 * g;
        assert!((adv[t] - g).abs() < 1e-14);
        assert_eq!(adv[t], ret[t]);
    }
}

#[test]
fn gae_is_zero_without_rewards_or_values() {
    let z = [0.0; 5];
    let (adv, ret) = gae_advantages(&z, &z, &z, &[false, true, false, false, false], 0.99, 0.95);
    assert!(adv.iter().chain(&ret).all(|v| *v == 0.0));
}

#[test]
fn gae_single_step_is_td_error() {
    let (adv, ret) = gae_advantages(&[1.5], &[2.0], &[4.0], &[false], 0.9, 0.7);
    assert!((adv[0] - (1.5 + 0.9 * 4.0 - 2.0)).abs() < 1e-14);
    assert!((ret[0] - (1.5 + 0.9 * 4.0)).abs() < 1e-14);
}

#[test]
fn gae_restarts_after_episode_end() {
    let r = [1.0, 1.0, 1.0];
    let v = [0.0; 3];
    let nv = [0.0, 10.0, 0.0];
    let (adv, _) = gae_advantages(&r, &v, &nv, &[false, true, false], 1.0, 1.0);
    assert_eq!(adv, vec![12.0, 11.0, 1.0]);
}

#[test]
fn normalized_advantages_have_zero_mean_unit_std() {
    let mut a = vec![1.0, 4.0, -2.0, 7.5, 0.0];
    normalize_advantages(&mut a);
    let m = a.iter().sum::<f64>() / 5.0;
    let v = a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 5.0;
    assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-6);
}

#[test]
fn identical_policies_give_unit_ratio_and_mean_advantage() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = linear_params(&mut rng);
    let std = [0.3, 0.7];
    let batch = on_policy_batch(&params, &std, 40, &mut rng);
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let refs: Vec<_> = batch.iter().collect();
    let sur = surrogate_loss(&tape, &bound, &Linear, &refs, &std, 0.2).unwrap();
    let mean_adv = batch.iter().map(|s| s.advantage).sum::<f64>() / 40.0;
    assert!((tape.scalar_value(sur.loss) + mean_adv).abs() < 1e-12);
    assert!(sur.approx_kl.abs() < 1e-12);
    assert_eq!(sur.clip_fraction, 0.0);
}

#[test]
fn zero_advantages_give_zero_policy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = linear_params(&mut rng);
    let std = [0.3, 0.7];
    let mut batch = on_policy_batch(&params, &std, 20, &mut rng);
    for s in &mut batch {
        s.advantage = 0.0;
        // Move off-policy so the ratio is not one.
        s.logp_old -= 0.05;
    }
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let refs: Vec<_> = batch.iter().collect();
    let sur = surrogate_loss(&tape, &bound, &Linear, &refs, &std, 0.2).unwrap();
    let g = bound.gradients(&tape.backward(sur.loss).unwrap());
    assert!(g.flatten().iter().all(|v| *v == 0.0));
}

/// `−mean_i A_i ∇ log π(u_i)` from one tape per sample.
fn vanilla_pg(params: &ParamSet, batch: &[PpoSample<Vec<f64>>], std: &[f64]) -> Vec<f64> {
    let mut acc = vec![0.0; params.num_scalars()];
    for s in batch {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let m = Linear.mean(&tape, &bound, &s.obs).unwrap();
        let lp = gaussian_logprob(&tape, &s.action, m, std).unwrap();
        let g = bound.gradients(&tape.backward(lp).unwrap()).flatten();
        for (a, v) in acc.iter_mut().zip(g) {
            *a -= s.advantage * v / batch.len() as f64;
        }
    }
    acc
}

#[test]
fn unclipped_single_epoch_matches_vanilla_policy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = linear_params(&mut rng);
    let std = [0.4, 0.9];
    let batch = on_policy_batch(&params, &std, 64, &mut rng);
    let pg = vanilla_pg(&params, &batch, &std);

    let tape = Tape::new();
    let bound = params.bind(&tape);
    let refs: Vec<_> = batch.iter().collect();
    let sur = surrogate_loss(&tape, &bound, &Linear, &refs, &std, 1e12).unwrap();
    let g = bound.gradients(&tape.backward(sur.loss).unwrap()).flatten();
    for (a, b) in g.iter().zip(&pg) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
    }

    // The update itself applies exactly that direction.
    let cfg = PpoConfig {
        clip: 1e12,
        epochs: 1,
        minibatch: 64,
        actor_lr: 1e-3,
        ..PpoConfig::default()
    };
    let mut updated = params.clone();
    let mut optim = PpoOptim::new(&cfg);
    let mut critic = toy_critic(&mut rng);
    let stats = ppo_update(&mut updated, &Linear, &mut critic, &batch, &std, &cfg, &mut optim, &mut rng).unwrap();
    assert_eq!(stats.epochs_run, 1);
    let mut expect = params.clone();
    let grads = params.unflatten(&pg).unwrap();
    crate::adgraph::Adam::new(1e-3).step(&mut expect, &grads).unwrap();
    for (a, b) in updated.flatten().iter().zip(expect.flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// Single-state bandit: mean control θ, reward −‖u − target‖².
struct Bandit;

impl GaussianPolicy for Bandit {
    type Obs = ();

    fn mean(&self, _tape: &Tape, bound: &Bound, _obs: &()) -> Result<NodeId> {
        Ok(bound.get("theta"))
    }
}

#[test]
fn bandit_mean_moves_toward_rewarded_region() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let target = [1.0, -0.5];
    let std = [0.3, 0.3];
    let mut params = ParamSet::new();
    params.insert("theta", Tensor::vector(vec![0.0, 0.0]));
    let cfg = PpoConfig {
        epochs: 4,
        minibatch: 64,
        actor_lr: 0.02,
        ..PpoConfig::default()
    };
    let mut optim = PpoOptim::new(&cfg);
    let mut critic = toy_critic(&mut rng);
    let g = Normal::new(0.0, 1.0).unwrap();
    let dist = |p: &ParamSet| {
        let t = p.expect("theta").data();
        ((t[0] - target[0]).powi(2) + (t[1] - target[1]).powi(2)).sqrt()
    };
    let start = dist(&params);
    for _ in 0..50 {
        let mean = params.expect("theta").data().to_vec();
        let mut batch: Vec<PpoSample<()>> = (0..256)
            .map(|_| {
                let action: Vec<f64> = mean.iter().zip(std).map(|(m, s)| m + s * g.sample(&mut rng)).collect();
                let r = -(action[0] - target[0]).powi(2) - (action[1] - target[1]).powi(2);
                PpoSample {
                    obs: (),
                    features: vec![0.0; 3],
                    logp_old: log_density(&action, &mean, &std),
                    action,
                    advantage: r,
                    ret: r,
                }
            })
            .collect();
        let mut adv: Vec<f64> = batch.iter().map(|s| s.advantage).collect();
        normalize_advantages(&mut adv);
        for (s, a) in batch.iter_mut().zip(adv) {
            s.advantage = a;
        }
        ppo_update(&mut params, &Bandit, &mut critic, &batch, &std, &cfg, &mut optim, &mut rng).unwrap();
    }
    let end = dist(&params);
    assert!(end < 0.2 * start, "distance {start} -> {end}");
}

#[test]
fn kl_guard_stops_epochs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = linear_params(&mut rng);
    let std = [0.3, 0.7];
    let mut batch = on_policy_batch(&params, &std, 32, &mut rng);
    for s in &mut batch {
        s.logp_old += 1.0;
    }
    let cfg = PpoConfig {
        minibatch: 32,
        ..PpoConfig::default()
    };
    let mut p = params.clone();
    let mut critic = toy_critic(&mut rng);
    let stats = ppo_update(&mut p, &Linear, &mut critic, &batch, &std, &cfg, &mut PpoOptim::new(&cfg), &mut rng).unwrap();
    assert!(stats.stopped_early);
    assert_eq!(stats.epochs_run, 0);
    assert_eq!(p, params);
}

#[test]
fn surrogate_records_no_plant_operations() {
    // Rewards only enter through stored advantages. The surrogate tape holds
    // the controller and the density, nothing else.
    let sc = test_scenario(1e-8);
    let model = test_model(2);
    let policy = KoopmanGaussian {
        model: model.clone(),
        spec: sc.spec.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let critic = toy_critic_for(&sc, &mut rng);
    let mut envs = vec![EpisodeEnv::new(&sc, 1)];
    let std = sc.spec.sigma();
    let roll = collect_rollout(&sc, &policy, &model.params, &critic, &mut envs, 3, &std, 0.99, 0.95);
    assert_eq!(roll.samples.len(), 3);
    let refs: Vec<_> = roll.samples.iter().collect();

    let means_only = Tape::new();
    let b = model.params.bind(&means_only);
    for s in &refs {
        policy.mean(&means_only, &b, &s.obs).unwrap();
    }
    let full = Tape::new();
    let b = model.params.bind(&full);
    let sur = surrogate_loss(&full, &b, &policy, &refs, &std, 0.2).unwrap();
    // Per sample: 7 density nodes and 6 ratio/clip nodes; then concat, sum, scale.
    assert_eq!(full.len(), means_only.len() + 13 * refs.len() + 3);
    assert!(full.reaches(sur.loss, b.get("A")));
}

fn toy_critic_for(sc: &crate::shac::Scenario, rng: &mut ChaCha8Rng) -> Critic {
    Critic::new(FeatureMap::new(&sc.env, &sc.prices, sc.spec.horizon()), &[8], 10.0, rng)
}

#[test]
fn rollout_logprobs_match_the_policy() {
    let sc = test_scenario(1e-8);
    let model = test_model(3);
    let policy = KoopmanGaussian {
        model: model.clone(),
        spec: sc.spec.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let critic = toy_critic_for(&sc, &mut rng);
    let mut envs = vec![EpisodeEnv::new(&sc, 2), EpisodeEnv::new(&sc, 3)];
    let std = sc.spec.sigma();
    let roll = collect_rollout(&sc, &policy, &model.params, &critic, &mut envs, 2, &std, 0.99, 0.95);
    assert_eq!(roll.aborted, 0);
    assert_eq!(roll.samples.len(), 4);
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let refs: Vec<_> = roll.samples.iter().collect();
    let sur = surrogate_loss(&tape, &bound, &policy, &refs, &std, 0.2).unwrap();
    assert!(sur.approx_kl.abs() < 1e-9);
}

#[test]
fn smoke_training_writes_outputs() {
    let sc = test_scenario(1e-8);
    let model = test_model(4);
    let cfg = PpoConfig {
        rollout: 8,
        n_envs: 2,
        minibatch: 4,
        epochs: 2,
        total_steps: 16,
        critic_hidden: vec![8],
        ..PpoConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let run = train(sc, model, &cfg, Some(dir.path())).unwrap();
    assert_eq!(run.updates.len(), 2);
    assert_eq!(run.curve.len(), 8);
    assert_eq!(run.curve.last().unwrap().steps, 16);
    assert!(run.updates.iter().all(|u| u.policy_loss.is_finite() && u.value_loss.is_finite()));
    for f in ["learning_curve.csv", "updates.csv", "best.ckpt", "final.ckpt", "critic.ckpt", "checkpoints/update_00001.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let header = std::fs::read_to_string(dir.path().join("learning_curve.csv")).unwrap();
    assert!(header.starts_with("update,steps,mean_reward,run_avg_1024"));
}

proptest! {
    #[test]
    fn config_validation_rejects_bad_clip(clip in prop_oneof![-1.0..=0.0, 1.0..5.0f64]) {
        let cfg = PpoConfig { clip, ..PpoConfig::default() };
        let err = cfg.validate().unwrap_err().to_string();
        prop_assert!(err.contains("ppo.clip"));
    }

    #[test]
    fn gae_returns_equal_advantage_plus_value(
        r in prop::collection::vec(-5.0..5.0f64, 1..20),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(0.0, 1.0).unwrap();
        let n = r.len();
        let v: Vec<f64> = (0..n).map(|_| g.sample(&mut rng)).collect();
        let nv: Vec<f64> = (0..n).map(|_| g.sample(&mut rng)).collect();
        let d: Vec<bool> = (0..n).map(|i| i % 7 == 6).collect();
        let (adv, ret) = gae_advantages(&r, &v, &nv, &d, 0.99, 0.95);
        for i in 0..n {
            prop_assert!((ret[i] - adv[i] - v[i]).abs() < 1e-12);
        }
    }
}
