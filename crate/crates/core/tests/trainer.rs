use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tar2::analysis::RedistributionMode;
use tar2::envs::EnvKind;
use tar2::nn::ParamStore;
use tar2::redistribution::{delta_k, return_gap};
use tar2::reward_model::{ModelShape, RewardModelConfig};
use tar2::trainer::{
    collect_episodes, discounted_returns, gae, Critic, Policy, PopArt, Trainer, TrainerConfig,
};

fn quick_config() -> TrainerConfig {
    TrainerConfig {
        num_rollout_threads: 6,
        ppo_epochs: 2,
        ppo_batch_size: 3,
        policy_hidden_shape: 16,
        v_hidden_shape: 16,
        ..Default::default()
    }
}

fn tiny_model() -> RewardModelConfig {
    RewardModelConfig {
        embed_dim: 8,
        num_heads: 2,
        depth: 1,
        batch_size: 4,
        update_epochs: 2,
        update_freq: 12,
        ..Default::default()
    }
}

#[test]
fn small_step_descends_the_ppo_loss() {
    let cfg = TrainerConfig { policy_lr: 1e-5, v_value_lr: 1e-5, ..quick_config() };
    let mut t = Trainer::new(EnvKind::KeyTreasure, RedistributionMode::Uniform, cfg, tiny_model(), 3).unwrap();
    let seeds: Vec<u64> = (0..6).collect();
    let episodes = collect_episodes(&t.policy, t.env, &seeds, false).unwrap();
    let batch = t.prepare_batch(episodes).unwrap();
    let idx: Vec<usize> = (0..6).collect();
    let (before, _) = t.evaluate_losses(&batch, &idx).unwrap();
    t.ppo_step(&batch, &idx).unwrap();
    let (after, _) = t.evaluate_losses(&batch, &idx).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn stored_log_probs_match_the_policy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for env in [EnvKind::KeyTreasure, EnvKind::Switches] {
        let policy = Policy::new(ModelShape::of(env.build().as_ref()), 16, &mut rng);
        for e in collect_episodes(&policy, env, &[1, 2, 3], false).unwrap() {
            for t in 0..e.steps {
                for i in 0..e.agents {
                    let p = policy.probabilities(i, e.observation(t, i)).unwrap();
                    let lp = p[e.actions[e.cell(t, i)]].ln();
                    assert!((lp - e.log_probs[e.cell(t, i)]).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn greedy_rollouts_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let policy = Policy::new(ModelShape::of(EnvKind::Switches.build().as_ref()), 16, &mut rng);
    let a = collect_episodes(&policy, EnvKind::Switches, &[4, 9], true).unwrap();
    let b = collect_episodes(&policy, EnvKind::Switches, &[4, 9], true).unwrap();
    assert_eq!(a, b);
}

#[test]
fn buffer_grows_by_one_iteration_of_episodes() {
    let mut t = Trainer::new(EnvKind::KeyTreasure, RedistributionMode::Tar2, quick_config(), tiny_model(), 0).unwrap();
    for k in 1..=3 {
        t.iterate(usize::MAX).unwrap();
        assert_eq!(t.buffer.len(), 6 * k);
    }
}

#[test]
fn credit_is_uniform_until_the_first_refit() {
    let mut t = Trainer::new(EnvKind::KeyTreasure, RedistributionMode::Tar2, quick_config(), tiny_model(), 1).unwrap();
    let m = t.iterate(usize::MAX).unwrap();
    assert_eq!(m.model_age, None);
    assert_eq!(m.delta_min, Some(0.5));
    assert_eq!(m.delta_max, Some(0.5));
    t.iterate(usize::MAX).unwrap();
    assert_eq!(t.last_model_update, Some(12));
    let m = t.iterate(usize::MAX).unwrap();
    assert_eq!(m.model_age, Some(0));
    assert!(t.model_active());
}

#[test]
fn model_credit_conserves_the_team_reward_and_doubles_the_objective() {
    let mut t = Trainer::new(EnvKind::KeyTreasure, RedistributionMode::Tar2, quick_config(), tiny_model(), 2).unwrap();
    for _ in 0..3 {
        t.iterate(usize::MAX).unwrap();
    }
    let seeds: Vec<u64> = (100..110).collect();
    let episodes = collect_episodes(&t.policy, t.env, &seeds, false).unwrap();
    let credit = t.credit(&episodes).unwrap();
    for (e, c) in episodes.iter().zip(&credit) {
        assert!(c.equivalent);
        assert!(return_gap(&c.rewards, e.team_reward) <= 1e-9 * e.team_reward.abs().max(1.0));
        let d = delta_k(c.weights.as_ref().unwrap());
        assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
    let m = t.iterate(usize::MAX).unwrap();
    assert!(m.doubling_residual <= 1e-9);
}

#[test]
fn uniform_smoke_on_switches() {
    let mut t = Trainer::new(EnvKind::Switches, RedistributionMode::Uniform, quick_config(), tiny_model(), 4).unwrap();
    let s = t.train(18, |_, m| {
        assert!(m.policy_loss.is_finite() && m.value_loss.is_finite());
        assert_eq!(m.equivalence_violations, 0);
        Ok(())
    });
    let s = s.unwrap();
    assert_eq!((s.iterations, s.episodes), (3, 18));
    assert!(t.model.is_none());
}

#[test]
fn budget_is_never_exceeded() {
    let mut t = Trainer::new(EnvKind::KeyTreasure, RedistributionMode::Uniform, quick_config(), tiny_model(), 6).unwrap();
    let s = t.train(10, |_, _| Ok(())).unwrap();
    assert_eq!((s.iterations, s.episodes), (2, 10));
}

#[test]
fn no_normalization_hands_raw_scores_to_the_learner() {
    let mut t =
        Trainer::new(EnvKind::KeyTreasure, RedistributionMode::NoNormalization, quick_config(), tiny_model(), 7).unwrap();
    assert!(t.model_active());
    let episodes = collect_episodes(&t.policy, t.env, &[1, 2], false).unwrap();
    let credit = t.credit(&episodes).unwrap();
    let model = t.model.as_mut().unwrap();
    for (e, c) in episodes.iter().zip(&credit) {
        assert!(c.weights.is_none());
        let direct = model.score(e).unwrap();
        for (a, b) in c.rewards.iter().zip(direct.scores()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

fn critic_outputs(critic: &Critic, params: &ParamStore, rows: &[f64]) -> Vec<f64> {
    let mut c = critic.clone();
    c.params = params.clone();
    c.values(rows).unwrap()
}

proptest! {
    #[test]
    fn gae_with_unit_lambda_is_return_minus_value(
        data in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..30),
        gamma in 0.5f64..=1.0,
    ) {
        let (rewards, values): (Vec<f64>, Vec<f64>) = data.into_iter().unzip();
        let adv = gae(&rewards, &values, gamma, 1.0).unwrap();
        let g = discounted_returns(&rewards, gamma);
        for t in 0..rewards.len() {
            prop_assert!((adv[t] - (g[t] - values[t])).abs() <= 1e-9);
        }
    }

    #[test]
    fn gae_with_zero_lambda_is_the_td_error(
        data in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..30),
        gamma in 0.5f64..=1.0,
    ) {
        let (rewards, values): (Vec<f64>, Vec<f64>) = data.into_iter().unzip();
        let adv = gae(&rewards, &values, gamma, 0.0).unwrap();
        let n = rewards.len();
        for t in 0..n {
            let next = if t + 1 < n { values[t + 1] } else { 0.0 };
            prop_assert!((adv[t] - (rewards[t] + gamma * next - values[t])).abs() <= 1e-12);
        }
    }

    #[test]
    fn popart_rescale_preserves_critic_outputs(
        seed in any::<u64>(),
        batches in prop::collection::vec(prop::collection::vec(-20.0f64..20.0, 4..12), 1..4),
    ) {
        let shape = ModelShape::of(EnvKind::KeyTreasure.build().as_ref());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let critic = Critic::new(shape, 8, &mut rng);
        let rows: Vec<f64> = (0..3 * Critic::input_dim(&shape)).map(|k| ((k * 37 % 11) as f64) / 11.0).collect();
        let mut popart = PopArt::new(2, 0.9, true);
        let mut params = critic.params.clone();
        let denorm = |p: &PopArt, params: &ParamStore| -> Vec<f64> {
            critic_outputs(&critic, params, &rows)
                .chunks(2)
                .flat_map(|v| (0..2).map(move |k| (k, v[k])))
                .map(|(k, v)| p.denormalize(k, v))
                .collect()
        };
        let before = denorm(&popart, &params);
        for b in &batches {
            popart.update_preserving(&[b.clone(), b.iter().map(|x| 2.0 * x).collect()], &mut params, critic.output_layer()).unwrap();
            let after = denorm(&popart, &params);
            for (x, y) in before.iter().zip(&after) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
    }
}
