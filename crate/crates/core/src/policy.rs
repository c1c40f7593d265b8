//! Rollouts, REINFORCE updates and the three training recipes.

use log::{info, warn};

use crate::env::{self, Action, EnvConfig};
use crate::error::{Error, Result};
use crate::network::{PolicyNetwork, NUM_ACTIONS};
use crate::rng::{self, SplitMix64};
use crate::tensor::Tensor;

/// Bias given to the Left output when a Left mask is folded into the
/// weights of the forward-right policy.
pub const SUPPRESSED_LEFT_BIAS: f32 = -30.0;

/// XORed into an episode seed to derive its action-sampling stream, keeping
/// it independent of the cube-placement stream.
const SAMPLING_STREAM: u64 = 0x5DEE_CE66_D1CE_5EED;
/// XORed into the training seed for evaluation episodes.
const EVAL_STREAM: u64 = 0xE7A1_0000_0000_0000;

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub observation: Tensor,
    pub action: Action,
    pub probs: [f32; NUM_ACTIONS],
    pub reward: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub episode_seed: u64,
}

impl Trajectory {
    pub fn total_reward(&self) -> f32 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Baseline {
    None,
    /// Mean return over every step of the update batch.
    #[default]
    MeanReturn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Archetype {
    High,
    Poor,
    ForwardRight,
}

impl std::str::FromStr for Archetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(Archetype::High),
            "poor" => Ok(Archetype::Poor),
            "forward-right" => Ok(Archetype::ForwardRight),
            other => Err(Error::Usage(format!(
                "unknown archetype '{other}' (expected high, poor or forward-right)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    /// Episode budget.
    pub episodes: usize,
    /// Episodes per REINFORCE update.
    pub batch_episodes: usize,
    pub mask_left: bool,
    pub discount: f32,
    pub baseline: Baseline,
    pub seed: u64,
    /// Evaluate the stopping criterion every this many episodes (0 disables).
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Mean cubes per episode at which the high archetype stops training.
    pub target_mean_cubes: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            episodes: 20_000,
            batch_episodes: 16,
            mask_left: false,
            discount: 0.99,
            baseline: Baseline::MeanReturn,
            seed: 1,
            eval_every: 500,
            eval_episodes: 100,
            target_mean_cubes: 2.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::Config("discount must lie in (0, 1]".into()));
        }
        if self.batch_episodes == 0 {
            return Err(Error::Config("batch_episodes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Inverse-CDF sampling over (Left, Forward, Right) from one uniform draw.
pub fn sample_action(probs: &[f32; NUM_ACTIONS], rng: &mut SplitMix64) -> Action {
    let u = rng::uniform(rng);
    let mut cum = 0.0f64;
    for (i, &p) in probs.iter().enumerate() {
        cum += p as f64;
        if u < cum {
            return Action::ALL[i];
        }
    }
    // rounding left u above the total: fall back to the last possible action
    let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(NUM_ACTIONS - 1);
    Action::ALL[last]
}

/// Rolls the policy until the episode ends.
pub fn run_episode(
    net: &PolicyNetwork,
    env_config: &EnvConfig,
    episode_seed: u64,
    mask_left: bool,
) -> Result<Trajectory> {
    let (mut state, mut obs) = env::reset(env_config, episode_seed)?;
    let mut sampler = rng::seeded(episode_seed ^ SAMPLING_STREAM);
    let mut steps = Vec::with_capacity(env_config.horizon);
    while !state.done {
        let probs = net.forward_masked(&obs, mask_left)?.probs();
        let action = sample_action(&probs, &mut sampler);
        let result = env::step(&mut state, action, env_config)?;
        steps.push(TrajectoryStep {
            observation: std::mem::replace(&mut obs, result.observation),
            action,
            probs,
            reward: result.reward,
        });
    }
    Ok(Trajectory {
        steps,
        episode_seed,
    })
}

/// Discounted returns `G_t = sum_{k >= t} discount^(k-t) r_k`.
pub fn discounted_returns(rewards: &[f32], discount: f32) -> Vec<f32> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0f32;
    for (g, &r) in out.iter_mut().zip(rewards).rev() {
        acc = r + discount * acc;
        *g = acc;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    /// Mean undiscounted episode reward of the batch.
    pub mean_return: f32,
    /// L2 norm of the averaged gradient that was applied.
    pub grad_norm: f32,
    pub steps: usize,
}

/// One REINFORCE ascent step on the batch:
/// `theta += lr * mean_t[(G_t - b) * grad log pi(a_t|s_t)]`.
pub fn reinforce_update(
    net: &mut PolicyNetwork,
    trajectories: &[Trajectory],
    cfg: &TrainConfig,
) -> Result<UpdateStats> {
    if trajectories.is_empty() {
        return Err(Error::Usage("reinforce_update needs at least one trajectory".into()));
    }
    let returns: Vec<Vec<f32>> = trajectories
        .iter()
        .map(|t| {
            let rewards: Vec<f32> = t.steps.iter().map(|s| s.reward).collect();
            discounted_returns(&rewards, cfg.discount)
        })
        .collect();
    let total_steps: usize = returns.iter().map(Vec::len).sum();
    let mean_return =
        trajectories.iter().map(Trajectory::total_reward).sum::<f32>() / trajectories.len() as f32;
    if total_steps == 0 {
        return Ok(UpdateStats {
            mean_return,
            grad_norm: 0.0,
            steps: 0,
        });
    }
    let baseline = match cfg.baseline {
        Baseline::None => 0.0,
        Baseline::MeanReturn => {
            returns.iter().flatten().map(|&g| g as f64).sum::<f64>() as f32 / total_steps as f32
        }
    };

    let mut acc: Vec<Tensor> = net.parameters().iter().map(|p| Tensor::zeros(p.shape())).collect();
    for (traj, rets) in trajectories.iter().zip(&returns) {
        for (step, &g) in traj.steps.iter().zip(rets) {
            let advantage = g - baseline;
            if advantage == 0.0 {
                continue;
            }
            let fwd = net.forward_masked(&step.observation, cfg.mask_left)?;
            let probs = fwd.head.probs.data();
            let dlogits = Tensor::from_vec(
                (0..NUM_ACTIONS)
                    .map(|j| {
                        let delta = if j == step.action.index() { 1.0 } else { 0.0 };
                        advantage * (delta - probs[j])
                    })
                    .collect(),
            );
            let grads = net.backward(&fwd, &dlogits, true, false)?.params.expect("requested");
            for (a, g) in acc.iter_mut().zip(&grads) {
                for (av, &gv) in a.data_mut().iter_mut().zip(g.data()) {
                    *av += gv;
                }
            }
        }
    }
    let inv = 1.0 / total_steps as f32;
    let mut sq = 0.0f64;
    for a in &mut acc {
        for v in a.data_mut() {
            *v *= inv;
            sq += (*v as f64) * (*v as f64);
        }
    }
    net.add_scaled(&acc, cfg.learning_rate);
    Ok(UpdateStats {
        mean_return,
        grad_norm: sq.sqrt() as f32,
        steps: total_steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub episodes: usize,
    pub mean_cubes: f64,
    pub steps: usize,
    /// Empirical frequency of Left, Forward, Right over all steps.
    pub action_freq: [f64; NUM_ACTIONS],
}

/// Runs `episodes` stochastic episodes with seeds `seed ^ i`.
pub fn evaluate(
    net: &PolicyNetwork,
    env_config: &EnvConfig,
    episodes: usize,
    seed: u64,
    mask_left: bool,
) -> Result<EvalStats> {
    let mut cubes = 0.0f64;
    let mut counts = [0usize; NUM_ACTIONS];
    let mut steps = 0;
    for i in 0..episodes {
        let traj = run_episode(net, env_config, rng::episode_seed(seed, i as u64), mask_left)?;
        cubes += traj.total_reward() as f64;
        for s in &traj.steps {
            counts[s.action.index()] += 1;
        }
        steps += traj.steps.len();
    }
    let freq = |c: usize| if steps == 0 { 0.0 } else { c as f64 / steps as f64 };
    Ok(EvalStats {
        episodes,
        mean_cubes: if episodes == 0 { 0.0 } else { cubes / episodes as f64 },
        steps,
        action_freq: [freq(counts[0]), freq(counts[1]), freq(counts[2])],
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    /// Episodes consumed so far.
    pub episode: usize,
    pub mean_return: f32,
    pub grad_norm: f32,
    pub eval_mean_cubes: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: PolicyNetwork,
    pub episodes_run: usize,
    /// Best evaluation score seen, when evaluation ran.
    pub best_eval: Option<f64>,
    /// Set when the high archetype ran out of budget before meeting its target.
    pub budget_exhausted: bool,
}

/// Produces one of the three policy archetypes.
///
/// * `High`: REINFORCE until the periodic evaluation reaches
///   `target_mean_cubes`, or the budget runs out (best-so-far is returned).
/// * `Poor`: no training at all; the zero-initialized head is exactly uniform.
/// * `ForwardRight`: REINFORCE over the whole budget with Left masked, then
///   the mask is folded into the output layer so the unmasked network never
///   prefers Left.
pub fn train(
    archetype: Archetype,
    cfg: &TrainConfig,
    env_config: &EnvConfig,
    mut progress: impl FnMut(&Progress),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    env_config.validate()?;
    let mut net = PolicyNetwork::new(env_config.image_h, env_config.image_w, cfg.seed)?;
    if archetype == Archetype::Poor {
        return Ok(TrainOutcome {
            net,
            episodes_run: 0,
            best_eval: None,
            budget_exhausted: false,
        });
    }
    let mask_left = archetype == Archetype::ForwardRight || cfg.mask_left;
    let early_stop = archetype == Archetype::High && cfg.eval_every > 0;
    let update_cfg = TrainConfig {
        mask_left,
        ..cfg.clone()
    };

    let mut best: Option<(f64, PolicyNetwork)> = None;
    let mut next_eval = cfg.eval_every;
    let mut episode = 0usize;
    let mut reached = false;
    while episode < cfg.episodes {
        let n = cfg.batch_episodes.min(cfg.episodes - episode);
        let batch = (episode..episode + n)
            .map(|i| run_episode(&net, env_config, rng::episode_seed(cfg.seed, i as u64), mask_left))
            .collect::<Result<Vec<_>>>()?;
        let stats = reinforce_update(&mut net, &batch, &update_cfg)?;
        episode += n;

        let mut eval_mean_cubes = None;
        if early_stop && episode >= next_eval {
            next_eval += cfg.eval_every;
            let ev = evaluate(&net, env_config, cfg.eval_episodes, cfg.seed ^ EVAL_STREAM, mask_left)?;
            info!("episode {episode}: eval mean cubes {:.3}", ev.mean_cubes);
            eval_mean_cubes = Some(ev.mean_cubes);
            if best.as_ref().is_none_or(|(b, _)| ev.mean_cubes > *b) {
                best = Some((ev.mean_cubes, net.clone()));
            }
            reached = ev.mean_cubes >= cfg.target_mean_cubes;
        }
        progress(&Progress {
            episode,
            mean_return: stats.mean_return,
            grad_norm: stats.grad_norm,
            eval_mean_cubes,
        });
        if reached {
            break;
        }
    }

    if archetype == Archetype::ForwardRight {
        net.suppress_left(SUPPRESSED_LEFT_BIAS);
    }
    let budget_exhausted = early_stop && !reached;
    let best_eval = best.as_ref().map(|(b, _)| *b);
    if budget_exhausted {
        warn!("episode budget exhausted before reaching {} mean cubes", cfg.target_mean_cubes);
        if let Some((_, b)) = best {
            net = b;
        }
    }
    Ok(TrainOutcome {
        net,
        episodes_run: episode,
        best_eval,
        budget_exhausted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_distribution_always_samples_its_action() {
        let mut r = rng::seeded(0);
        for _ in 0..100 {
            assert_eq!(sample_action(&[1.0, 0.0, 0.0], &mut r), Action::Left);
            assert_eq!(sample_action(&[0.0, 0.0, 1.0], &mut r), Action::Right);
        }
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let mut r = rng::seeded(11);
        let mut counts = [0usize; 3];
        let third = 1.0f32 / 3.0;
        for _ in 0..30_000 {
            counts[sample_action(&[third; 3], &mut r).index()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 30_000.0 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn sampling_is_deterministic_for_fixed_state() {
        let p = [0.2, 0.3, 0.5];
        let a: Vec<Action> = {
            let mut r = rng::seeded(99);
            (0..20).map(|_| sample_action(&p, &mut r)).collect()
        };
        let b: Vec<Action> = {
            let mut r = rng::seeded(99);
            (0..20).map(|_| sample_action(&p, &mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn returns_are_discounted_suffix_sums() {
        let g = discounted_returns(&[1.0, 0.0, 2.0], 0.5);
        assert_eq!(g, vec![1.0 + 0.25 * 2.0, 1.0, 2.0]);
        assert_eq!(discounted_returns(&[1.0, 1.0], 1.0), vec![2.0, 1.0]);
    }

    #[test]
    fn uniform_policy_rollouts() {
        let net = PolicyNetwork::new(32, 32, 3).unwrap();
        let cfg = EnvConfig::default();
        for seed in 0..5 {
            let t = run_episode(&net, &cfg, seed, false).unwrap();
            assert!(t.steps.len() <= cfg.horizon);
            assert!(t.total_reward() <= cfg.num_cubes as f32);
            for s in &t.steps {
                assert_eq!(s.probs, [1.0 / 3.0; 3]);
            }
        }
    }

    #[test]
    fn masked_rollouts_never_go_left() {
        let mut net = PolicyNetwork::new(32, 32, 3).unwrap();
        net.parameters_mut()[7].data_mut().copy_from_slice(&[2.0, 0.0, 0.0]);
        let cfg = EnvConfig::default();
        for seed in 0..5 {
            let t = run_episode(&net, &cfg, seed, true).unwrap();
            for s in &t.steps {
                assert_eq!(s.probs[0], 0.0);
                assert_ne!(s.action, Action::Left);
            }
        }
    }

    #[test]
    fn zero_rewards_leave_parameters_untouched() {
        let mut net = PolicyNetwork::new(32, 32, 3).unwrap();
        let cfg = EnvConfig {
            num_cubes: 0,
            horizon: 5,
            ..EnvConfig::default()
        };
        let trajs: Vec<_> = (0..3).map(|s| run_episode(&net, &cfg, s, false).unwrap()).collect();
        let before = net.clone();
        let tc = TrainConfig {
            baseline: Baseline::None,
            ..TrainConfig::default()
        };
        reinforce_update(&mut net, &trajs, &tc).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn empty_batch_is_usage_error() {
        let mut net = PolicyNetwork::new(32, 32, 3).unwrap();
        let err = reinforce_update(&mut net, &[], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn rewarded_action_becomes_more_likely() {
        let mut net = PolicyNetwork::new(32, 32, 3).unwrap();
        let cfg = EnvConfig::default();
        let (_, obs) = env::reset(&cfg, 4).unwrap();
        for action in Action::ALL {
            let before = net.forward(&obs).unwrap().probs()[action.index()];
            let traj = Trajectory {
                steps: vec![TrajectoryStep {
                    observation: obs.clone(),
                    action,
                    probs: [1.0 / 3.0; 3],
                    reward: 1.0,
                }],
                episode_seed: 0,
            };
            let tc = TrainConfig {
                baseline: Baseline::None,
                learning_rate: 0.1,
                ..TrainConfig::default()
            };
            let mut updated = net.clone();
            reinforce_update(&mut updated, &[traj], &tc).unwrap();
            let after = updated.forward(&obs).unwrap().probs()[action.index()];
            assert!(after > before, "{action}: {before} -> {after}");
        }
        net.suppress_left(SUPPRESSED_LEFT_BIAS);
        assert!(net.forward(&obs).unwrap().probs()[0] < 1e-12);
    }

    #[test]
    fn poor_archetype_is_untrained_and_uniform() {
        let out = train(Archetype::Poor, &TrainConfig::default(), &EnvConfig::default(), |_| {}).unwrap();
        assert_eq!(out.episodes_run, 0);
        let (_, obs) = env::reset(&EnvConfig::default(), 1).unwrap();
        assert_eq!(out.net.forward(&obs).unwrap().probs(), [1.0 / 3.0; 3]);
    }

    #[test]
    fn archetype_names() {
        assert_eq!("forward-right".parse::<Archetype>().unwrap(), Archetype::ForwardRight);
        assert!("medium".parse::<Archetype>().is_err());
    }
}
