use proptest::prelude::*;
use rlvis_core::attrib::{class_activation_map, normalized_upsample, weights_from_gradient, ImportanceWeights};
use rlvis_core::classviz::{synthesize, CmvConfig, CmvInit};
use rlvis_core::env::{self, render};
use rlvis_core::gradcheck::random_network;
use rlvis_core::tensor::{relu_forward, softmax, Tensor};
use rlvis_core::tsne::{kl_divergence, optimize, pairwise_affinities, TsneConfig};
use rlvis_core::{Action, EnvConfig, PolicyNetwork};

fn tensor(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

proptest! {
    #[test]
    fn tensor_length_matches_shape(h in 1usize..6, w in 1usize..6, v in -5.0f32..5.0) {
        let t = Tensor::full(&[h, w], v);
        prop_assert_eq!(t.len(), h * w);
        prop_assert!(Tensor::new(vec![h, w], vec![v; h * w + 1]).is_err());
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-30.0f32..30.0, 1..8)) {
        let p = softmax(&Tensor::from_vec(logits.clone()));
        let total: f64 = p.data().iter().map(|&v| v as f64).sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(p.data().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    // Strictly inside (0,1) needs logit gaps that f32 can resolve (1 - e^-16 < 1).
    #[test]
    fn softmax_components_are_interior(logits in prop::collection::vec(-7.5f32..7.5, 2..8)) {
        let p = softmax(&Tensor::from_vec(logits));
        prop_assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn softmax_is_shift_invariant(logits in prop::collection::vec(-10.0f64..10.0, 3), c in -1000.0f64..1000.0) {
        let a = softmax(&Tensor::from_vec(logits.clone()));
        let b = softmax(&Tensor::from_vec(logits.iter().map(|v| v + c).collect()));
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn relu_is_idempotent(x in prop::collection::vec(-5.0f32..5.0, 1..32)) {
        let t = Tensor::from_vec(x);
        let once = relu_forward(&t);
        prop_assert_eq!(relu_forward(&once), once);
    }

    #[test]
    fn cam_is_non_negative(seed in any::<u64>(), k in 1usize..5, h in 1usize..5, w in 1usize..5) {
        let mut r = rlvis_core::rng::seeded(seed);
        let fm = tensor(vec![k, h, w], (0..k * h * w).map(|_| rlvis_core::rng::gaussian(&mut r) as f32).collect());
        let alpha = (0..k).map(|_| rlvis_core::rng::gaussian(&mut r) as f32).collect();
        let cam = class_activation_map(&fm, &ImportanceWeights { alpha }).unwrap();
        prop_assert!(cam.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn scaling_gradients_scales_raw_and_keeps_display(seed in any::<u64>(), c in 0.1f32..10.0) {
        let mut r = rlvis_core::rng::seeded(seed);
        let mut g = || rlvis_core::rng::gaussian(&mut r) as f32;
        let fm = tensor(vec![3, 4, 4], (0..48).map(|_| g().abs()).collect());
        let grad = tensor(vec![3, 4, 4], (0..48).map(|_| g()).collect());
        let scaled = grad.map(|v| v * c);
        let raw = class_activation_map(&fm, &weights_from_gradient(&grad).unwrap()).unwrap();
        let raw_c = class_activation_map(&fm, &weights_from_gradient(&scaled).unwrap()).unwrap();
        for (a, b) in raw.data().iter().zip(raw_c.data()) {
            prop_assert!((a * c - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
        let up = normalized_upsample(&raw, 9, 9).unwrap();
        let up_c = normalized_upsample(&raw_c, 9, 9).unwrap();
        for (a, b) in up.data().iter().zip(up_c.data()) {
            prop_assert!((a - b).abs() < 1e-5);
        }
        if raw.max() > 0.0 {
            prop_assert!((up.max() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn affinities_are_a_symmetric_distribution(seed in any::<u64>(), n in 4usize..24, perp in 2.0f64..40.0) {
        let mut r = rlvis_core::rng::seeded(seed);
        let f = tensor(vec![n, 5], (0..n * 5).map(|_| rlvis_core::rng::gaussian(&mut r) as f32).collect());
        let p = pairwise_affinities(&f, perp).unwrap();
        let mut total = 0.0;
        for i in 0..n {
            prop_assert_eq!(p.get(i, i), 0.0);
            for j in 0..n {
                prop_assert!(p.get(i, j) >= 0.0);
                prop_assert_eq!(p.get(i, j), p.get(j, i));
                total += p.get(i, j);
            }
        }
        prop_assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn episodes_respect_env_invariants(seed in any::<u64>(), actions in prop::collection::vec(0usize..3, 40)) {
        let cfg = EnvConfig::default();
        let (mut state, obs) = env::reset(&cfg, seed).unwrap();
        prop_assert!(obs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mut total = 0.0;
        let mut alive = state.alive_cubes();
        for a in actions {
            if state.done {
                break;
            }
            let res = env::step(&mut state, Action::from_index(a).unwrap(), &cfg).unwrap();
            total += res.reward;
            prop_assert!(state.alive_cubes() <= alive);
            alive = state.alive_cubes();
            prop_assert!(state.steps_taken <= cfg.horizon);
            prop_assert!(res.observation.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert_eq!(res.observation, render(&state, &cfg));
        }
        prop_assert!(total <= cfg.num_cubes as f32);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn kl_is_non_negative_throughout(seed in any::<u64>()) {
        let mut r = rlvis_core::rng::seeded(seed);
        let f = tensor(vec![20, 4], (0..80).map(|_| rlvis_core::rng::gaussian(&mut r) as f32).collect());
        let cfg = TsneConfig { perplexity: 5.0, iterations: 60, exaggeration_iters: 30, momentum_switch: 30, seed, ..TsneConfig::default() };
        let p = pairwise_affinities(&f, cfg.perplexity).unwrap();
        let init = rlvis_core::tsne::initial_points(20, seed);
        let mut ok = true;
        optimize(&p, &init, &cfg, |_, y| ok &= kl_divergence(&p, y) >= 0.0).unwrap();
        prop_assert!(ok);
    }

    #[test]
    fn cmv_stays_in_range(seed in any::<u64>(), action in 0usize..3) {
        let net = random_network(32, 32, seed).cast::<f32>();
        let cfg = CmvConfig { steps: 15, step_size: 5.0, blur_every: 4, init: CmvInit::Noise, seed, ..CmvConfig::default() };
        let res = synthesize(&net, Action::from_index(action).unwrap(), &cfg).unwrap();
        prop_assert!(res.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(res.prob_trace.len(), 15);
        prop_assert_eq!(&res, &synthesize(&net, Action::from_index(action).unwrap(), &cfg).unwrap());
    }
}

#[test]
fn uniform_policy_on_a_thousand_observations() {
    let net = PolicyNetwork::new(32, 32, 11).unwrap();
    let mut r = rlvis_core::rng::seeded(12);
    let mut worst = 0.0f32;
    for _ in 0..1000 {
        let obs = tensor(vec![1, 32, 32], (0..1024).map(|_| rlvis_core::rng::uniform(&mut r) as f32).collect());
        for p in net.forward(&obs).unwrap().probs() {
            worst = worst.max((p - 1.0 / 3.0).abs());
        }
    }
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn small_ascent_step_never_lowers_probability() {
    for seed in 0..20u64 {
        let net = random_network(32, 32, seed).cast::<f32>();
        let action = Action::ALL[(seed % 3) as usize];
        let cfg = CmvConfig {
            steps: 1,
            step_size: 1e-4,
            l2_decay: 0.0,
            blur_every: 0,
            init: CmvInit::Noise,
            seed,
            ..CmvConfig::default()
        };
        let init = rlvis_core::classviz::initial_image(32, 32, &cfg);
        assert!(init.data().iter().all(|&v| v > 0.0 && v < 1.0), "init must be interior");
        let before = net.forward(&init).unwrap().probs()[action.index()];
        let after = synthesize(&net, action, &cfg).unwrap().final_prob;
        assert!(after >= before, "seed {seed}: {before} -> {after}");
    }
}
