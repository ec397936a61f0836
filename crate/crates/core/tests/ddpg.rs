mod common;

use adaptive_unfold::ddpg::{
    compute_reward, halting_cost, soft_update, Activation, Adam, DdpgAgent, DdpgConfig, HaltingKind, HaltingNet, Mat,
    Mlp, ReplayBuffer, ResidualSlice, Transition,
};
use common::{rng, vec_rel};
use proptest::prelude::*;
use rand::Rng;

const ACTIVATIONS: [Activation; 4] = [Activation::Tanh, Activation::Relu, Activation::Sigmoid, Activation::Identity];

/// `Σ w ⊙ f(x)` for fixed random weights `w`.
fn weighted_output(net: &Mlp, x: &Mat, w: &Mat) -> f64 {
    net.predict(x).component_mul(w).sum()
}

fn random_mat<R: Rng>(rows: usize, cols: usize, r: &mut R) -> Mat {
    Mat::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

/// Finite-difference check of the input and parameter gradients of one
/// random network; returns the two relative errors.
fn mlp_gradient_errors(case: u64) -> (f64, f64) {
    let mut r = rng(case);
    let hidden = ACTIVATIONS[case as usize % 4];
    let output = ACTIVATIONS[(case as usize / 4) % 4];
    let depth = 1 + case as usize % 3;
    let mut sizes = vec![r.random_range(1..6)];
    for _ in 0..depth {
        sizes.push(r.random_range(2..7));
    }
    let net = Mlp::new(&sizes, hidden, output, None, &mut r).unwrap();
    let batch = r.random_range(1..5);
    let x = random_mat(sizes[0], batch, &mut r);
    let w = random_mat(net.output_dim(), batch, &mut r);

    let (_, cache) = net.forward(&x);
    let (dx, grads) = net.backward(&cache, &w);
    let h = 1e-6;

    let fd_x: Vec<f64> = (0..x.len())
        .map(|i| {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += h;
            m[i] -= h;
            (weighted_output(&net, &p, &w) - weighted_output(&net, &m, &w)) / (2.0 * h)
        })
        .collect();
    let analytic_x: Vec<f64> = dx.iter().copied().collect();

    let fd_p: Vec<f64> = (0..net.param_count())
        .map(|i| {
            let (mut p, mut m) = (net.clone(), net.clone());
            *p.params_mut().nth(i).unwrap() += h;
            *m.params_mut().nth(i).unwrap() -= h;
            (weighted_output(&p, &x, &w) - weighted_output(&m, &x, &w)) / (2.0 * h)
        })
        .collect();
    let analytic_p: Vec<f64> = grads.iter().collect();
    (vec_rel(&analytic_x, &fd_x), vec_rel(&analytic_p, &fd_p))
}

#[test]
fn mlp_backprop_matches_finite_differences() {
    for case in 0..64u64 {
        let (ex, ep) = mlp_gradient_errors(case);
        assert!(ex < 1e-4, "case {case}: input gradient error {ex:e}");
        assert!(ep < 1e-4, "case {case}: parameter gradient error {ep:e}");
    }
}

fn halting_gradient_error(kind: HaltingKind, seed: u64) -> f64 {
    let mut r = rng(seed);
    let input = 6;
    let mut net = HaltingNet::new(kind, input, &[5, 4], &mut r).unwrap();
    if let HaltingNet::Quadratic { log_p1, p2, .. } = &mut net {
        *log_p1 = r.random_range(-1.0..0.5);
        *p2 = r.random_range(-1.0..1.0);
    }
    let x = random_mat(input, 3, &mut r);
    let w: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
    let objective = |n: &HaltingNet| n.forward(&x).0.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    let (_, cache) = net.forward(&x);
    let analytic = net.backward(&cache, &w);
    let h = 1e-6;
    let fd: Vec<f64> = (0..net.param_count())
        .map(|i| {
            let (mut p, mut m) = (net.clone(), net.clone());
            *p.params_mut().nth(i).unwrap() += h;
            *m.params_mut().nth(i).unwrap() -= h;
            (objective(&p) - objective(&m)) / (2.0 * h)
        })
        .collect();
    vec_rel(&analytic, &fd)
}

#[test]
fn halting_backprop_matches_finite_differences() {
    for seed in 0..10 {
        for kind in [HaltingKind::Quadratic, HaltingKind::Deep] {
            let err = halting_gradient_error(kind, seed);
            assert!(err < 1e-4, "{kind:?} seed {seed}: {err:e}");
        }
    }
}

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    while hi - lo > 1e-12 {
        if f(a) < f(b) {
            hi = b;
            b = a;
            a = hi - g * (hi - lo);
        } else {
            lo = a;
            a = b;
            b = lo + g * (hi - lo);
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn halting_cost_minimizer_is_sqrt_error_over_rho() {
    let mut r = rng(1);
    for _ in 0..20 {
        let rho = r.random_range(0.5..4.0);
        let e = r.random_range(1e-3..0.4);
        let best = golden_section(|l| halting_cost(&[e], &[l], rho).unwrap(), 1e-9, 1.0 - 1e-9);
        let expected = (e / rho).sqrt();
        assert!((best - expected).abs() < 1e-6, "e {e} rho {rho}: {best} vs {expected}");
    }
}

#[test]
fn halting_cost_rejects_bad_scores() {
    assert!(halting_cost(&[0.1], &[0.0], 1.0).is_err());
    assert!(halting_cost(&[0.1], &[1.0], 1.0).is_err());
    assert!(halting_cost(&[0.1, 0.2], &[0.5], 1.0).is_err());
    let c = halting_cost(&[0.1, 0.2], &[0.5, 0.25], 2.0).unwrap();
    assert!((c - (0.2 + 1.0 + 0.8 + 0.5)).abs() < 1e-12);
}

#[test]
fn reward_is_improvement_minus_penalties() {
    assert_eq!(compute_reward(0.5, 0.2, 0.05, 0.0, 1.0), 0.25);
    assert!((compute_reward(0.5, 0.2, 0.0, 0.1, 2.0) - 0.1).abs() < 1e-15);
}

#[test]
fn soft_update_mixes_parameters() {
    let mut r = rng(2);
    let main = Mlp::new(&[3, 4, 2], Activation::Relu, Activation::Tanh, None, &mut r).unwrap();
    let mut target = Mlp::new(&[3, 4, 2], Activation::Relu, Activation::Tanh, None, &mut r).unwrap();
    let before: Vec<f64> = target.params().collect();
    soft_update(&main, &mut target, 0.1);
    for ((t, m), b) in target.params().zip(main.params()).zip(&before) {
        assert!((t - (0.1 * m + 0.9 * b)).abs() < 1e-15);
    }
    soft_update(&main, &mut target, 1.0);
    assert_eq!(target, main);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut adam = Adam::new(0.01, 3);
    let mut p = [1.0, -2.0, 0.5];
    adam.step(p.iter_mut(), [3.0, -0.5, 0.0].into_iter());
    assert!((p[0] - 0.99).abs() < 1e-9);
    assert!((p[1] + 1.99).abs() < 1e-9);
    assert_eq!(p[2], 0.5);
}

#[test]
fn adam_minimizes_a_quadratic() {
    let target = [0.3, -1.2, 2.0];
    let mut p = [0.0; 3];
    let mut adam = Adam::new(0.05, 3);
    for _ in 0..2000 {
        let g: Vec<f64> = p.iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
        adam.step(p.iter_mut(), g.into_iter());
    }
    for (x, t) in p.iter().zip(&target) {
        assert!((x - t).abs() < 1e-3);
    }
}

fn small_config() -> DdpgConfig {
    DdpgConfig {
        actor_hidden: vec![16],
        critic_hidden: vec![32],
        halting_hidden: vec![4],
        batch_size: 16,
        warmup: 16,
        ..DdpgConfig::default()
    }
}

fn agent(seed: u64, kind: HaltingKind) -> DdpgAgent {
    let cfg = DdpgConfig {
        halting_kind: kind,
        ..small_config()
    };
    DdpgAgent::new(cfg, 5, 2, ResidualSlice { offset: 2, len: 3 }, &mut rng(seed)).unwrap()
}

fn random_transition<R: Rng>(r: &mut R, reward: impl Fn(&[f64]) -> f64) -> Transition {
    let s: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
    let a: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
    Transition {
        r: reward(&a[1..]),
        s_next: s.iter().map(|v| -v).collect(),
        s,
        a,
        done: true,
        err: r.random_range(0.0..0.5),
    }
}

#[test]
fn td_targets_follow_the_bellman_form() {
    let ag = agent(3, HaltingKind::Quadratic);
    let mut r = rng(4);
    let mut ts: Vec<Transition> = (0..4).map(|_| random_transition(&mut r, |_| 0.7)).collect();
    ts[1].done = false;
    let batch: Vec<&Transition> = ts.iter().collect();
    let targets = ag.td_targets(&batch);
    assert_eq!(targets[0], 0.7);
    let s1 = &ts[1].s_next;
    let mut x = s1.clone();
    x.push(ag.halting_score(s1));
    x.extend(ag.target_actor.predict_one(s1));
    let q = ag.target_critic.predict_one(&x)[0];
    assert!((targets[1] - (0.7 + ag.config.discount * q)).abs() < 1e-12);
}

#[test]
fn critic_regresses_terminal_rewards() {
    let mut ag = agent(5, HaltingKind::Quadratic);
    let mut r = rng(6);
    let reward = |a: &[f64]| a[0] - 0.5 * a[1] * a[1];
    let data: Vec<Transition> = (0..256).map(|_| random_transition(&mut r, reward)).collect();
    let all: Vec<&Transition> = data.iter().collect();
    let first = ag.critic_update(&all);
    let mut last = first;
    for _ in 0..400 {
        last = ag.critic_update(&all);
    }
    assert!(last < 0.05 * first, "critic loss {first} -> {last}");
}

#[test]
fn actor_climbs_a_learned_bowl() {
    // reward peaks at a = (0.4, −0.3) regardless of the state
    let peak = [0.4, -0.3];
    let reward = move |a: &[f64]| -((a[0] - peak[0]).powi(2) + (a[1] - peak[1]).powi(2));
    let mut ag = agent(7, HaltingKind::Quadratic);
    let mut r = rng(8);
    let data: Vec<Transition> = (0..512).map(|_| random_transition(&mut r, reward)).collect();
    let all: Vec<&Transition> = data.iter().collect();
    for _ in 0..600 {
        ag.critic_update(&all);
    }
    let start = ag.actor_update(&all);
    let mut obj = start;
    for _ in 0..1500 {
        obj = ag.actor_update(&all);
    }
    assert!(obj > start);
    let s: Vec<f64> = vec![0.1, -0.2, 0.3, 0.0, 0.5];
    let a = ag.actor.predict_one(&s);
    assert!((a[0] - peak[0]).abs() < 0.15 && (a[1] - peak[1]).abs() < 0.15, "actor output {a:?}");
}

#[test]
fn halting_update_lowers_the_halting_cost() {
    for kind in [HaltingKind::Quadratic, HaltingKind::Deep] {
        let mut ag = agent(9, kind);
        let mut r = rng(10);
        let data: Vec<Transition> = (0..128)
            .map(|_| {
                let mut t = random_transition(&mut r, |_| 0.0);
                // error grows with the residual energy
                t.err = 0.05 * t.s[2..5].iter().map(|v| v * v).sum::<f64>();
                t
            })
            .collect();
        let all: Vec<&Transition> = data.iter().collect();
        let first = ag.halting_update(&all);
        let mut last = first;
        for _ in 0..500 {
            last = ag.halting_update(&all);
        }
        assert!(last < first, "{kind:?}: {first} -> {last}");
    }
}

#[test]
fn observe_updates_after_warmup_only() {
    let mut ag = agent(11, HaltingKind::Quadratic);
    let mut r = rng(12);
    for k in 0..40 {
        let t = random_transition(&mut r, |_| 0.1);
        let stats = ag.observe(t, &mut r);
        assert_eq!(stats.is_some(), k + 1 >= 16, "step {k}");
    }
    assert_eq!(ag.updates(), 25);
    assert!(ag.is_finite());
}

#[test]
fn checkpoint_round_trips_bitwise() {
    for kind in [HaltingKind::Quadratic, HaltingKind::Deep] {
        let mut ag = agent(13, kind);
        let mut r = rng(14);
        for _ in 0..30 {
            ag.observe(random_transition(&mut r, |a| a[0]), &mut r);
        }
        let bytes = ag.save("meta text");
        let (back, meta) = DdpgAgent::load(&bytes).unwrap();
        assert_eq!(meta, "meta text");
        assert_eq!(back.save("meta text"), bytes);
        let s = [0.3, 0.1, -0.4, 0.2, 0.9];
        assert_eq!(back.act(&s, false, &mut r), ag.act(&s, false, &mut r));

        assert!(DdpgAgent::load(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(DdpgAgent::load(&bad).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(DdpgAgent::load(&long).is_err());
    }
}

#[test]
fn architecture_errors() {
    let mut r = rng(0);
    assert!(Mlp::new(&[3], Activation::Relu, Activation::Tanh, None, &mut r).is_err());
    assert!(Mlp::new(&[3, 0, 1], Activation::Relu, Activation::Tanh, None, &mut r).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn replay_keeps_the_newest_entries(cap in 1usize..20, n in 0usize..60) {
        let mut buf = ReplayBuffer::new(cap);
        for k in 0..n {
            buf.push(Transition { s: vec![k as f64], a: vec![], r: k as f64, s_next: vec![], done: false, err: 0.0 });
        }
        prop_assert_eq!(buf.len(), n.min(cap));
        for i in 0..buf.len() {
            prop_assert_eq!(buf.get(i).unwrap().r, (n - buf.len() + i) as f64);
        }
        let sample = buf.sample(10, &mut rng(n as u64));
        prop_assert_eq!(sample.len(), if n == 0 { 0 } else { 10 });
    }

    #[test]
    fn actions_stay_in_range(seed in 0u64..1000, noisy in any::<bool>()) {
        let ag = agent(seed, HaltingKind::Quadratic);
        let mut r = rng(seed + 1);
        let s: Vec<f64> = (0..5).map(|_| r.random_range(-50.0..50.0)).collect();
        let a = ag.act(&s, noisy, &mut r);
        prop_assert_eq!(a.len(), 3);
        prop_assert!((0.0..=1.0).contains(&a[0]));
        prop_assert!(a[1..].iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn sigmoid_is_symmetric_and_bounded(z in -800.0f64..800.0) {
        let s = adaptive_unfold::ddpg::sigmoid(z);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s + adaptive_unfold::ddpg::sigmoid(-z) - 1.0).abs() < 1e-12);
    }
}
