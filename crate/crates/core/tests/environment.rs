mod common;

use adaptive_unfold::environment::{
    feature_len, residual_slice, rollout, step, ActionMap, EnvConfig, Episode, FixedAction, StopRule, LOG_SCALE,
};
use adaptive_unfold::sbl::{sbl_iteration, SblHyper, SblState, GAMMA_CAP};
use adaptive_unfold::unfolding::{CodecMode, LayerDims, PRECISION_FLOOR};
use common::{instance, max_rel, rel, rng};
use proptest::prelude::*;

fn plain_policy(map: &ActionMap, dims: LayerDims, score: f64) -> FixedAction {
    let mut a = vec![score];
    a.extend(map.plain_action(dims));
    FixedAction(a)
}

fn quiet_config(max_layers: usize) -> EnvConfig {
    EnvConfig {
        max_layers,
        eta_pen: 0.0,
        lambda_halt: 0.0,
        ..EnvConfig::default()
    }
}

fn assert_states_close(a: &SblState, b: &SblState, tol: f64) {
    assert!(rel(a.alpha, b.alpha) < tol, "alpha {} vs {}", a.alpha, b.alpha);
    assert!(max_rel(&a.gamma, &b.gamma) < tol);
    let gap = a.beta.iter().zip(&b.beta).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(gap < tol, "beta gap {gap:e}");
}

#[test]
fn plain_actions_reproduce_plain_iterations() {
    let maps = [
        ActionMap::default(),
        ActionMap::Codec {
            mode: CodecMode::Diagonal,
            scale: 0.1,
        },
    ];
    for case in 0..5u64 {
        let (model, s) = instance(500 + case, 12, 8, 24, 3, 1e-2);
        let dims = LayerDims::of(&model);
        let ep = Episode::new(&model, &s.y, &s).unwrap();
        let cfg = quiet_config(6);
        for map in &maps {
            let mut state = ep.reset(&cfg).unwrap();
            let mut plain = SblState::initial(&model, &s.y);
            for _ in 0..6 {
                let a = plain_policy(map, dims, 0.5).0;
                state = step(&ep, &cfg, map, &state, &a, None).unwrap().state;
                plain = sbl_iteration(&model, &plain, &s.y, &SblHyper::default(), true).unwrap().0;
                assert_states_close(&state.sbl, &plain, 1e-8);
            }
        }
    }
}

#[test]
fn undiscounted_rewards_telescope() {
    let (model, s) = instance(1, 12, 8, 24, 3, 1e-2);
    let ep = Episode::new(&model, &s.y, &s).unwrap();
    let map = ActionMap::default();
    let cfg = quiet_config(8);
    let trace = rollout(&ep, &cfg, &map, &plain_policy(&map, LayerDims::of(&model), 0.9), false, None, &mut rng(0)).unwrap();
    assert_eq!(trace.layers_used, 8);
    assert!((trace.total_reward() - (trace.initial_nmse - trace.final_nmse)).abs() < 1e-12);
    assert_eq!(trace.steps.last().unwrap().nmse, trace.final_nmse);
}

#[test]
fn halting_penalty_enters_the_reward() {
    let (model, s) = instance(2, 12, 8, 24, 3, 1e-2);
    let ep = Episode::new(&model, &s.y, &s).unwrap();
    let map = ActionMap::default();
    let dims = LayerDims::of(&model);
    let cfg = EnvConfig {
        eta_pen: 0.01,
        lambda_halt: 0.5,
        rho: 2.0,
        ..EnvConfig::default()
    };
    let state = ep.reset(&cfg).unwrap();
    let a = plain_policy(&map, dims, 0.4).0;
    let out = step(&ep, &cfg, &map, &state, &a, None).unwrap();
    let expected = ep.nmse(state.err) - ep.nmse(out.state.err) - 0.01 - 0.5 * (state.err / 0.4 + 2.0 * 0.4);
    assert!((out.reward - expected).abs() < 1e-12);
}

#[test]
fn single_layer_budget_ends_after_one_step() {
    let (model, s) = instance(3, 12, 8, 24, 2, 1e-2);
    let ep = Episode::new(&model, &s.y, &s).unwrap();
    let map = ActionMap::default();
    let cfg = quiet_config(1);
    let trace = rollout(&ep, &cfg, &map, &plain_policy(&map, LayerDims::of(&model), 0.9), false, None, &mut rng(0)).unwrap();
    assert_eq!(trace.steps.len(), 1);
    assert_eq!(trace.layers_used, 1);
    assert!(trace.steps[0].done && !trace.steps[0].halted);
}

#[test]
fn low_score_halts_before_any_layer() {
    let (model, s) = instance(4, 12, 8, 24, 2, 1e-2);
    let ep = Episode::new(&model, &s.y, &s).unwrap();
    let map = ActionMap::default();
    let dims = LayerDims::of(&model);
    let cfg = EnvConfig {
        epsilon: 0.3,
        ..quiet_config(10)
    };
    let trace = rollout(&ep, &cfg, &map, &plain_policy(&map, dims, 0.3), false, None, &mut rng(0)).unwrap();
    assert_eq!(trace.layers_used, 0);
    assert!(trace.steps[0].halted);
    assert_eq!(trace.final_nmse, trace.initial_nmse);

    // force_depth ignores the score and runs exactly that many layers
    let forced = rollout(&ep, &cfg, &map, &plain_policy(&map, dims, 0.3), false, Some(4), &mut rng(0)).unwrap();
    assert_eq!(forced.layers_used, 4);
    assert!(forced.steps.iter().all(|s| !s.halted));
}

#[test]
fn tau_rule_stops_on_the_extra_output() {
    let (model, s) = instance(5, 12, 8, 24, 2, 1e-2);
    let ep = Episode::new(&model, &s.y, &s).unwrap();
    let map = ActionMap::default();
    let dims = LayerDims::of(&model);
    let cfg = EnvConfig {
        stop: StopRule::Tau { threshold: 0.0 },
        ..quiet_config(5)
    };
    let mut go = vec![0.01, 0.5];
    go.extend(map.plain_action(dims));
    let state = ep.reset(&cfg).unwrap();
    let out = step(&ep, &cfg, &map, &state, &go, None).unwrap();
    assert!(!out.halted && out.state.t == 1);
    go[1] = -0.5;
    assert!(step(&ep, &cfg, &map, &out.state, &go, None).unwrap().halted);
    // the halting-score layout is one component shorter
    assert!(step(&ep, &quiet_config(5), &map, &state, &go, None).is_err());
}

#[test]
fn rollouts_are_deterministic_and_chain_states() {
    let (model, s) = instance(6, 12, 8, 24, 3, 1e-2);
    let ep = Episode::new(&model, &s.y, &s).unwrap();
    let map = ActionMap::default();
    let cfg = EnvConfig::default();
    let policy = plain_policy(&map, LayerDims::of(&model), 0.7);
    let a = rollout(&ep, &cfg, &map, &policy, false, None, &mut rng(0)).unwrap();
    let b = rollout(&ep, &cfg, &map, &policy, false, None, &mut rng(1)).unwrap();
    assert_eq!(a, b);
    let ts = a.transitions();
    for w in ts.windows(2) {
        assert_eq!(w[0].s_next, w[1].s);
        assert!(!w[0].done);
    }
    assert!(ts.last().unwrap().done);
    assert_eq!(ts.last().unwrap().s_next, a.final_features);
}

#[test]
fn features_follow_the_documented_layout() {
    let (model, s) = instance(7, 12, 8, 24, 3, 1e-2);
    let ep = Episode::new(&model, &s.y, &s).unwrap();
    let dims = LayerDims::of(&model);
    let cfg = quiet_config(4);
    let map = ActionMap::default();
    let s0 = ep.reset(&cfg).unwrap();
    let st = step(&ep, &cfg, &map, &s0, &plain_policy(&map, dims, 0.5).0, None).unwrap().state;
    let f = &st.features;
    assert_eq!(f.len(), feature_len(dims));
    assert!((f[0] - st.sbl.alpha.ln() / LOG_SCALE).abs() < 1e-15);
    let slice = residual_slice(dims);
    for (k, r) in st.residual.iter().enumerate() {
        assert_eq!(f[slice.offset + k], r.re);
        assert_eq!(f[slice.offset + dims.t + k], r.im);
    }
    assert_eq!(*f.last().unwrap(), 0.25);
    assert!(f[1 + dims.j..1 + 2 * dims.j].iter().all(|b| b.abs() <= 1.0 + 1e-12));
}

#[test]
fn black_box_updates_are_clamped() {
    let (model, s) = instance(8, 12, 8, 24, 3, 1e-2);
    let ep = Episode::new(&model, &s.y, &s).unwrap();
    let dims = LayerDims::of(&model);
    let map = ActionMap::BlackBox {
        log_alpha_step: 40.0,
        log_gamma_step: 40.0,
        beta_step: 5.0,
    };
    let cfg = quiet_config(6);
    for sign in [1.0, -1.0] {
        let mut a = vec![0.9];
        a.extend(std::iter::repeat_n(sign, map.dim(dims)));
        let mut state = ep.reset(&cfg).unwrap();
        for _ in 0..6 {
            state = step(&ep, &cfg, &map, &state, &a, None).unwrap().state;
            assert!(state.sbl.is_valid(&model));
            assert!(state.sbl.gamma.iter().all(|g| (PRECISION_FLOOR..=GAMMA_CAP).contains(g)));
            assert!(state.sbl.beta.iter().all(|b| b.abs() <= model.grid.max_gap() + 1e-15));
        }
    }
    // the zero action changes nothing but the iteration count
    let s0 = ep.reset(&cfg).unwrap();
    let zero = plain_policy(&map, dims, 0.9).0;
    let s1 = step(&ep, &cfg, &map, &s0, &zero, None).unwrap().state;
    assert_eq!(s1.sbl.gamma, s0.sbl.gamma);
    assert_eq!(s1.sbl.beta, s0.sbl.beta);
}

#[test]
fn input_errors_are_reported() {
    let (model, s) = instance(9, 12, 8, 24, 2, 1e-2);
    let short = s.y.rows(0, 4).into_owned();
    assert!(Episode::new(&model, &short, &s).is_err());
    let ep = Episode::new(&model, &s.y, &s).unwrap();
    let cfg = EnvConfig::default();
    let state = ep.reset(&cfg).unwrap();
    assert!(step(&ep, &cfg, &ActionMap::default(), &state, &[0.5, 0.0], None).is_err());
    let bad = EnvConfig {
        max_layers: 0,
        ..EnvConfig::default()
    };
    assert!(bad.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn random_actions_keep_states_valid(seed in 0u64..2_000, map_kind in 0usize..3) {
        let (model, s) = instance(seed, 10, 6, 20, 2, 1e-2);
        let ep = Episode::new(&model, &s.y, &s).unwrap();
        let dims = LayerDims::of(&model);
        let map = match map_kind {
            0 => ActionMap::default(),
            1 => ActionMap::Codec { mode: CodecMode::Diagonal, scale: 0.05 },
            _ => ActionMap::black_box(),
        };
        let cfg = quiet_config(4);
        let mut r = rng(seed);
        let mut state = ep.reset(&cfg).unwrap();
        for _ in 0..4 {
            let mut a = vec![0.9];
            a.extend(adaptive_unfold::environment::jittered_action(&map.plain_action(dims), 1.0, &mut r));
            let out = step(&ep, &cfg, &map, &state, &a, None).unwrap();
            prop_assert!(out.state.sbl.is_valid(&model));
            prop_assert!(out.reward.is_finite());
            prop_assert!(out.state.features.iter().all(|f| f.is_finite()));
            state = out.state;
        }
    }
}
