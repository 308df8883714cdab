use aoi_nest::fluid::{solve_relaxed_dual, DualOptions};
use aoi_nest::matching::{assign, Weights};
use aoi_nest::mdp::{build_truncated_mdp, relative_value_iteration, SolveOptions};
use aoi_nest::model::{Mode, ServerGroup, ServerSpec, SystemConfig, UserGroup, UserSpec};
use aoi_nest::policy::PolicyKind;
use aoi_nest::sim::{run, scale_config, RunOptions};
use proptest::prelude::*;
use statrs::statistics::Statistics;

fn brute_force(w: &Weights, cap: &mut [usize], u: usize) -> f64 {
    if u == w.users {
        return 0.0;
    }
    let mut best = brute_force(w, cap, u + 1);
    for k in 0..cap.len() {
        if cap[k] > 0 {
            cap[k] -= 1;
            best = best.max(w.get(u, k) + brute_force(w, cap, u + 1));
            cap[k] += 1;
        }
    }
    best
}

fn mode() -> impl Strategy<Value = Mode> {
    prop_oneof![Just(Mode::Preemptive), Just(Mode::NonPreemptive)]
}

fn small_config(mode: Mode) -> SystemConfig {
    let mut cfg = SystemConfig::new(
        vec![UserGroup { tau_min: 1, count: 2 }, UserGroup { tau_min: 3, count: 2 }],
        vec![ServerGroup { p: 0.7, count: 1, nu: 0.0 }, ServerGroup { p: 0.4, count: 1, nu: 0.0 }],
        mode,
    );
    cfg.a_max = 40;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kernel_rows_sum_to_one(
        tau in 1u32..4,
        mut p in prop::collection::vec(0.05f64..0.95, 1..4),
        a_max in 8u32..30,
        mode in mode(),
    ) {
        p.sort_by(f64::total_cmp);
        let servers: Vec<ServerSpec> =
            p.iter().enumerate().map(|(id, &p)| ServerSpec { id, group: id, p, nu: 0.0 }).collect();
        let nu = vec![1.0; servers.len()];
        let user = UserSpec { id: 0, group: 0, tau_min: tau };
        let mdp = build_truncated_mdp(&user, &servers, &nu, a_max, mode).unwrap();
        prop_assert!(mdp.check_kernel().is_ok());
    }

    #[test]
    fn matching_is_optimal(
        rows in prop::collection::vec(prop::collection::vec(-2.0f64..10.0, 3), 1..7),
        cap in prop::collection::vec(0usize..3, 3),
    ) {
        let w = Weights::from_rows(&rows);
        let m = assign(&w, &cap);
        let best = brute_force(&w, &mut cap.clone(), 0);
        prop_assert!((m.weight - best).abs() < 1e-9, "{} vs {}", m.weight, best);
        prop_assert!((m.dual_objective(&cap) - best).abs() < 1e-6);
        for k in 0..cap.len() {
            prop_assert!(m.assign.iter().filter(|a| **a == Some(k)).count() <= cap[k]);
        }
    }
}

#[test]
fn relaxed_policy_attains_gamma_in_simulation() {
    let mut cfg = SystemConfig::new(
        vec![UserGroup { tau_min: 2, count: 1 }],
        vec![ServerGroup { p: 0.6, count: 1, nu: 0.0 }],
        Mode::NonPreemptive,
    );
    cfg.a_max = 60;
    let servers = cfg.server_types(&[0.0]);
    let mdp = build_truncated_mdp(&cfg.users()[0], &servers, &[0.0], cfg.a_max, cfg.mode).unwrap();
    let gamma = relative_value_iteration(&mdp, SolveOptions::default()).unwrap().gamma;

    let mut opts = RunOptions::new(PolicyKind::RelaxedLb, 200_000, 3);
    opts.relaxed_nu = Some(vec![0.0]);
    let m = run(&cfg, &opts).unwrap();
    let sim = m.running_avg_aoi();
    assert!((sim - gamma).abs() / gamma < 0.01, "simulated {sim} vs {gamma}");
}

#[test]
fn scaling_replicates_groups() {
    let text = include_str!("../../cli/configs/paper_base.json");
    let v: serde_json::Value = serde_json::from_str(text).unwrap();
    let users = v["user_groups"]
        .as_array()
        .unwrap()
        .iter()
        .map(|g| UserGroup { tau_min: g["tau_min"].as_u64().unwrap() as u32, count: g["count"].as_u64().unwrap() as usize })
        .collect();
    let servers = v["server_groups"]
        .as_array()
        .unwrap()
        .iter()
        .map(|g| ServerGroup { p: g["p"].as_f64().unwrap(), count: 1, nu: 0.0 })
        .collect();
    let cfg = SystemConfig::new(users, servers, Mode::NonPreemptive);
    let scaled = scale_config(&cfg, 2).unwrap();
    let counts: Vec<usize> = scaled.user_groups.iter().map(|g| g.count).collect();
    assert_eq!(counts, [10, 20, 10, 10, 20, 30]);
    assert!(scaled.server_groups.iter().all(|g| g.count == 2));
    assert_eq!(scaled.num_users(), 2 * cfg.num_users());
    assert!(scale_config(&cfg, 0).is_err());
}

#[test]
fn lower_bound_does_not_depend_on_scale() {
    let cfg = small_config(Mode::NonPreemptive);
    let base = solve_relaxed_dual(&cfg, DualOptions::default()).unwrap();
    let scaled = solve_relaxed_dual(&scale_config(&cfg, 3).unwrap(), DualOptions::default()).unwrap();
    assert!(
        (base.lower_bound - scaled.lower_bound).abs() < 1e-3 * base.lower_bound,
        "{} vs {}",
        base.lower_bound,
        scaled.lower_bound
    );
    for (a, b) in base.nu_star.iter().zip(&scaled.nu_star) {
        assert!((a - b).abs() < 1e-2 * a.max(1.0), "{:?} vs {:?}", base.nu_star, scaled.nu_star);
    }
}

#[test]
fn single_seed_agrees_with_seed_mean() {
    let cfg = small_config(Mode::Preemptive);
    let tails: Vec<f64> = (1..=16)
        .map(|seed| run(&cfg, &RunOptions::new(PolicyKind::Marp, 20_000, seed)).unwrap().running_avg_aoi())
        .collect();
    let mean = tails.iter().mean();
    let single = run(&cfg, &RunOptions::new(PolicyKind::Marp, 20_000, 99)).unwrap().running_avg_aoi();
    let spread = tails.iter().std_dev();
    assert!((single - mean).abs() <= 3.0 * spread, "{single} vs {mean} (sd {spread})");
}

#[test]
fn runs_are_deterministic() {
    let cfg = small_config(Mode::NonPreemptive);
    let a = run(&cfg, &RunOptions::new(PolicyKind::Nested, 3_000, 5)).unwrap();
    let b = run(&cfg, &RunOptions::new(PolicyKind::Nested, 3_000, 5)).unwrap();
    assert_eq!(a.slot_aoi, b.slot_aoi);
    assert_eq!(a.nu_trace, b.nu_trace);
}
