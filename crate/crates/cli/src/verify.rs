//! Property suite behind `aoi-nest verify`.

use aoi_nest::fluid::{build_fluid_lp_relaxed, check_fixed_point_equivalence, solve_relaxed_dual, DualOptions};
use aoi_nest::index::{
    check_intra_indexability, check_precise_division, closed_form_thresholds, predecessor_cost, IndexSource, IndexTable,
};
use aoi_nest::matching::{assign, Weights};
use aoi_nest::mdp::{
    build_truncated_mdp, check_mltt, check_value_bounds, relative_value_iteration, solve_from, MdpTable, SolveOptions,
    State, ValueTable,
};
use aoi_nest::model::{Layer, Mode, ServerGroup, ServerSpec, SystemConfig, UserGroup, UserSpec};
use aoi_nest::policy::PolicyKind;
use aoi_nest::sim::{run, RunOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::CliError;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        CheckOutcome { name: name.into(), passed, detail: detail.into() }
    }
}

/// A single user facing up to three server types, with everything drawn at random.
#[derive(Clone, Debug, Serialize)]
pub struct RandomCase {
    pub tau_min: u32,
    pub p: Vec<f64>,
    pub nu: Vec<f64>,
    pub a_max: u32,
    pub mode: Mode,
}

impl RandomCase {
    pub fn draw(rng: &mut impl Rng, mode: Mode) -> Self {
        let k = rng.gen_range(1..=3);
        let mut p: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..0.95)).collect();
        p.sort_by(f64::total_cmp);
        let nu = (0..k).map(|_| rng.gen_range(0.0..10.0)).collect();
        RandomCase { tau_min: rng.gen_range(1..=4), p, nu, a_max: rng.gen_range(40..=80), mode }
    }

    pub fn mdp(&self) -> Result<MdpTable, CliError> {
        let servers: Vec<ServerSpec> = self
            .p
            .iter()
            .zip(&self.nu)
            .enumerate()
            .map(|(id, (&p, &nu))| ServerSpec { id, group: id, p, nu })
            .collect();
        let user = UserSpec { id: 0, group: 0, tau_min: self.tau_min };
        Ok(build_truncated_mdp(&user, &servers, &self.nu, self.a_max, self.mode)?)
    }

    pub fn solve(&self) -> Result<ValueTable, CliError> {
        Ok(relative_value_iteration(&self.mdp()?, SolveOptions::default())?)
    }
}

pub fn random_cases(n: usize, seed: u64, mode: Mode) -> Vec<RandomCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| RandomCase::draw(&mut rng, mode)).collect()
}

/// Runs `check` on every case and reports how many fail.
fn over_cases(
    name: &str,
    cases: &[RandomCase],
    check: impl Fn(&RandomCase) -> Result<bool, CliError>,
) -> Result<CheckOutcome, CliError> {
    let mut bad = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        if !check(c)? {
            bad.push(i);
        }
    }
    let detail = format!("{} of {} configs violate{}", bad.len(), cases.len(), fmt_idx(&bad));
    Ok(CheckOutcome::new(name, bad.is_empty(), detail))
}

fn fmt_idx(bad: &[usize]) -> String {
    if bad.is_empty() {
        String::new()
    } else {
        format!(" (cases {bad:?})")
    }
}

pub fn mltt(cases: &[RandomCase]) -> Result<CheckOutcome, CliError> {
    let name = format!("mltt-{}", cases.first().map_or(Mode::Preemptive, |c| c.mode));
    over_cases(&name, cases, |c| Ok(check_mltt(&c.solve()?).is_ok()))
}

pub fn intra_indexability(cases: &[RandomCase]) -> Result<CheckOutcome, CliError> {
    let name = format!("indexability-{}", cases.first().map_or(Mode::Preemptive, |c| c.mode));
    let mut bad = Vec::new();
    let mut per_layer = [0usize; 2];
    let mut not_full = 0;
    for (i, c) in cases.iter().enumerate() {
        let mdp = c.mdp()?;
        let a = c.a_max as f64;
        let mut grid: Vec<f64> = (0..=16).map(|i| 2.0 * a * i as f64 / 16.0).collect();
        grid.extend([4.0 * a, a * a, 10.0 * a * a]);
        let mut layers = [false; 2];
        let mut ok = true;
        for m in 0..c.p.len() {
            let rep = check_intra_indexability(&mdp, m, &grid, SolveOptions::default())?;
            for &(_, l) in &rep.violations {
                layers[usize::from(l == Layer::L2)] = true;
            }
            not_full += usize::from(!rep.reaches_full);
            ok &= rep.is_ok();
        }
        per_layer[0] += usize::from(layers[0]);
        per_layer[1] += usize::from(layers[1]);
        if !ok {
            bad.push(i);
        }
    }
    let detail = format!(
        "{} of {} configs violate{}; shrinking on layer 1 in {}, layer 2 in {}; {} sweeps never fully passive",
        bad.len(),
        cases.len(),
        fmt_idx(&bad),
        per_layer[0],
        per_layer[1],
        not_full
    );
    Ok(CheckOutcome::new(&name, bad.is_empty(), detail))
}

pub fn value_bounds(cases: &[RandomCase]) -> Result<CheckOutcome, CliError> {
    let name = format!("value-bounds-{}", cases.first().map_or(Mode::Preemptive, |c| c.mode));
    over_cases(&name, cases, |c| {
        let low = c.solve()?;
        for m in 0..c.p.len() {
            let mut nu = c.nu.clone();
            nu[m] += 0.5;
            let high = solve_from(&low.mdp.with_nu(&nu), Some(&low), SolveOptions::default())?;
            if !check_value_bounds(&low, &high, m, 0.5).is_ok() {
                return Ok(false);
            }
        }
        Ok(true)
    })
}

pub fn precise_division(cases: &[RandomCase]) -> Result<CheckOutcome, CliError> {
    let name = format!("precise-division-{}", cases.first().map_or(Mode::Preemptive, |c| c.mode));
    over_cases(&name, cases, |c| {
        let vt = c.solve()?;
        let t = c.tau_min;
        let mut probes = Vec::new();
        for m in 0..c.p.len() {
            for d in [t + 2, t + 6, t + 12] {
                probes.push((State::l1(d), m));
            }
            let copy = if c.mode == Mode::NonPreemptive { m } else { 0 };
            probes.push((State::l2(t + 8, t + 2, copy), m));
        }
        Ok(check_precise_division(&vt, &probes, 0.05, SolveOptions::default())?.is_ok())
    })
}

/// At each layer-1 age `a` where the policy switches to server `m`, the
/// average cost should lie in `[nu_pred - nu_m + a - 1, nu_pred - nu_m + a]`.
pub fn gamma_bracket(cases: &[RandomCase]) -> Result<CheckOutcome, CliError> {
    let name = format!("gamma-bracket-{}", cases.first().map_or(Mode::Preemptive, |c| c.mode));
    let mut crossings = 0;
    let mut inside = 0;
    for c in cases {
        let vt = c.solve()?;
        let acts: Vec<Option<usize>> = (1..=c.a_max).map(|d| vt.action_at(&State::l1(d))).collect();
        for d in 2..=c.a_max as usize {
            let (before, after) = (acts[d - 2], acts[d - 1]);
            let Some(m) = after.filter(|_| before != after) else { continue };
            let lo = predecessor_cost(&c.nu, m) - c.nu[m] + (d - 1) as f64;
            crossings += 1;
            inside += usize::from(lo - 1e-9 <= vt.gamma && vt.gamma <= lo + 1.0 + 1e-9);
        }
    }
    Ok(CheckOutcome::new(
        &name,
        inside == crossings,
        format!("{inside} of {crossings} layer-1 crossings bracket the average cost"),
    ))
}

/// Exhaustive search over every assignment of users to types.
pub fn brute_force_matching(w: &Weights, capacity: &[usize]) -> f64 {
    fn go(u: usize, w: &Weights, cap: &mut Vec<usize>, acc: f64, best: &mut f64) {
        if u == w.users {
            *best = best.max(acc);
            return;
        }
        go(u + 1, w, cap, acc, best);
        for k in 0..cap.len() {
            if cap[k] > 0 {
                cap[k] -= 1;
                go(u + 1, w, cap, acc + w.get(u, k), best);
                cap[k] += 1;
            }
        }
    }
    let mut best = 0.0;
    go(0, w, &mut capacity.to_vec(), 0.0, &mut best);
    best
}

pub fn matching(n: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for i in 0..n {
        let users = rng.gen_range(1..=6);
        let types = rng.gen_range(1..=3);
        let mut w = Weights::new(users, types);
        for u in 0..users {
            for k in 0..types {
                w.set(u, k, if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..10.0) });
            }
        }
        let capacity: Vec<usize> = (0..types).map(|_| rng.gen_range(1..=2)).collect();
        let m = assign(&w, &capacity);
        let exact = brute_force_matching(&w, &capacity);
        let dual_gap = (m.dual_objective(&capacity) - m.weight).abs();
        if (m.weight - exact).abs() > 1e-9 * (1.0 + exact) || dual_gap > 1e-9 * (1.0 + exact) {
            bad.push(i);
        }
    }
    CheckOutcome::new("matching", bad.is_empty(), format!("{} of {n} instances differ from brute force{}", bad.len(), fmt_idx(&bad)))
}

/// The worked example: one user, two servers.
pub fn case_study(mode: Mode) -> SystemConfig {
    let mut cfg = SystemConfig::new(
        vec![UserGroup { tau_min: 1, count: 1 }],
        vec![ServerGroup { p: 0.5, count: 1, nu: 3.0 }, ServerGroup { p: 0.8, count: 1, nu: 5.0 }],
        mode,
    );
    cfg.a_max = 40;
    cfg
}

pub fn thresholds() -> CheckOutcome {
    let th = closed_form_thresholds(&[3.0, 5.0], 10.0);
    CheckOutcome::new("thresholds", th == [8, 15], format!("layer-1 thresholds {th:?} at gamma 10"))
}

/// A small two-group system where capacity binds.
pub fn small_system(mode: Mode) -> SystemConfig {
    let mut cfg = SystemConfig::new(
        vec![UserGroup { tau_min: 1, count: 3 }, UserGroup { tau_min: 3, count: 2 }],
        vec![ServerGroup { p: 0.4, count: 1, nu: 0.0 }, ServerGroup { p: 0.8, count: 1, nu: 0.0 }],
        mode,
    );
    cfg.a_max = 40;
    cfg
}

pub fn fluid_lp() -> Result<CheckOutcome, CliError> {
    let mut worst: f64 = 0.0;
    for mode in [Mode::Preemptive, Mode::NonPreemptive] {
        let cfg = small_system(mode);
        let d = solve_relaxed_dual(&cfg, DualOptions { tol: 1e-7, ..DualOptions::default() })?;
        let lp = build_fluid_lp_relaxed(&cfg, &vec![0.0; cfg.server_groups.len()])?.solve()?;
        worst = worst.max((lp.objective - d.lower_bound).abs() / (1.0 + lp.objective.abs()));
    }
    Ok(CheckOutcome::new("fluid-lp", worst < 1e-4, format!("max relative LP/dual gap {worst:.2e}")))
}

pub fn fixed_point() -> Result<CheckOutcome, CliError> {
    let cfg = case_study(Mode::NonPreemptive);
    let nu = cfg.initial_nu();
    let fluid = build_fluid_lp_relaxed(&cfg, &nu)?;
    let occ = fluid.solve()?;
    let table = IndexTable::build(&cfg, &nu, IndexSource::CriticalCost, SolveOptions::default(), None)?;
    let rep = check_fixed_point_equivalence(&fluid, &occ, &table, &nu, 1e-4)?;
    let mut control_fails = true;
    let mut control = Vec::new();
    for m in 0..nu.len() {
        let mut bad = nu.clone();
        bad[m] *= 1.1;
        let c = check_fixed_point_equivalence(&fluid, &occ, &table, &bad, 1e-4)?;
        control_fails &= !c.holds();
        control.push(format!("{:.1e}", c.gap));
    }
    Ok(CheckOutcome::new(
        "fixed-point",
        rep.holds() && control_fails,
        format!("gap {:.1e}; perturbed gaps {}", rep.gap, control.join(", ")),
    ))
}

pub fn determinism() -> Result<CheckOutcome, CliError> {
    let cfg = small_system(Mode::NonPreemptive);
    let mut ok = true;
    for policy in [PolicyKind::Nested, PolicyKind::Mamp, PolicyKind::Marp] {
        let opts = RunOptions::new(policy, 500, 3);
        let a = run(&cfg, &opts)?;
        let b = run(&cfg, &opts)?;
        ok &= a.slot_aoi == b.slot_aoi && a.nu_trace == b.nu_trace;
    }
    Ok(CheckOutcome::new("determinism", ok, "repeated runs with one seed"))
}

/// Every check, with `n` randomized configs for each structural one.
pub fn run_suite(n: usize, seed: u64) -> Result<Vec<CheckOutcome>, CliError> {
    let mut out = vec![thresholds(), matching(50, seed)];
    for (i, mode) in [Mode::Preemptive, Mode::NonPreemptive].into_iter().enumerate() {
        let cases = random_cases(n, seed + i as u64, mode);
        out.push(mltt(&cases)?);
        out.push(intra_indexability(&cases)?);
        out.push(value_bounds(&cases)?);
        out.push(precise_division(&cases)?);
        out.push(gamma_bracket(&cases)?);
    }
    out.push(fluid_lp()?);
    out.push(fixed_point()?);
    out.push(determinism()?);
    Ok(out)
}
