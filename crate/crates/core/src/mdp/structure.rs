use serde::{Deserialize, Serialize};

use super::build::State;
use super::rvi::ValueTable;
use crate::model::Mode;

/// Action pair compared by a threshold: `to` becomes preferred over `from`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Threshold {
    /// Generation age, 0 for layer 1.
    pub gen_age: u32,
    /// Holding server in non-preemptive layer 2.
    pub copy: usize,
    pub from: Option<usize>,
    pub to: Option<usize>,
    /// First age at which `to` is strictly preferred, if any.
    pub age: Option<u32>,
    /// Ages after `age` at which the preference flips back.
    pub reversals: u32,
}

/// Pairwise switching ages of a solved table.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub entries: Vec<Threshold>,
}

impl ThresholdTable {
    /// Layer-1 age at which `to` first beats `from`.
    pub fn layer1(&self, from: Option<usize>, to: Option<usize>) -> Option<u32> {
        self.entries
            .iter()
            .find(|t| t.gen_age == 0 && t.from == from && t.to == to)
            .and_then(|t| t.age)
    }

    pub fn get(&self, gen_age: u32, copy: usize, from: Option<usize>, to: Option<usize>) -> Option<&Threshold> {
        self.entries
            .iter()
            .find(|t| t.gen_age == gen_age && t.copy == copy && t.from == from && t.to == to)
    }

    pub fn non_unique(&self) -> impl Iterator<Item = &Threshold> {
        self.entries.iter().filter(|t| t.reversals > 0)
    }
}

const PREF_TOL: f64 = 1e-9;

fn scan(vt: &ValueTable, states: &[State], from: Option<usize>, to: Option<usize>) -> (Option<u32>, u32) {
    let mut first = None;
    let mut reversals = 0;
    let mut prev = false;
    for s in states {
        let a = vt.mu(s, from);
        let b = vt.mu(s, to);
        let pref = b < a - PREF_TOL * (1.0 + a.abs());
        if pref && first.is_none() {
            first = Some(s.delta);
        }
        if prev && !pref {
            reversals += 1;
        }
        prev = pref;
    }
    (first, reversals)
}

/// Scans every ordered action pair (slower action first) along each age line.
///
/// Layer-1 lines run over all ages. Layer-2 lines fix the generation age and
/// stop before the truncation cap, where elapsed time saturates.
pub fn extract_policy_and_thresholds(vt: &ValueTable) -> ThresholdTable {
    let m = &vt.mdp;
    let a = m.a_max;
    let mut entries = Vec::new();
    let acts: Vec<Option<usize>> = std::iter::once(None).chain((0..m.num_servers()).map(Some)).collect();

    let line: Vec<State> = (1..=a).map(State::l1).collect();
    for (i, &from) in acts.iter().enumerate() {
        for &to in &acts[i + 1..] {
            let (age, reversals) = scan(vt, &line, from, to);
            entries.push(Threshold { gen_age: 0, copy: 0, from, to, age, reversals });
        }
    }
    for copy in 0..m.copies() {
        let l2_acts: Vec<Option<usize>> = match m.mode {
            Mode::Preemptive => acts.clone(),
            Mode::NonPreemptive => vec![None, Some(copy)],
        };
        for d in 1..a - 1 {
            let line: Vec<State> = (d + 1..a).map(|delta| State::l2(delta, delta - d, copy)).collect();
            for (i, &from) in l2_acts.iter().enumerate() {
                for &to in &l2_acts[i + 1..] {
                    let (age, reversals) = scan(vt, &line, from, to);
                    entries.push(Threshold { gen_age: d, copy, from, to, age, reversals });
                }
            }
        }
    }
    ThresholdTable { entries }
}

/// A state where the chosen completion probability drops as age grows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlttViolation {
    pub state: State,
    pub previous_p: f64,
    pub p: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MlttReport {
    pub violations: Vec<MlttViolation>,
    /// Age lines checked.
    pub lines: usize,
    /// Layer-2 states where the task is abandoned after having been served
    /// at a younger age on the same line.
    pub stale_drops: usize,
}

impl MlttReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that the completion probability of the chosen server never
/// decreases along an age line.
///
/// On layer 1 waiting counts as probability 0. Layer-2 lines fix the
/// generation age and compare only the states where some server is used;
/// abandoning a stale task is counted in `stale_drops` instead. In
/// preemptive mode, slots within the minimum computing time are skipped
/// because no server can finish there. Ages at the truncation cap are
/// skipped.
///
/// Only ages from `tau_min + 2` on are checked, on both layers: a completion
/// never leaves a younger age, so smaller ages occur only before the first
/// completion.
pub fn check_mltt(vt: &ValueTable) -> MlttReport {
    let m = &vt.mdp;
    let a = m.a_max;
    let low = m.tau_min + 2;
    let p = |act: Option<usize>| act.map_or(0.0, |k| m.servers[k].p);
    let mut report = MlttReport::default();
    report.lines += 1;
    let mut prev: Option<f64> = None;
    for s in (low..a).map(State::l1) {
        let cur = p(vt.action_at(&s));
        if let Some(pp) = prev.filter(|&pp| cur < pp) {
            report.violations.push(MlttViolation { state: s, previous_p: pp, p: cur });
        }
        prev = Some(cur);
    }
    for copy in 0..m.copies() {
        for d in low..a - 1 {
            let start = match m.mode {
                Mode::Preemptive => d + m.tau_min + 1,
                Mode::NonPreemptive => d + 1,
            };
            report.lines += 1;
            let mut prev: Option<f64> = None;
            for delta in start.max(d + 1)..a {
                let s = State::l2(delta, delta - d, copy);
                match vt.action_at(&s) {
                    None => {
                        if prev.is_some() {
                            report.stale_drops += 1;
                        }
                    }
                    act => {
                        let cur = p(act);
                        if let Some(pp) = prev.filter(|&pp| cur < pp) {
                            report.violations.push(MlttViolation { state: s, previous_p: pp, p: cur });
                        }
                        prev = Some(cur);
                    }
                }
            }
        }
    }
    report
}

/// Outcome of a cost-to-go sensitivity check.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound: f64,
    pub max_increase: f64,
    pub violations: Vec<(State, f64)>,
    /// Lower bound and worst decrease, preemptive mode only.
    pub lower_bound: Option<f64>,
    pub min_increase: Option<f64>,
    pub checked: usize,
}

impl BoundReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Compares relative values before and after raising the cost of server `m`
/// by `delta_nu`.
///
/// Preemptive: every increase is at most `delta_nu / p_m^2`, and at least
/// `-delta_nu / p_{m+1}^2` on states at or beyond the age where server `m+1`
/// becomes preferred to `m` (with `p_{m+1} = 1` past the fastest server).
/// Non-preemptive: every increase is at most `delta_nu / p_m`.
///
/// Both tables are pinned to 0 at layer-1 age 1, so a rise of the average
/// cost shows up as a drift that grows with age.
pub fn check_value_bounds(low: &ValueTable, high: &ValueTable, m: usize, delta_nu: f64) -> BoundReport {
    let mdp = &low.mdp;
    let pm = mdp.servers[m].p;
    let tol = 1e-7;
    let mut rep = BoundReport::default();
    let preemptive = mdp.mode == Mode::Preemptive;
    rep.bound = if preemptive { delta_nu / (pm * pm) } else { delta_nu / pm };
    let th = preemptive.then(|| extract_policy_and_thresholds(low));
    let pn = mdp.servers.get(m + 1).map_or(1.0, |s| s.p);
    let lb = -delta_nu / (pn * pn);
    let mut min_inc = f64::INFINITY;
    for idx in 0..mdp.num_states() {
        let s = mdp.state(idx);
        let diff = high.v[idx] - low.v[idx];
        rep.checked += 1;
        rep.max_increase = rep.max_increase.max(diff);
        if diff > rep.bound + tol {
            rep.violations.push((s, diff));
        }
        if let Some(th) = &th {
            let gen = if s.is_l1() { 0 } else { s.gen_age() };
            let h = if m + 1 < mdp.num_servers() {
                th.get(gen, 0, Some(m), Some(m + 1)).and_then(|t| t.age)
            } else {
                Some(0)
            };
            if matches!(h, Some(h) if s.delta >= h) {
                min_inc = min_inc.min(diff);
                if diff < lb - tol {
                    rep.violations.push((s, diff));
                }
            }
        }
    }
    if preemptive {
        rep.lower_bound = Some(lb);
        rep.min_increase = min_inc.is_finite().then_some(min_inc);
    }
    rep
}
