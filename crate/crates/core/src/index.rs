//! Nested indices, passive sets and the indexability diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mdp::{build_truncated_mdp, solve_from, MdpTable, SolveOptions, State, ValueTable};
use crate::model::{Layer, SystemConfig, UserSpec, UserState};

const STRICT: f64 = 1e-9;

#[inline]
fn strictly_less(a: f64, b: f64) -> bool {
    a < b - STRICT * (1.0 + b.abs())
}

/// Closed-form nested index `max(0, nu_pred + delta - gamma)`.
pub fn closed_form(delta: f64, nu_pred: f64, gamma: f64) -> f64 {
    (nu_pred + delta - gamma).max(0.0)
}

/// Cost of the server that precedes `m` in the nesting order.
///
/// Servers nest from the fastest down: the fastest server has the wait
/// action (cost 0) as predecessor, every other server the next faster one.
/// `nu` is indexed in ascending-p order.
pub fn predecessor_cost(nu: &[f64], m: usize) -> f64 {
    nu.get(m + 1).copied().unwrap_or(0.0)
}

/// Closed-form nested index of server `m` at `state`.
pub fn nested_index_closed_form(state: &UserState, nu: &[f64], gamma: f64, m: usize) -> f64 {
    closed_form(state.delta() as f64, predecessor_cost(nu, m), gamma)
}

/// Smallest layer-1 age at which the closed-form index of each server reaches its cost.
pub fn closed_form_thresholds(nu: &[f64], gamma: f64) -> Vec<u32> {
    (0..nu.len())
        .map(|m| {
            let a = (nu[m] - predecessor_cost(nu, m) + gamma).ceil();
            a.max(1.0) as u32
        })
        .collect()
}

/// Most expensive cost at which `m` is still weakly optimal at `s`, holding
/// the relative values of `vt` fixed: `max(0, nu_m + min_{a != m} mu_a - mu_m)`.
/// Zero when `m` is not a legal action at `s`.
pub fn critical_cost(vt: &ValueTable, s: &State, m: usize) -> f64 {
    let mdp = &vt.mdp;
    if !mdp.is_legal(s, Some(m)) {
        return 0.0;
    }
    let own = vt.mu(s, Some(m));
    let other = mdp
        .actions(s)
        .into_iter()
        .filter(|&a| a != Some(m))
        .map(|a| vt.mu(s, a))
        .fold(f64::INFINITY, f64::min);
    (mdp.servers[m].nu + other - own).max(0.0)
}

/// Whether some other legal action strictly beats `m` at `s`.
pub fn is_beaten(vt: &ValueTable, s: &State, m: usize) -> bool {
    let mdp = &vt.mdp;
    if !mdp.is_legal(s, Some(m)) {
        return true;
    }
    let own = vt.mu(s, Some(m));
    mdp.actions(s)
        .into_iter()
        .filter(|&a| a != Some(m))
        .any(|a| strictly_less(vt.mu(s, a), own))
}

/// Result of the definitional bisection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericIndex {
    pub value: f64,
    /// No crossing below the upper end of the bracket.
    pub saturated: bool,
    /// Average cost solved at `value`.
    pub gamma: f64,
    pub solves: usize,
}

fn with_cost(base: &MdpTable, m: usize, x: f64) -> MdpTable {
    let mut nu = base.nu();
    nu[m] = x;
    base.with_nu(&nu)
}

/// Infimum of the cost of server `m` at which another action strictly beats
/// it at `s`, re-solving the subproblem at each trial cost.
///
/// The bracket is `[0, nu_m + a_max]`; each solve is warm-started from the
/// previous one.
pub fn nested_index_numeric(base: &ValueTable, s: &State, m: usize, tol: f64, opts: SolveOptions) -> Result<NumericIndex> {
    let mdp = &base.mdp;
    let mut warm = base.clone();
    let mut solves = 0;
    let mut probe = |x: f64, warm: &mut ValueTable| -> Result<bool> {
        let vt = solve_from(&with_cost(mdp, m, x), Some(warm), opts)?;
        solves += 1;
        let beaten = is_beaten(&vt, s, m);
        *warm = vt;
        Ok(beaten)
    };
    if probe(0.0, &mut warm)? {
        let g = warm.gamma;
        return Ok(NumericIndex { value: 0.0, saturated: false, gamma: g, solves: 1 });
    }
    let mut lo = 0.0;
    let mut hi = mdp.servers[m].nu + mdp.a_max as f64;
    if !probe(hi, &mut warm)? {
        let g = warm.gamma;
        return Ok(NumericIndex { value: hi, saturated: true, gamma: g, solves: 2 });
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if probe(mid, &mut warm)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let vt = solve_from(&with_cost(mdp, m, hi), Some(&warm), opts)?;
    Ok(NumericIndex { value: hi, saturated: false, gamma: vt.gamma, solves: solves + 1 })
}

/// States of one layer where some other action weakly beats server `m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassiveSet {
    pub server: usize,
    pub layer: Layer,
    pub states: Vec<usize>,
    pub layer_size: usize,
}

impl PassiveSet {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.states.len() == self.layer_size
    }
}

/// Passive set of server `m` on `layer` under `vt`.
pub fn passive_set(vt: &ValueTable, m: usize, layer: Layer) -> PassiveSet {
    let mdp = &vt.mdp;
    let a = mdp.a_max as usize;
    let range = match layer {
        Layer::L1 => 0..a,
        Layer::L2 => a..mdp.num_states(),
    };
    let layer_size = range.len();
    let states = range
        .filter(|&i| {
            let s = mdp.state(i);
            if !mdp.is_legal(&s, Some(m)) {
                return true;
            }
            let own = vt.mu(&s, Some(m));
            mdp.actions(&s)
                .into_iter()
                .filter(|&act| act != Some(m))
                .any(|act| vt.mu(&s, act) <= own + STRICT * (1.0 + own.abs()))
        })
        .collect();
    PassiveSet { server: m, layer, states, layer_size }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct IndexabilityReport {
    pub grid: Vec<f64>,
    /// Passive-set sizes on layers 1 and 2 at each grid point.
    pub counts: Vec<[usize; 2]>,
    pub layer_sizes: [usize; 2],
    /// Grid positions where a layer's passive set shrank.
    pub violations: Vec<(usize, Layer)>,
    /// Whether both layers are fully passive at the top of the grid.
    pub reaches_full: bool,
}

impl IndexabilityReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty() && (self.grid.is_empty() || self.reaches_full)
    }
}

/// Sweeps the cost of server `m` over an ascending grid and records
/// passive-set sizes per layer.
pub fn check_intra_indexability(base: &MdpTable, m: usize, grid: &[f64], opts: SolveOptions) -> Result<IndexabilityReport> {
    let mut rep = IndexabilityReport { grid: grid.to_vec(), ..Default::default() };
    let mut warm: Option<ValueTable> = None;
    for (k, &x) in grid.iter().enumerate() {
        let vt = solve_from(&with_cost(base, m, x), warm.as_ref(), opts)?;
        let c1 = passive_set(&vt, m, Layer::L1);
        let c2 = passive_set(&vt, m, Layer::L2);
        rep.layer_sizes = [c1.layer_size, c2.layer_size];
        let now = [c1.len(), c2.len()];
        if let Some(prev) = rep.counts.last() {
            for (l, layer) in [Layer::L1, Layer::L2].into_iter().enumerate() {
                if now[l] < prev[l] {
                    rep.violations.push((k, layer));
                }
            }
        }
        rep.counts.push(now);
        warm = Some(vt);
    }
    rep.reaches_full = rep.counts.last().is_some_and(|c| *c == rep.layer_sizes);
    Ok(rep)
}

/// One probe of the precise-division check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DivisionCase {
    pub state: State,
    pub server: usize,
    pub index: NumericIndex,
    /// At cost equal to the index, `m` is weakly optimal.
    pub at_index: Option<bool>,
    /// Below the index, `m` is strictly optimal.
    pub below: Option<bool>,
    /// Above the index, another action strictly beats `m`.
    pub above: Option<bool>,
}

impl DivisionCase {
    pub fn is_ok(&self) -> bool {
        [self.at_index, self.below, self.above].iter().all(|c| c.unwrap_or(true))
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DivisionReport {
    pub cases: Vec<DivisionCase>,
}

impl DivisionReport {
    pub fn violations(&self) -> impl Iterator<Item = &DivisionCase> {
        self.cases.iter().filter(|c| !c.is_ok())
    }

    pub fn is_ok(&self) -> bool {
        self.violations().next().is_none()
    }
}

/// Checks the trichotomy between the numeric index and the cost of `m`:
/// cost equal to the index leaves `m` weakly optimal, a cost `offset` below
/// makes it strictly optimal, a cost `offset` above makes it strictly beaten.
pub fn check_precise_division(
    base: &ValueTable,
    probes: &[(State, usize)],
    offset: f64,
    opts: SolveOptions,
) -> Result<DivisionReport> {
    let mdp = &base.mdp;
    let mut rep = DivisionReport::default();
    for &(s, m) in probes {
        if !mdp.is_legal(&s, Some(m)) {
            continue;
        }
        let idx = nested_index_numeric(base, &s, m, 1e-9, opts)?;
        let mut case = DivisionCase { state: s, server: m, index: idx, at_index: None, below: None, above: None };
        if !idx.saturated {
            let solve = |x: f64| solve_from(&with_cost(mdp, m, x), Some(base), opts);
            let margin = |vt: &ValueTable| {
                let own = vt.mu(&s, Some(m));
                let other = mdp
                    .actions(&s)
                    .into_iter()
                    .filter(|&a| a != Some(m))
                    .map(|a| vt.mu(&s, a))
                    .fold(f64::INFINITY, f64::min);
                (own, other)
            };
            if idx.value > 0.0 {
                let (own, other) = margin(&solve(idx.value)?);
                case.at_index = Some(own <= other + 1e-6 * (1.0 + other.abs()));
            }
            if idx.value - offset >= 0.0 {
                let (own, other) = margin(&solve(idx.value - offset)?);
                case.below = Some(strictly_less(own, other));
            }
            let (own, other) = margin(&solve(idx.value + offset)?);
            case.above = Some(strictly_less(other, own));
        }
        rep.cases.push(case);
    }
    Ok(rep)
}

/// Where the simulator takes its indices from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndexSource {
    /// Critical cost against the solved relative values.
    CriticalCost,
    /// `max(0, nu_pred + delta - gamma)` with the solved average cost.
    ClosedForm,
    /// Critical cost against the passive action only, leaving the choice
    /// between servers to the matching.
    Passive,
}

impl IndexSource {
    pub fn name(self) -> &'static str {
        match self {
            IndexSource::CriticalCost => "critical-cost",
            IndexSource::ClosedForm => "closed-form",
            IndexSource::Passive => "passive",
        }
    }
}

impl std::fmt::Display for IndexSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for IndexSource {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "critical-cost" => Ok(IndexSource::CriticalCost),
            "closed-form" => Ok(IndexSource::ClosedForm),
            "passive" => Ok(IndexSource::Passive),
            _ => Err(crate::Error::config("index_source", format!("unknown index source `{s}`"))),
        }
    }
}

/// Indices of every user type at the current cost vector.
///
/// Subproblems are solved at `solved_nu`. Between re-solves the action
/// values are shifted by the change in each server's own cost, with the
/// relative values held fixed, and each average cost moves by the change in
/// cost weighted by the group's stationary use of each server.
#[derive(Clone, Debug)]
pub struct IndexTable {
    pub source: IndexSource,
    pub nu: Vec<f64>,
    pub solved_nu: Vec<f64>,
    pub gammas: Vec<f64>,
    /// Stationary activation per group and server type at `solved_nu`.
    pub activation: Vec<Vec<f64>>,
    pub tables: Vec<ValueTable>,
}

impl IndexTable {
    /// Solves every user type at `nu`, warm-starting from `warm` when given.
    pub fn build(
        cfg: &SystemConfig,
        nu: &[f64],
        source: IndexSource,
        opts: SolveOptions,
        warm: Option<&IndexTable>,
    ) -> Result<IndexTable> {
        let servers = cfg.server_types(nu);
        let tables = cfg
            .user_groups
            .par_iter()
            .enumerate()
            .map(|(g, grp)| {
                let user = UserSpec { id: 0, group: g, tau_min: grp.tau_min };
                let mdp = build_truncated_mdp(&user, &servers, nu, cfg.a_max, cfg.mode)?;
                let vt = solve_from(&mdp, warm.and_then(|w| w.tables.get(g)), opts)?;
                let act = vt.stationary()?.activation(nu.len());
                Ok((vt, act))
            })
            .collect::<Result<Vec<_>>>()?;
        let (tables, activation): (Vec<_>, Vec<_>) = tables.into_iter().unzip();
        Ok(IndexTable {
            source,
            nu: nu.to_vec(),
            solved_nu: nu.to_vec(),
            gammas: tables.iter().map(|t| t.gamma).collect(),
            activation,
            tables,
        })
    }

    /// Closed-form indices with fixed average costs and no solved tables.
    pub fn pinned(nu: &[f64], gammas: Vec<f64>) -> IndexTable {
        IndexTable {
            source: IndexSource::ClosedForm,
            nu: nu.to_vec(),
            solved_nu: nu.to_vec(),
            activation: Vec::new(),
            gammas,
            tables: Vec::new(),
        }
    }

    /// Average cost of `group` at the current costs, to first order.
    pub fn gamma(&self, group: usize) -> f64 {
        let shift: f64 = match self.activation.get(group) {
            Some(act) => act.iter().zip(self.nu.iter().zip(&self.solved_nu)).map(|(a, (x, y))| a * (x - y)).sum(),
            None => 0.0,
        };
        self.gammas[group] + shift
    }

    pub fn set_nu(&mut self, nu: &[f64]) {
        self.nu.copy_from_slice(nu);
    }

    /// Largest relative move of any cost since the last solve, measured
    /// against `max(|nu|, floor)`.
    pub fn drift(&self, floor: f64) -> f64 {
        self.nu
            .iter()
            .zip(&self.solved_nu)
            .map(|(a, b)| (a - b).abs() / b.abs().max(floor))
            .fold(0.0, f64::max)
    }

    /// Re-solves at the current costs, warm-starting from the old tables.
    pub fn refresh(&mut self, cfg: &SystemConfig, opts: SolveOptions) -> Result<()> {
        if self.tables.is_empty() {
            self.solved_nu = self.nu.clone();
            return Ok(());
        }
        let nu = self.nu.clone();
        *self = IndexTable::build(cfg, &nu, self.source, opts, Some(self))?;
        Ok(())
    }

    /// Action value at the current costs.
    fn mu(&self, vt: &ValueTable, s: &State, a: Option<usize>) -> f64 {
        vt.mu(s, a) + a.map_or(0.0, |m| self.nu[m] - self.solved_nu[m])
    }

    /// Index of server type `m` for a user of `group` in a type-level state.
    pub fn index(&self, group: usize, state: &UserState, m: usize) -> f64 {
        match self.source {
            IndexSource::ClosedForm => nested_index_closed_form(state, &self.nu, self.gamma(group), m),
            IndexSource::CriticalCost | IndexSource::Passive => {
                let vt = &self.tables[group];
                let s = vt.mdp.state(vt.mdp.index_of(state));
                if !vt.mdp.is_legal(&s, Some(m)) {
                    return 0.0;
                }
                let own = self.mu(vt, &s, Some(m));
                let other = if self.source == IndexSource::Passive {
                    self.mu(vt, &s, None)
                } else {
                    vt.mdp
                        .actions(&s)
                        .into_iter()
                        .filter(|&a| a != Some(m))
                        .map(|a| self.mu(vt, &s, a))
                        .fold(f64::INFINITY, f64::min)
                };
                (self.nu[m] + other - own).max(0.0)
            }
        }
    }

    /// Whether a non-preemptive user in layer 2 should abandon its task.
    pub fn prefers_drop(&self, group: usize, state: &UserState) -> bool {
        let Some(m) = state.server() else { return false };
        match self.source {
            IndexSource::ClosedForm => {
                strictly_less(predecessor_cost(&self.nu, m) + state.delta() as f64 - self.gamma(group), 0.0)
            }
            IndexSource::CriticalCost | IndexSource::Passive => {
                let vt = &self.tables[group];
                let s = vt.mdp.state(vt.mdp.index_of(state));
                strictly_less(self.mu(vt, &s, None), self.mu(vt, &s, Some(m)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::relative_value_iteration;
    use crate::model::{Mode, ServerSpec};

    fn case_study(mode: Mode, a_max: u32) -> ValueTable {
        let servers = vec![
            ServerSpec { id: 0, group: 0, p: 0.5, nu: 3.0 },
            ServerSpec { id: 1, group: 1, p: 0.8, nu: 5.0 },
        ];
        let user = UserSpec { id: 0, group: 0, tau_min: 1 };
        let mdp = build_truncated_mdp(&user, &servers, &[3.0, 5.0], a_max, mode).unwrap();
        relative_value_iteration(&mdp, SolveOptions::default()).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let nu = [3.0, 5.0];
        assert_eq!(nested_index_closed_form(&UserState::Idle { delta: 15 }, &nu, 10.0, 1), 5.0);
        assert_eq!(nested_index_closed_form(&UserState::Idle { delta: 13 }, &nu, 10.0, 0), 8.0);
        assert_eq!(nested_index_closed_form(&UserState::Idle { delta: 10 }, &nu, 10.0, 1), 0.0);
        assert_eq!(closed_form_thresholds(&nu, 10.0), vec![8, 15]);
    }

    #[test]
    fn common_shift_keeps_ranking() {
        let nu = [1.0, 2.0, 4.0];
        let up: Vec<f64> = nu.iter().map(|x| x + 3.0).collect();
        let s = UserState::Idle { delta: 40 };
        let rank = |nu: &[f64]| {
            let mut v: Vec<usize> = (0..3).collect();
            v.sort_by(|&a, &b| {
                let ia = nested_index_closed_form(&s, nu, 10.0, a) - nu[a];
                let ib = nested_index_closed_form(&s, nu, 10.0, b) - nu[b];
                ib.total_cmp(&ia)
            });
            v
        };
        assert_eq!(rank(&nu), rank(&up));
    }

    #[test]
    fn passive_sets_at_extremes() {
        let vt = case_study(Mode::NonPreemptive, 60);
        let big = vt.mdp.with_nu(&[3.0, 1e6]);
        let vt_big = relative_value_iteration(&big, SolveOptions::default()).unwrap();
        for layer in [Layer::L1, Layer::L2] {
            assert!(passive_set(&vt_big, 1, layer).is_full());
        }
        let twins = vt.mdp.with_nu(&[3.0, 3.0]);
        let mut twins = twins;
        twins.servers[0].p = 0.8;
        let vt_twin = relative_value_iteration(&twins, SolveOptions::default()).unwrap();
        assert!(passive_set(&vt_twin, 0, Layer::L1).is_full());
        assert!(passive_set(&vt_twin, 1, Layer::L1).is_full());
    }

    #[test]
    fn numeric_index_brackets_current_cost() {
        let vt = case_study(Mode::NonPreemptive, 60);
        let opts = SolveOptions::default();
        for delta in [6, 9, 12, 20] {
            let s = State::l1(delta);
            for m in 0..2 {
                let idx = nested_index_numeric(&vt, &s, m, 1e-7, opts).unwrap();
                let beaten = is_beaten(&vt, &s, m);
                if beaten {
                    assert!(idx.value <= vt.mdp.servers[m].nu + 1e-6, "{delta} {m} {idx:?}");
                } else {
                    assert!(idx.value >= vt.mdp.servers[m].nu - 1e-6, "{delta} {m} {idx:?}");
                }
            }
        }
    }

    #[test]
    fn critical_cost_divides_precisely() {
        let vt = case_study(Mode::Preemptive, 60);
        for i in 0..vt.mdp.num_states() {
            let s = vt.mdp.state(i);
            for m in 0..2 {
                let c = critical_cost(&vt, &s, m);
                let nu = vt.mdp.servers[m].nu;
                if c > nu + 1e-6 {
                    assert_eq!(vt.action(i), Some(m));
                }
                if c < nu - 1e-6 {
                    assert!(is_beaten(&vt, &s, m));
                }
            }
        }
    }

    #[test]
    fn empty_grid() {
        let vt = case_study(Mode::Preemptive, 30);
        let rep = check_intra_indexability(&vt.mdp, 0, &[], SolveOptions::default()).unwrap();
        assert!(rep.counts.is_empty() && rep.is_ok());
    }
}
