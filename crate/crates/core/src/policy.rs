//! Per-slot decision rules and the dual cost update.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::IndexTable;
use crate::matching::{assign, Weights};
use crate::mdp::ValueTable;
use crate::model::{Layer, Mode, ServerSpec, UserSpec, UserState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Nested,
    Mamp,
    Marp,
    Rrp,
    /// Every user follows its relaxed policy with no capacity limit.
    RelaxedLb,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] =
        [PolicyKind::Nested, PolicyKind::Rrp, PolicyKind::Mamp, PolicyKind::Marp, PolicyKind::RelaxedLb];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Nested => "nested",
            PolicyKind::Mamp => "mamp",
            PolicyKind::Marp => "marp",
            PolicyKind::Rrp => "rrp",
            PolicyKind::RelaxedLb => "relaxed-lb",
        }
    }

    /// Whether the policy respects server capacity.
    pub fn is_feasible(self) -> bool {
        self != PolicyKind::RelaxedLb
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config("policy", format!("unknown policy `{s}`")))
    }
}

/// Smoothed server costs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub nu: Vec<f64>,
    pub trace: Vec<Vec<f64>>,
    pub beta: f64,
}

impl DualState {
    pub fn new(nu: Vec<f64>, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::config("beta", format!("must lie in (0, 1), got {beta}")));
        }
        if nu.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::config("nu", "entries must be finite and >= 0"));
        }
        Ok(DualState { trace: vec![nu.clone()], nu, beta })
    }

    /// `nu <- (1 - beta) nu + beta nu'`, appending the result to the trace.
    pub fn update(&mut self, nu_prime: &[f64]) {
        for (x, &y) in self.nu.iter_mut().zip(nu_prime) {
            *x = ((1.0 - self.beta) * *x + self.beta * y).max(0.0);
        }
        self.trace.push(self.nu.clone());
    }
}

pub fn update_dual(mut ds: DualState, nu_prime: &[f64]) -> DualState {
    ds.update(nu_prime);
    ds
}

/// Everything a policy sees at the start of a slot.
#[derive(Clone, Copy, Debug)]
pub struct SlotView<'a> {
    pub states: &'a [UserState],
    pub users: &'a [UserSpec],
    /// Concrete servers in ascending-p order; `group` is the server type.
    pub servers: &'a [ServerSpec],
    /// User holding each server at the start of the slot (non-preemptive).
    pub holder: &'a [Option<usize>],
    pub mode: Mode,
    pub num_types: usize,
}

impl SlotView<'_> {
    /// State with the concrete server replaced by its type.
    pub fn type_state(&self, n: usize) -> UserState {
        match self.states[n] {
            UserState::Computing { delta, gen_age, server } => {
                UserState::Computing { delta, gen_age, server: self.servers[server].group }
            }
            s => s,
        }
    }

    fn is_free(&self, m: usize) -> bool {
        self.mode == Mode::Preemptive || self.holder[m].is_none()
    }

    /// Whether user `n` takes part in this slot's assignment.
    fn eligible(&self, n: usize) -> bool {
        self.mode == Mode::Preemptive || self.states[n].layer() == Layer::L1
    }

    /// Assignable servers per type, ascending id.
    fn free_by_type(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_types];
        for (m, s) in self.servers.iter().enumerate() {
            if self.is_free(m) {
                out[s.group].push(m);
            }
        }
        out
    }
}

/// Servers used in one slot, per user.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub actions: Vec<Option<usize>>,
    /// Dual prices per type, for the cost update.
    pub nu_prime: Option<Vec<f64>>,
}

/// Non-preemptive layer-2 users keep their server.
fn continuing(view: &SlotView) -> Vec<Option<usize>> {
    (0..view.states.len())
        .map(|n| match (view.mode, view.states[n]) {
            (Mode::NonPreemptive, UserState::Computing { server, .. }) => Some(server),
            _ => None,
        })
        .collect()
}

/// Places users on concrete servers of their matched type. Users already
/// computing on a server of that type stay on it.
fn place(view: &SlotView, actions: &mut [Option<usize>], chosen: &[(usize, usize)]) {
    let mut free = view.free_by_type();
    let mut rest = Vec::new();
    for &(n, k) in chosen {
        if let UserState::Computing { server, .. } = view.states[n] {
            if view.servers[server].group == k {
                if let Some(pos) = free[k].iter().position(|&m| m == server) {
                    free[k].remove(pos);
                    actions[n] = Some(server);
                    continue;
                }
            }
        }
        rest.push((n, k));
    }
    for (n, k) in rest {
        actions[n] = Some(free[k].remove(0));
    }
}

/// How the nested policy turns indices into decisions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NestedRule {
    /// Maximum total index over all feasible assignments.
    Matching,
    /// Each user, in id order, takes the fastest free server whose index
    /// reaches its cost.
    Threshold,
}

impl std::str::FromStr for NestedRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matching" => Ok(NestedRule::Matching),
            "threshold" => Ok(NestedRule::Threshold),
            _ => Err(Error::config("nested_rule", format!("unknown rule `{s}`"))),
        }
    }
}

/// Nested index policy.
///
/// Non-preemptive layer-2 users continue unless the table prefers dropping.
/// With [`NestedRule::Matching`] the remaining users are assigned by a
/// maximum-index matching whose minimal dual prices become `nu_prime`; a
/// type without free servers keeps its current cost.
pub fn decide_nested(view: &SlotView, table: &IndexTable, rule: NestedRule) -> Decision {
    let n_users = view.states.len();
    let k = view.num_types;
    let mut actions = continuing(view);
    if view.mode == Mode::NonPreemptive {
        for n in 0..n_users {
            if actions[n].is_some() && table.prefers_drop(view.users[n].group, &view.type_state(n)) {
                actions[n] = None;
            }
        }
    }
    let free = view.free_by_type();
    let capacity: Vec<usize> = free.iter().map(Vec::len).collect();
    let eligible: Vec<usize> = (0..n_users).filter(|&n| view.eligible(n)).collect();
    if rule == NestedRule::Threshold {
        let mut left = capacity.clone();
        let mut chosen = Vec::new();
        for &n in &eligible {
            let s = view.type_state(n);
            let pick = (0..k)
                .rev()
                .find(|&t| left[t] > 0 && table.index(view.users[n].group, &s, t) >= table.nu[t]);
            if let Some(t) = pick {
                left[t] -= 1;
                chosen.push((n, t));
            }
        }
        place(view, &mut actions, &chosen);
        return Decision { actions, nu_prime: None };
    }
    let mut w = Weights::new(eligible.len(), k);
    for (row, &n) in eligible.iter().enumerate() {
        let s = view.type_state(n);
        for t in 0..k {
            if capacity[t] > 0 {
                w.set(row, t, table.index(view.users[n].group, &s, t));
            }
        }
    }
    let m = assign(&w, &capacity);
    let chosen: Vec<(usize, usize)> = eligible
        .iter()
        .zip(&m.assign)
        .filter_map(|(&n, a)| a.map(|t| (n, t)))
        .collect();
    place(view, &mut actions, &chosen);
    let nu_prime = (0..k)
        .map(|t| if capacity[t] > 0 { m.prices[t] } else { table.nu[t] })
        .collect();
    Decision { actions, nu_prime: Some(nu_prime) }
}

/// Greedy rule shared by the age-based benchmarks: eligible users by
/// descending weight (ties to the lower id) take the fastest free server.
fn greedy(view: &SlotView, weight: impl Fn(usize) -> f64) -> Decision {
    let mut actions = continuing(view);
    let mut order: Vec<(f64, usize)> = (0..view.states.len())
        .filter(|&n| view.eligible(n))
        .map(|n| (weight(n), n))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut free: Vec<usize> = (0..view.servers.len()).filter(|&m| view.is_free(m)).collect();
    free.sort_by(|&a, &b| view.servers[b].p.total_cmp(&view.servers[a].p).then(a.cmp(&b)));
    for ((_, n), m) in order.into_iter().zip(free) {
        actions[n] = Some(m);
    }
    Decision { actions, nu_prime: None }
}

/// Maximum age first.
pub fn decide_mamp(view: &SlotView) -> Decision {
    greedy(view, |n| view.states[n].delta() as f64)
}

/// MARP weight `delta + (delta - gen_age) / p`, with `p` the current
/// server's completion probability; zero second term in layer 1.
pub fn marp_weight(state: &UserState, servers: &[ServerSpec]) -> f64 {
    match *state {
        UserState::Idle { delta } => delta as f64,
        UserState::Computing { delta, gen_age, server } => {
            delta as f64 + (delta - gen_age) as f64 / servers[server].p
        }
    }
}

/// Maximum age reduction first.
pub fn decide_marp(view: &SlotView) -> Decision {
    greedy(view, |n| marp_weight(&view.states[n], view.servers))
}

fn relaxed_action(view: &SlotView, relaxed: &[ValueTable], n: usize) -> Option<usize> {
    let vt = &relaxed[view.users[n].group];
    vt.action(vt.mdp.index_of(&view.type_state(n)))
}

/// Relaxed policies with uniformly random tie-breaking on collisions.
pub fn decide_rrp<R: Rng + ?Sized>(view: &SlotView, relaxed: &[ValueTable], rng: &mut R) -> Decision {
    let n_users = view.states.len();
    let mut actions = continuing(view);
    let mut proposals: Vec<Vec<usize>> = vec![Vec::new(); view.num_types];
    for n in 0..n_users {
        let a = relaxed_action(view, relaxed, n);
        if view.eligible(n) {
            if let Some(t) = a {
                proposals[t].push(n);
            }
        } else if a.is_none() {
            actions[n] = None;
        }
    }
    let free = view.free_by_type();
    let mut chosen = Vec::new();
    for (t, props) in proposals.iter().enumerate() {
        let c = free[t].len();
        if props.len() <= c {
            chosen.extend(props.iter().map(|&n| (n, t)));
        } else {
            let mut keep: Vec<usize> = sample(rng, props.len(), c).into_iter().map(|i| props[i]).collect();
            keep.sort_unstable();
            chosen.extend(keep.into_iter().map(|n| (n, t)));
        }
    }
    chosen.sort_unstable();
    place(view, &mut actions, &chosen);
    Decision { actions, nu_prime: None }
}

/// Relaxed policies without capacity. Actions are server types, not servers.
pub fn decide_relaxed(view: &SlotView, relaxed: &[ValueTable]) -> Decision {
    let actions = (0..view.states.len())
        .map(|n| {
            let a = relaxed_action(view, relaxed, n);
            match (view.mode, view.states[n]) {
                (Mode::NonPreemptive, UserState::Computing { server, .. }) => a.map(|_| view.servers[server].group),
                _ => a,
            }
        })
        .collect();
    Decision { actions, nu_prime: None }
}

/// Checks server exclusivity and the non-preemptive rules.
pub fn check_feasible(view: &SlotView, actions: &[Option<usize>]) -> Result<()> {
    let mut used = vec![false; view.servers.len()];
    for (n, a) in actions.iter().enumerate() {
        let Some(m) = *a else { continue };
        if m >= view.servers.len() {
            return Err(Error::Scheduling(format!("user {n} assigned to unknown server {m}")));
        }
        if std::mem::replace(&mut used[m], true) {
            return Err(Error::Scheduling(format!("server {m} assigned twice")));
        }
        if view.mode == Mode::NonPreemptive {
            match view.states[n] {
                UserState::Computing { server, .. } if server != m => {
                    return Err(Error::Scheduling(format!("user {n} moved from server {server} to {m}")));
                }
                UserState::Idle { .. } if view.holder[m].is_some() => {
                    return Err(Error::Scheduling(format!("user {n} offloaded to busy server {m}")));
                }
                _ => {}
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn users(n: usize) -> Vec<UserSpec> {
        (0..n).map(|id| UserSpec { id, group: 0, tau_min: 1 }).collect()
    }

    fn servers(p: &[f64]) -> Vec<ServerSpec> {
        p.iter().enumerate().map(|(i, &p)| ServerSpec { id: i, group: i, p, nu: 0.0 }).collect()
    }

    #[test]
    fn dual_update() {
        let mut ds = DualState::new(vec![2.0, 4.0], 0.5).unwrap();
        ds.update(&[4.0, 2.0]);
        assert_eq!(ds.nu, vec![3.0, 3.0]);
        ds.update(&[3.0, 3.0]);
        assert_eq!(ds.nu, vec![3.0, 3.0]);
        assert_eq!(ds.trace.len(), 3);
        assert!(DualState::new(vec![0.0], 1.0).is_err());
        assert!(DualState::new(vec![0.0], 0.0).is_err());
    }

    #[test]
    fn dual_converges_geometrically() {
        let mut ds = DualState::new(vec![0.0], 0.1).unwrap();
        for t in 1..=20 {
            ds.update(&[1.0]);
            assert!((ds.nu[0] - (1.0 - 0.9f64.powi(t))).abs() < 1e-12);
        }
    }

    #[test]
    fn mamp_pairs_oldest_with_fastest() {
        let st = [UserState::Idle { delta: 9 }, UserState::Idle { delta: 3 }];
        let srv = servers(&[0.5, 0.8]);
        let u = users(2);
        let holder = [None, None];
        let view = SlotView { states: &st, users: &u, servers: &srv, holder: &holder, mode: Mode::NonPreemptive, num_types: 2 };
        assert_eq!(decide_mamp(&view).actions, vec![Some(1), Some(0)]);
    }

    #[test]
    fn mamp_ties_go_to_lower_id() {
        let st = [UserState::Idle { delta: 4 }, UserState::Idle { delta: 4 }];
        let srv = servers(&[0.5]);
        let u = users(2);
        let holder = [None];
        let view = SlotView { states: &st, users: &u, servers: &srv, holder: &holder, mode: Mode::Preemptive, num_types: 1 };
        assert_eq!(decide_mamp(&view).actions, vec![Some(0), None]);
    }

    #[test]
    fn busy_users_get_nothing_new() {
        let st = [
            UserState::Computing { delta: 5, gen_age: 3, server: 0 },
            UserState::Computing { delta: 7, gen_age: 2, server: 1 },
        ];
        let srv = servers(&[0.5, 0.8]);
        let u = users(2);
        let holder = [Some(0), Some(1)];
        let view = SlotView { states: &st, users: &u, servers: &srv, holder: &holder, mode: Mode::NonPreemptive, num_types: 2 };
        let d = decide_mamp(&view);
        assert_eq!(d.actions, vec![Some(0), Some(1)]);
        check_feasible(&view, &d.actions).unwrap();
    }

    #[test]
    fn marp_weights() {
        let srv = servers(&[0.5]);
        assert_eq!(marp_weight(&UserState::Idle { delta: 7 }, &srv), 7.0);
        assert_eq!(marp_weight(&UserState::Computing { delta: 10, gen_age: 4, server: 0 }, &srv), 22.0);
    }

    #[test]
    fn rrp_keeps_proposers_uniformly() {
        let srv = servers(&[0.9]);
        let u = users(3);
        let mdp = crate::mdp::build_truncated_mdp(&u[0], &srv, &[0.0], 30, Mode::Preemptive).unwrap();
        let vt = crate::mdp::relative_value_iteration(&mdp, Default::default()).unwrap();
        let st = [UserState::Idle { delta: 20 }; 3];
        let holder = [None];
        let view = SlotView { states: &st, users: &u, servers: &srv, holder: &holder, mode: Mode::Preemptive, num_types: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 3];
        let trials = 30_000;
        for _ in 0..trials {
            let d = decide_rrp(&view, std::slice::from_ref(&vt), &mut rng);
            assert_eq!(d.actions.iter().flatten().count(), 1);
            counts[d.actions.iter().position(Option::is_some).unwrap()] += 1;
        }
        let e = trials as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 9.21, "{counts:?}");
    }

    #[test]
    fn feasibility_rejects_double_use() {
        let st = [UserState::Idle { delta: 4 }, UserState::Idle { delta: 4 }];
        let srv = servers(&[0.5]);
        let u = users(2);
        let holder = [None];
        let view = SlotView { states: &st, users: &u, servers: &srv, holder: &holder, mode: Mode::Preemptive, num_types: 1 };
        assert!(check_feasible(&view, &[Some(0), Some(0)]).is_err());
    }
}
