use serde::{Deserialize, Serialize};

use super::build::{MdpTable, State};
use crate::error::{Error, Result};
use crate::model::Mode;

/// Stopping rule for the average-cost solver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: 1e-9, max_iters: 100_000 }
    }
}

/// Solved average-cost problem of one user.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValueTable {
    pub mdp: MdpTable,
    /// Optimal average cost per slot.
    pub gamma: f64,
    /// Relative values, zero at layer-1 age 1.
    pub v: Vec<f64>,
    /// Greedy action per state: 0 is wait or drop, `m + 1` is server `m`.
    pub policy: Vec<u8>,
    pub iterations: usize,
    /// Span of the final Bellman residual.
    pub span: f64,
}

#[inline]
fn slack(x: f64) -> f64 {
    1e-12 * (1.0 + x.abs())
}

/// Keeps the first action unless a later one is better beyond rounding noise,
/// so ties go to wait and then to the lower-p server.
#[inline]
fn better(candidate: f64, best: f64) -> bool {
    candidate < best - slack(best)
}

struct Work<'a> {
    m: &'a MdpTable,
    p: Vec<f64>,
    nu: Vec<f64>,
}

impl Work<'_> {
    /// One in-place sweep in descending age order. Within an age, layer-2
    /// states go first in descending elapsed time, then the layer-1 state.
    /// Returns (min, max) of the per-state change.
    fn sweep(&self, h: &mut [f64], t: &mut [f64], pol: &mut [u8], g: f64) -> (f64, f64) {
        let m = self.m;
        let a = m.a_max;
        let tau = m.tau_min;
        let ns = self.p.len();
        let copies = m.copies();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut put = |h: &mut [f64], idx: usize, val: f64| {
            let d = val - h[idx];
            lo = lo.min(d);
            hi = hi.max(d);
            h[idx] = val;
        };
        for delta in (1..=a).rev() {
            let dn = m.next_age(delta);
            let df = delta as f64 - g;
            let drop_to = m.l1_index(dn);
            let drop_fresh = delta < a;
            for copy in 0..copies {
                let range = match m.mode {
                    Mode::Preemptive => 0..ns,
                    Mode::NonPreemptive => copy..copy + 1,
                };
                for e in (1..delta).rev() {
                    let idx = m.l2_index(delta, e, copy);
                    let stay = m.stay_index(delta, e, copy);
                    let ts = if stay == idx { 0.0 } else { t[stay] };
                    let hs = h[stay];
                    let hr = h[m.l1_index(e + 1)];
                    let mut best = h[drop_to];
                    let mut bt = if drop_fresh { t[drop_to] } else { 0.0 };
                    let mut ba = 0u8;
                    let done = e > tau;
                    for s in range.clone() {
                        let q = if done { self.p[s] } else { 0.0 };
                        let v = self.nu[s] + hs + q * (hr - hs);
                        if better(v, best) {
                            best = v;
                            bt = (1.0 - q) * ts;
                            ba = s as u8 + 1;
                        }
                    }
                    put(h, idx, df + best);
                    t[idx] = 1.0 + bt;
                    pol[idx] = ba;
                }
            }
            let idx = m.l1_index(delta);
            let mut best = h[drop_to];
            let mut bt = if drop_fresh { t[drop_to] } else { 0.0 };
            let mut ba = 0u8;
            for s in 0..ns {
                let copy = if m.mode == Mode::Preemptive { 0 } else { s };
                let to = m.l2_index(dn, 1, copy);
                let v = self.nu[s] + h[to];
                if better(v, best) {
                    best = v;
                    bt = t[to];
                    ba = s as u8 + 1;
                }
            }
            put(h, idx, df + best);
            t[idx] = 1.0 + bt;
            pol[idx] = ba;
        }
        (lo, hi)
    }

    /// Jacobi Bellman residual `min_a mu(s, a) - h(s)` over all states.
    fn residual(&self, h: &[f64]) -> (f64, f64) {
        let m = self.m;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for idx in 0..m.num_states() {
            let s = m.state(idx);
            let r = min_mu(m, h, &s).0 - h[idx];
            lo = lo.min(r);
            hi = hi.max(r);
        }
        (lo, hi)
    }
}

/// Expected cost of action `a` at `s` under relative values `h`.
pub(crate) fn mu_with(m: &MdpTable, h: &[f64], s: &State, a: Option<usize>) -> f64 {
    let tr = m.transitions(s, a);
    m.cost(s, a) + tr.iter().filter(|t| t.prob > 0.0).map(|t| t.prob * h[t.next]).sum::<f64>()
}

pub(crate) fn min_mu(m: &MdpTable, h: &[f64], s: &State) -> (f64, Option<usize>) {
    let acts = m.actions(s);
    let mut arg = acts[0];
    let mut best = mu_with(m, h, s, arg);
    for &a in &acts[1..] {
        let v = mu_with(m, h, s, a);
        if better(v, best) {
            best = v;
            arg = a;
        }
    }
    (best, arg)
}

/// Solves the average-cost problem by relative value iteration.
pub fn relative_value_iteration(mdp: &MdpTable, opts: SolveOptions) -> Result<ValueTable> {
    solve_from(mdp, None, opts)
}

/// Relative value iteration started from a previous solution.
///
/// Each sweep updates states in descending age order, so only values at
/// completion targets and at the truncation cap come from the previous
/// sweep. The average-cost estimate is then corrected by the drift at the
/// reference state divided by the expected number of slots until such a
/// target is reached. A final Jacobi pass certifies the result: the span of
/// the Bellman residual must be below `tol`, and `gamma` is its midpoint.
pub fn solve_from(mdp: &MdpTable, warm: Option<&ValueTable>, opts: SolveOptions) -> Result<ValueTable> {
    let n = mdp.num_states();
    let (mut h, mut g) = match warm {
        Some(w) if w.v.len() == n => (w.v.clone(), w.gamma),
        _ => (initial_values(mdp), 0.0),
    };
    let mut t = vec![1.0; n];
    let mut pol = vec![0u8; n];
    let work = Work {
        m: mdp,
        p: mdp.servers.iter().map(|s| s.p).collect(),
        nu: mdp.servers.iter().map(|s| s.nu).collect(),
    };
    let mut span = f64::INFINITY;
    for it in 1..=opts.max_iters {
        let (lo, hi) = work.sweep(&mut h, &mut t, &mut pol, g);
        let d = h[0];
        if pol[..mdp.a_max as usize].iter().all(|&a| a == 0) {
            // never offloading: the chain is absorbed at the age cap
            g = mdp.a_max as f64;
        } else {
            g += d / t[0];
        }
        for x in h.iter_mut() {
            *x -= d;
        }
        let step = hi - lo;
        if step < opts.tol && d.abs() < opts.tol {
            let (rlo, rhi) = work.residual(&h);
            span = rhi - rlo;
            if span < opts.tol {
                let gamma = 0.5 * (rlo + rhi);
                log::debug!("rvi converged in {it} sweeps, gamma {gamma}, span {span:e}");
                return Ok(ValueTable { mdp: mdp.clone(), gamma, v: h, policy: pol, iterations: it, span });
            }
        } else {
            span = step;
        }
    }
    Err(Error::NotConverged { iterations: opts.max_iters, span })
}

/// Cost of waiting forever from each age, a cheap monotone starting point.
fn initial_values(m: &MdpTable) -> Vec<f64> {
    (0..m.num_states()).map(|i| m.state(i).delta as f64 - 1.0).collect()
}

impl ValueTable {
    pub fn nu(&self) -> Vec<f64> {
        self.mdp.nu()
    }

    pub fn action(&self, idx: usize) -> Option<usize> {
        match self.policy[idx] {
            0 => None,
            k => Some(k as usize - 1),
        }
    }

    pub fn action_at(&self, s: &State) -> Option<usize> {
        self.action(self.mdp.index(s))
    }

    pub fn value(&self, s: &State) -> f64 {
        self.v[self.mdp.index(s)]
    }

    /// Expected cost of taking `a` at `s` and continuing optimally.
    pub fn mu(&self, s: &State, a: Option<usize>) -> f64 {
        mu_with(&self.mdp, &self.v, s, a)
    }

    /// Largest `|gamma + V(s) - min_a mu(s, a)|`.
    pub fn bellman_residual(&self) -> f64 {
        (0..self.mdp.num_states())
            .map(|i| {
                let s = self.mdp.state(i);
                (self.gamma + self.v[i] - min_mu(&self.mdp, &self.v, &s).0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Stationary distribution of the greedy policy.
    pub fn stationary(&self) -> Result<Stationary> {
        stationary(&self.mdp, |i| self.action(i))
    }
}

/// Stationary distribution over the states reachable from age 1.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stationary {
    pub states: Vec<usize>,
    pub mass: Vec<f64>,
    pub actions: Vec<Option<usize>>,
}

impl Stationary {
    /// Long-run fraction of slots spent on each server type.
    pub fn activation(&self, num_servers: usize) -> Vec<f64> {
        let mut out = vec![0.0; num_servers];
        for (a, w) in self.actions.iter().zip(&self.mass) {
            if let Some(m) = a {
                out[*m] += w;
            }
        }
        out
    }

    /// Long-run average of the stage cost.
    pub fn average_cost(&self, m: &MdpTable) -> f64 {
        self.states
            .iter()
            .zip(&self.actions)
            .zip(&self.mass)
            .map(|((&i, &a), w)| w * m.cost(&m.state(i), a))
            .sum()
    }

    /// Long-run average age.
    pub fn average_age(&self, m: &MdpTable) -> f64 {
        self.states.iter().zip(&self.mass).map(|(&i, w)| w * m.state(i).delta as f64).sum()
    }
}

/// Stationary distribution of a deterministic policy, by Gauss-Seidel on the
/// balance equations over the reachable set in ascending age order.
pub fn stationary(m: &MdpTable, policy: impl Fn(usize) -> Option<usize>) -> Result<Stationary> {
    let n = m.num_states();
    let mut pos = vec![u32::MAX; n];
    let mut order = vec![0usize];
    pos[0] = 0;
    let mut head = 0;
    while head < order.len() {
        let i = order[head];
        head += 1;
        for tr in m.transitions(&m.state(i), policy(i)) {
            if tr.prob > 0.0 && pos[tr.next] == u32::MAX {
                pos[tr.next] = 0;
                order.push(tr.next);
            }
        }
    }
    let key = |i: usize| {
        let s = m.state(i);
        (s.delta, !s.is_l1(), s.elapsed, s.copy)
    };
    order.sort_by_key(|&i| key(i));
    for (k, &i) in order.iter().enumerate() {
        pos[i] = k as u32;
    }
    let k = order.len();
    let actions: Vec<Option<usize>> = order.iter().map(|&i| policy(i)).collect();
    // predecessor lists in compressed form
    let mut count = vec![0usize; k + 1];
    let mut self_p = vec![0.0; k];
    let mut edges = Vec::with_capacity(2 * k);
    for (src, &i) in order.iter().enumerate() {
        for tr in m.transitions(&m.state(i), actions[src]) {
            if tr.prob > 0.0 {
                let dst = pos[tr.next] as usize;
                if dst == src {
                    self_p[src] += tr.prob;
                } else {
                    edges.push((dst, src, tr.prob));
                    count[dst + 1] += 1;
                }
            }
        }
    }
    for i in 0..k {
        count[i + 1] += count[i];
    }
    let mut fill = count.clone();
    let mut pred = vec![(0usize, 0.0); edges.len()];
    for (dst, src, p) in edges {
        pred[fill[dst]] = (src, p);
        fill[dst] += 1;
    }
    let mut x = vec![1.0 / k as f64; k];
    for _ in 0..1_000_000 {
        let mut change = 0.0;
        for s in 0..k {
            let inflow: f64 = pred[count[s]..count[s + 1]].iter().map(|&(j, p)| x[j] * p).sum();
            let stay = self_p[s];
            let val = if stay < 1.0 { inflow / (1.0 - stay) } else { x[s] };
            change += (val - x[s]).abs();
            x[s] = val;
        }
        let total: f64 = x.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Solver("stationary mass vanished".into()));
        }
        for v in x.iter_mut() {
            *v /= total;
        }
        if change / total < 1e-13 {
            return Ok(Stationary { states: order, mass: x, actions });
        }
    }
    Err(Error::Solver("stationary distribution did not converge".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::build_truncated_mdp;
    use crate::model::{ServerSpec, UserSpec};

    fn solve(p: &[f64], nu: &[f64], tau: u32, a_max: u32, mode: Mode) -> ValueTable {
        let servers: Vec<ServerSpec> = p
            .iter()
            .enumerate()
            .map(|(i, &p)| ServerSpec { id: i, group: i, p, nu: 0.0 })
            .collect();
        let user = UserSpec { id: 0, group: 0, tau_min: tau };
        let mdp = build_truncated_mdp(&user, &servers, nu, a_max, mode).unwrap();
        relative_value_iteration(&mdp, SolveOptions::default()).unwrap()
    }

    #[test]
    fn residual_and_reference() {
        for mode in [Mode::Preemptive, Mode::NonPreemptive] {
            let vt = solve(&[0.3, 0.8], &[1.0, 4.0], 2, 60, mode);
            assert_eq!(vt.v[0], 0.0);
            assert!(vt.bellman_residual() < 1e-8, "{}", vt.bellman_residual());
        }
    }

    #[test]
    fn stationary_cost_matches_gamma() {
        for mode in [Mode::Preemptive, Mode::NonPreemptive] {
            let vt = solve(&[0.3, 0.8], &[1.0, 4.0], 2, 60, mode);
            let st = vt.stationary().unwrap();
            let c = st.average_cost(&vt.mdp);
            assert!((c - vt.gamma).abs() < 1e-8, "{c} vs {}", vt.gamma);
        }
    }

    #[test]
    fn free_server_is_always_used() {
        let vt = solve(&[0.8], &[0.0], 1, 200, Mode::NonPreemptive);
        let st = vt.stationary().unwrap();
        for (&i, a) in st.states.iter().zip(&st.actions) {
            let s = vt.mdp.state(i);
            if s.is_l1() && s.delta >= 3 {
                assert_eq!(*a, Some(0), "{:?}", vt.mdp.state(i));
            }
        }
    }

    #[test]
    fn uniform_shift_bounded() {
        let base = solve(&[0.4, 0.7], &[1.0, 2.0], 1, 80, Mode::Preemptive);
        let up = solve(&[0.4, 0.7], &[3.0, 4.0], 1, 80, Mode::Preemptive);
        assert!(up.gamma >= base.gamma - 1e-9);
        assert!(up.gamma <= base.gamma + 2.0 + 1e-9);
    }
}
