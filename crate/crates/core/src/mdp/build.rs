use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_p, Mode, ServerSpec, UserSpec, UserState};

/// Decoded truncated state.
///
/// `elapsed == 0` marks a layer-1 state. In non-preemptive mode `copy` is the
/// server holding the task; in preemptive mode it is always 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct State {
    pub delta: u32,
    pub elapsed: u32,
    pub copy: usize,
}

impl State {
    pub fn l1(delta: u32) -> Self {
        State { delta, elapsed: 0, copy: 0 }
    }

    pub fn l2(delta: u32, elapsed: u32, copy: usize) -> Self {
        State { delta, elapsed, copy }
    }

    pub fn is_l1(&self) -> bool {
        self.elapsed == 0
    }

    /// Generation age of an L2 state.
    pub fn gen_age(&self) -> u32 {
        self.delta - self.elapsed
    }
}

/// One successor of a state-action pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Succ {
    pub next: usize,
    pub prob: f64,
}

/// Truncated single-user MDP over server types.
///
/// Ages saturate at `a_max`; elapsed time saturates at `a_max - 1`. Actions
/// are `None` (wait, or drop in layer 2) and `Some(m)` for server type `m`.
/// Costs are taken from the `nu` field of `servers`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpTable {
    pub mode: Mode,
    pub tau_min: u32,
    pub a_max: u32,
    pub servers: Vec<ServerSpec>,
}

/// Builds the truncated MDP of one user.
pub fn build_truncated_mdp(
    user: &UserSpec,
    servers: &[ServerSpec],
    nu: &[f64],
    a_max: u32,
    mode: Mode,
) -> Result<MdpTable> {
    if a_max <= user.tau_min + 2 {
        return Err(Error::config(
            "a_max",
            format!("must exceed tau_min + 2 = {}, got {a_max}", user.tau_min + 2),
        ));
    }
    if servers.is_empty() {
        return Err(Error::config("servers", "at least one server is required"));
    }
    if nu.len() != servers.len() {
        return Err(Error::config("nu", format!("expected {} entries, got {}", servers.len(), nu.len())));
    }
    let mut s: Vec<ServerSpec> = servers.to_vec();
    for (i, (srv, &c)) in s.iter_mut().zip(nu).enumerate() {
        check_p(srv.p)?;
        if !(c >= 0.0) || !c.is_finite() {
            return Err(Error::config("nu", format!("entry {i} must be finite and >= 0, got {c}")));
        }
        srv.nu = c;
    }
    if s.windows(2).any(|w| w[0].p > w[1].p) {
        return Err(Error::config("servers", "must be sorted ascending by p"));
    }
    Ok(MdpTable { mode, tau_min: user.tau_min, a_max, servers: s })
}

impl MdpTable {
    pub fn num_servers(&self) -> usize {
        self.servers.len()
    }

    pub fn nu(&self) -> Vec<f64> {
        self.servers.iter().map(|s| s.nu).collect()
    }

    /// Same structure with a different cost vector.
    pub fn with_nu(&self, nu: &[f64]) -> MdpTable {
        let mut out = self.clone();
        for (s, &c) in out.servers.iter_mut().zip(nu) {
            s.nu = c;
        }
        out
    }

    /// Number of L2 states per copy.
    #[inline]
    pub(crate) fn l2_len(&self) -> usize {
        let a = self.a_max as usize;
        a * (a - 1) / 2
    }

    pub(crate) fn copies(&self) -> usize {
        match self.mode {
            Mode::Preemptive => 1,
            Mode::NonPreemptive => self.servers.len(),
        }
    }

    pub fn num_states(&self) -> usize {
        self.a_max as usize + self.copies() * self.l2_len()
    }

    #[inline]
    pub fn l1_index(&self, delta: u32) -> usize {
        delta.min(self.a_max) as usize - 1
    }

    #[inline]
    pub(crate) fn l2_base(&self, copy: usize) -> usize {
        self.a_max as usize + copy * self.l2_len()
    }

    #[inline]
    pub fn l2_index(&self, delta: u32, elapsed: u32, copy: usize) -> usize {
        let d = delta as usize;
        self.l2_base(copy) + (d - 2) * (d - 1) / 2 + elapsed as usize - 1
    }

    pub fn index(&self, s: &State) -> usize {
        if s.is_l1() {
            self.l1_index(s.delta)
        } else {
            self.l2_index(s.delta, s.elapsed, s.copy)
        }
    }

    pub fn state(&self, idx: usize) -> State {
        let a = self.a_max as usize;
        if idx < a {
            return State::l1(idx as u32 + 1);
        }
        let rest = idx - a;
        let copy = rest / self.l2_len();
        let k = rest % self.l2_len();
        let mut d = 2usize;
        while (d - 1) * d / 2 <= k {
            d += 1;
        }
        let e = k - (d - 2) * (d - 1) / 2 + 1;
        State::l2(d as u32, e as u32, copy)
    }

    /// Truncated index of a simulator state, saturating age and elapsed time.
    pub fn index_of(&self, s: &UserState) -> usize {
        match *s {
            UserState::Idle { delta } => self.l1_index(delta),
            UserState::Computing { delta, gen_age, server } => {
                let d = delta.min(self.a_max);
                let e = (delta - gen_age).min(d - 1);
                let copy = match self.mode {
                    Mode::Preemptive => 0,
                    Mode::NonPreemptive => server,
                };
                self.l2_index(d, e, copy)
            }
        }
    }

    /// Legal actions at a state, wait first then servers ascending by p.
    pub fn actions(&self, s: &State) -> Vec<Option<usize>> {
        let mut out = vec![None];
        if s.is_l1() || self.mode == Mode::Preemptive {
            out.extend((0..self.servers.len()).map(Some));
        } else {
            out.push(Some(s.copy));
        }
        out
    }

    pub fn is_legal(&self, s: &State, a: Option<usize>) -> bool {
        match a {
            None => true,
            Some(m) if m >= self.servers.len() => false,
            Some(m) => s.is_l1() || self.mode == Mode::Preemptive || m == s.copy,
        }
    }

    #[inline]
    pub(crate) fn next_age(&self, delta: u32) -> u32 {
        (delta + 1).min(self.a_max)
    }

    /// Index of the state reached without completion from L2 `(delta, e)`.
    #[inline]
    pub(crate) fn stay_index(&self, delta: u32, e: u32, copy: usize) -> usize {
        let d = self.next_age(delta);
        let e2 = (e + 1).min(d - 1);
        self.l2_index(d, e2, copy)
    }

    /// Completion probability at elapsed time `e` on server `m`.
    #[inline]
    pub(crate) fn completion_prob(&self, e: u32, m: usize) -> f64 {
        if e > self.tau_min {
            self.servers[m].p
        } else {
            0.0
        }
    }

    pub fn cost(&self, s: &State, a: Option<usize>) -> f64 {
        s.delta as f64 + a.map_or(0.0, |m| self.servers[m].nu)
    }

    /// Successor distribution; the second entry has zero probability when unused.
    pub fn transitions(&self, s: &State, a: Option<usize>) -> [Succ; 2] {
        let none = Succ { next: 0, prob: 0.0 };
        if s.is_l1() {
            let next = match a {
                None => self.l1_index(self.next_age(s.delta)),
                Some(m) => {
                    let copy = if self.mode == Mode::Preemptive { 0 } else { m };
                    self.l2_index(self.next_age(s.delta), 1, copy)
                }
            };
            return [Succ { next, prob: 1.0 }, none];
        }
        match a {
            None => [Succ { next: self.l1_index(self.next_age(s.delta)), prob: 1.0 }, none],
            Some(m) => {
                let q = self.completion_prob(s.elapsed, m);
                let stay = self.stay_index(s.delta, s.elapsed, s.copy_for(self.mode, m));
                if q > 0.0 {
                    [
                        Succ { next: self.l1_index(s.elapsed + 1), prob: q },
                        Succ { next: stay, prob: 1.0 - q },
                    ]
                } else {
                    [Succ { next: stay, prob: 1.0 }, none]
                }
            }
        }
    }

    /// Checks that rows sum to one and that the layer connections of a
    /// two-layer MDP exist.
    pub fn check_kernel(&self) -> Result<()> {
        let mut l1_to_l2 = false;
        let mut l2_to_l2 = false;
        let mut l2_to_l1 = false;
        let a = self.a_max as usize;
        for idx in 0..self.num_states() {
            let s = self.state(idx);
            for act in self.actions(&s) {
                let tr = self.transitions(&s, act);
                let sum: f64 = tr.iter().map(|t| t.prob).sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::Solver(format!("row {idx} action {act:?} sums to {sum}")));
                }
                for t in tr.iter().filter(|t| t.prob > 0.0) {
                    let to_l1 = t.next < a;
                    match (s.is_l1(), to_l1) {
                        (true, false) => l1_to_l2 = true,
                        (false, false) => l2_to_l2 = true,
                        (false, true) if act.is_some() => l2_to_l1 = true,
                        _ => {}
                    }
                }
            }
        }
        if l1_to_l2 && l2_to_l2 && l2_to_l1 {
            Ok(())
        } else {
            Err(Error::Solver("layers are not connected".into()))
        }
    }
}

impl State {
    fn copy_for(&self, mode: Mode, m: usize) -> usize {
        match mode {
            Mode::Preemptive => 0,
            Mode::NonPreemptive => {
                debug_assert_eq!(m, self.copy);
                self.copy
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn srv(p: &[f64]) -> Vec<ServerSpec> {
        p.iter()
            .enumerate()
            .map(|(i, &p)| ServerSpec { id: i, group: i, p, nu: 0.0 })
            .collect()
    }

    #[test]
    fn index_roundtrip() {
        let user = UserSpec { id: 0, group: 0, tau_min: 1 };
        for mode in [Mode::Preemptive, Mode::NonPreemptive] {
            let mdp = build_truncated_mdp(&user, &srv(&[0.3, 0.7]), &[0.0, 1.0], 12, mode).unwrap();
            for idx in 0..mdp.num_states() {
                assert_eq!(mdp.index(&mdp.state(idx)), idx);
            }
        }
    }

    #[test]
    fn strict_minimum_time() {
        let user = UserSpec { id: 0, group: 0, tau_min: 1 };
        let mdp = build_truncated_mdp(&user, &srv(&[1.0]), &[0.0], 5, Mode::Preemptive).unwrap();
        let tr = mdp.transitions(&State::l2(2, 1, 0), Some(0));
        assert_eq!(tr[0], Succ { next: mdp.l2_index(3, 2, 0), prob: 1.0 });
        let tr = mdp.transitions(&State::l2(3, 2, 0), Some(0));
        assert_eq!(tr[0], Succ { next: mdp.l1_index(3), prob: 1.0 });
        let tr = mdp.transitions(&State::l2(4, 1, 0), None);
        assert_eq!(tr[0].next, mdp.l1_index(5));
    }

    #[test]
    fn kernel_rows_and_layers() {
        let user = UserSpec { id: 0, group: 0, tau_min: 2 };
        for mode in [Mode::Preemptive, Mode::NonPreemptive] {
            let mdp = build_truncated_mdp(&user, &srv(&[0.2, 0.5, 0.9]), &[0.0, 1.0, 2.0], 20, mode).unwrap();
            mdp.check_kernel().unwrap();
        }
    }

    #[test]
    fn rejects_small_truncation() {
        let user = UserSpec { id: 0, group: 0, tau_min: 4 };
        assert!(build_truncated_mdp(&user, &srv(&[0.5]), &[0.0], 6, Mode::Preemptive).is_err());
    }
}
