//! Users, servers, per-user state and the slot transition kernels.
//!
//! Servers are indexed from 0 in ascending order of completion probability.
//! The wait action is `None`, which plays the role of a virtual server with
//! zero cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Coin;

/// One edge server.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerSpec {
    /// Position in the ascending-p order.
    pub id: usize,
    /// Index of the server type this server was expanded from.
    pub group: usize,
    /// Per-slot completion probability once the minimum computing time has passed.
    pub p: f64,
    /// Activation cost per slot.
    pub nu: f64,
}

impl ServerSpec {
    pub fn validate(&self) -> Result<()> {
        check_p(self.p)?;
        if !(self.nu >= 0.0) || !self.nu.is_finite() {
            return Err(Error::config("nu", format!("must be finite and >= 0, got {}", self.nu)));
        }
        Ok(())
    }
}

pub(crate) fn check_p(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::config("p", format!("must lie in (0, 1], got {p}")))
    }
}

/// Sorts servers ascending by `p` (ties by `nu`) and renumbers their ids.
pub fn sort_servers(servers: &mut [ServerSpec]) {
    servers.sort_by(|a, b| a.p.total_cmp(&b.p).then(a.nu.total_cmp(&b.nu)));
    for (i, s) in servers.iter_mut().enumerate() {
        s.id = i;
    }
}

/// One user (information source).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSpec {
    pub id: usize,
    /// Index of the user group (user type).
    pub group: usize,
    /// Minimum computing time in slots.
    pub tau_min: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layer {
    L1,
    L2,
}

/// State of a single user at the start of a slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UserState {
    /// No task in flight.
    Idle { delta: u32 },
    /// A task generated at age `gen_age` is being computed on `server`.
    Computing { delta: u32, gen_age: u32, server: usize },
}

impl UserState {
    pub const START: UserState = UserState::Idle { delta: 1 };

    pub fn delta(&self) -> u32 {
        match *self {
            UserState::Idle { delta } | UserState::Computing { delta, .. } => delta,
        }
    }

    pub fn layer(&self) -> Layer {
        match self {
            UserState::Idle { .. } => Layer::L1,
            UserState::Computing { .. } => Layer::L2,
        }
    }

    pub fn gen_age(&self) -> Option<u32> {
        match *self {
            UserState::Computing { gen_age, .. } => Some(gen_age),
            UserState::Idle { .. } => None,
        }
    }

    pub fn server(&self) -> Option<usize> {
        match *self {
            UserState::Computing { server, .. } => Some(server),
            UserState::Idle { .. } => None,
        }
    }

    /// Slots since the task was offloaded.
    pub fn elapsed(&self) -> Option<u32> {
        match *self {
            UserState::Computing { delta, gen_age, .. } => Some(delta - gen_age),
            UserState::Idle { .. } => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        match *self {
            UserState::Idle { delta } => delta >= 1,
            UserState::Computing { delta, gen_age, .. } => gen_age >= 1 && gen_age < delta,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Preemptive,
    #[serde(alias = "non-preemptive", alias = "non_preemptive")]
    NonPreemptive,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "preemptive" => Ok(Mode::Preemptive),
            "nonpreemptive" => Ok(Mode::NonPreemptive),
            _ => Err(Error::config("mode", format!("unknown mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Preemptive => "preemptive",
            Mode::NonPreemptive => "nonpreemptive",
        })
    }
}

/// A group of identical users.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserGroup {
    pub tau_min: u32,
    pub count: usize,
}

/// A group of identical servers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerGroup {
    pub p: f64,
    pub count: usize,
    /// Initial activation cost.
    #[serde(default)]
    pub nu: f64,
}

/// Everything needed to run one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub user_groups: Vec<UserGroup>,
    /// Server types, kept sorted ascending by `p`.
    pub server_groups: Vec<ServerGroup>,
    pub mode: Mode,
    pub horizon: u64,
    pub seed: u64,
    pub beta: f64,
    pub a_max: u32,
    pub tail_window: u64,
}

impl SystemConfig {
    pub const DEFAULT_BETA: f64 = 0.05;
    pub const DEFAULT_TAIL: u64 = 500;

    /// Builds a config with default horizon, seed, smoothing and truncation.
    pub fn new(user_groups: Vec<UserGroup>, server_groups: Vec<ServerGroup>, mode: Mode) -> Self {
        let max_tau = user_groups.iter().map(|g| g.tau_min).max().unwrap_or(0);
        let mut cfg = SystemConfig {
            user_groups,
            server_groups,
            mode,
            horizon: 10_000,
            seed: 0,
            beta: Self::DEFAULT_BETA,
            a_max: (max_tau + 11).max(300),
            tail_window: Self::DEFAULT_TAIL,
        };
        cfg.sort_server_groups();
        cfg
    }

    pub fn sort_server_groups(&mut self) {
        self.server_groups
            .sort_by(|a, b| a.p.total_cmp(&b.p).then(a.nu.total_cmp(&b.nu)));
    }

    pub fn validate(&self) -> Result<()> {
        if self.user_groups.is_empty() {
            return Err(Error::config("user_groups", "at least one group is required"));
        }
        if self.server_groups.is_empty() {
            return Err(Error::config("server_groups", "at least one group is required"));
        }
        for g in &self.server_groups {
            check_p(g.p).map_err(|_| Error::config("server_groups.p", format!("must lie in (0, 1], got {}", g.p)))?;
            if !(g.nu >= 0.0) || !g.nu.is_finite() {
                return Err(Error::config("server_groups.nu", format!("must be >= 0, got {}", g.nu)));
            }
        }
        if self
            .server_groups
            .windows(2)
            .any(|w| w[0].p > w[1].p || (w[0].p == w[1].p && w[0].nu > w[1].nu))
        {
            return Err(Error::config("server_groups", "must be sorted ascending by p"));
        }
        if self.horizon < 1 {
            return Err(Error::config("horizon", "must be >= 1"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::config("beta", format!("must lie in (0, 1), got {}", self.beta)));
        }
        let max_tau = self.user_groups.iter().map(|g| g.tau_min).max().unwrap_or(0);
        if self.a_max <= max_tau + 10 {
            return Err(Error::config(
                "a_max",
                format!("must exceed max tau_min + 10 = {}, got {}", max_tau + 10, self.a_max),
            ));
        }
        Ok(())
    }

    pub fn num_users(&self) -> usize {
        self.user_groups.iter().map(|g| g.count).sum()
    }

    pub fn num_servers(&self) -> usize {
        self.server_groups.iter().map(|g| g.count).sum()
    }

    /// Expands the user groups, numbering users group by group.
    pub fn users(&self) -> Vec<UserSpec> {
        let mut out = Vec::with_capacity(self.num_users());
        for (group, g) in self.user_groups.iter().enumerate() {
            for _ in 0..g.count {
                out.push(UserSpec { id: out.len(), group, tau_min: g.tau_min });
            }
        }
        out
    }

    /// Expands the server groups in ascending-p order.
    pub fn servers(&self) -> Vec<ServerSpec> {
        let mut out = Vec::with_capacity(self.num_servers());
        for (group, g) in self.server_groups.iter().enumerate() {
            for _ in 0..g.count {
                out.push(ServerSpec { id: out.len(), group, p: g.p, nu: g.nu });
            }
        }
        out
    }

    /// One representative server per type, with the given costs.
    pub fn server_types(&self, nu: &[f64]) -> Vec<ServerSpec> {
        self.server_groups
            .iter()
            .enumerate()
            .map(|(i, g)| ServerSpec { id: i, group: i, p: g.p, nu: nu.get(i).copied().unwrap_or(g.nu) })
            .collect()
    }

    pub fn initial_nu(&self) -> Vec<f64> {
        self.server_groups.iter().map(|g| g.nu).collect()
    }
}

/// Per-slot decision: user index to server index.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub slots: Vec<Option<usize>>,
}

impl Assignment {
    pub fn idle(num_users: usize) -> Self {
        Assignment { slots: vec![None; num_users] }
    }

    pub fn get(&self, user: usize) -> Option<usize> {
        self.slots[user]
    }

    pub fn set(&mut self, user: usize, server: Option<usize>) {
        self.slots[user] = server;
    }

    pub fn num_active(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    /// Checks that every server is used at most once and exists.
    pub fn validate(&self, num_servers: usize) -> Result<()> {
        let mut used = vec![false; num_servers];
        for (n, s) in self.slots.iter().enumerate() {
            if let Some(m) = *s {
                if m >= num_servers {
                    return Err(Error::Scheduling(format!("user {n} assigned to unknown server {m}")));
                }
                if used[m] {
                    return Err(Error::Scheduling(format!("server {m} assigned twice")));
                }
                used[m] = true;
            }
        }
        Ok(())
    }
}

/// Non-preemptive action of one user.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NpAction {
    Idle,
    Offload(usize),
    Continue,
    Drop,
}

/// Result of a non-preemptive step. Busy flags change at the next slot boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NpStep {
    pub state: UserState,
    pub acquire: Option<usize>,
    pub release: Option<usize>,
    pub completed: bool,
}

/// Draws the completion event for a task that has run `elapsed` slots.
pub fn sample_completion<C: Coin + ?Sized>(p: f64, elapsed: u32, tau_min: u32, coin: &mut C) -> Result<bool> {
    check_p(p)?;
    if elapsed <= tau_min {
        return Ok(false);
    }
    Ok(coin.flip(p))
}

fn server<'a>(servers: &'a [ServerSpec], m: usize) -> Result<&'a ServerSpec> {
    servers
        .get(m)
        .ok_or_else(|| Error::Scheduling(format!("unknown server {m}")))
}

fn serve<C: Coin + ?Sized>(
    delta: u32,
    gen_age: u32,
    m: usize,
    p: f64,
    tau_min: u32,
    coin: &mut C,
) -> Result<(UserState, bool)> {
    let e = delta - gen_age;
    if sample_completion(p, e, tau_min, coin)? {
        Ok((UserState::Idle { delta: e + 1 }, true))
    } else {
        Ok((UserState::Computing { delta: delta + 1, gen_age, server: m }, false))
    }
}

/// One slot of preemptive dynamics. `action` is the server used this slot.
pub fn step_preemptive<C: Coin + ?Sized>(
    state: UserState,
    action: Option<usize>,
    servers: &[ServerSpec],
    tau_min: u32,
    coin: &mut C,
) -> Result<UserState> {
    Ok(match (state, action) {
        (UserState::Idle { delta }, None) => UserState::Idle { delta: delta + 1 },
        (UserState::Idle { delta }, Some(m)) => {
            server(servers, m)?;
            UserState::Computing { delta: delta + 1, gen_age: delta, server: m }
        }
        (UserState::Computing { delta, .. }, None) => UserState::Idle { delta: delta + 1 },
        (UserState::Computing { delta, gen_age, .. }, Some(m)) => {
            let p = server(servers, m)?.p;
            serve(delta, gen_age, m, p, tau_min, coin)?.0
        }
    })
}

/// One slot of non-preemptive dynamics. `busy` is the snapshot at the start of the slot.
pub fn step_non_preemptive<C: Coin + ?Sized>(
    state: UserState,
    action: NpAction,
    busy: &[bool],
    servers: &[ServerSpec],
    tau_min: u32,
    coin: &mut C,
) -> Result<NpStep> {
    let plain = |state| NpStep { state, acquire: None, release: None, completed: false };
    match (state, action) {
        (UserState::Idle { delta }, NpAction::Idle) => Ok(plain(UserState::Idle { delta: delta + 1 })),
        (UserState::Idle { delta }, NpAction::Offload(m)) => {
            server(servers, m)?;
            if busy.get(m).copied().unwrap_or(false) {
                return Err(Error::Scheduling(format!("offload to busy server {m}")));
            }
            Ok(NpStep {
                state: UserState::Computing { delta: delta + 1, gen_age: delta, server: m },
                acquire: Some(m),
                release: None,
                completed: false,
            })
        }
        (UserState::Computing { delta, gen_age, server: m }, NpAction::Continue) => {
            let p = server(servers, m)?.p;
            let (next, done) = serve(delta, gen_age, m, p, tau_min, coin)?;
            Ok(NpStep { state: next, acquire: None, release: done.then_some(m), completed: done })
        }
        (UserState::Computing { delta, server: m, .. }, NpAction::Drop) => Ok(NpStep {
            state: UserState::Idle { delta: delta + 1 },
            acquire: None,
            release: Some(m),
            completed: false,
        }),
        (s, a) => Err(Error::Scheduling(format!("action {a:?} is not allowed in state {s:?}"))),
    }
}

/// Stage cost: current age plus the activation cost of the server used.
pub fn stage_cost(state: &UserState, action: Option<usize>, servers: &[ServerSpec]) -> f64 {
    state.delta() as f64 + action.map_or(0.0, |m| servers[m].nu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Scripted;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_servers() -> Vec<ServerSpec> {
        vec![
            ServerSpec { id: 0, group: 0, p: 0.5, nu: 3.0 },
            ServerSpec { id: 1, group: 1, p: 0.8, nu: 5.0 },
        ]
    }

    #[test]
    fn completion_respects_minimum_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(!sample_completion(0.8, 1, 2, &mut rng).unwrap());
        assert!(sample_completion(1.0, 3, 1, &mut rng).unwrap());
        assert!(sample_completion(0.0, 3, 1, &mut rng).is_err());
        assert!(sample_completion(1.5, 3, 1, &mut rng).is_err());
    }

    #[test]
    fn preemptive_steps() {
        let s = two_servers();
        let mut never = Scripted::never();
        let st = UserState::Computing { delta: 15, gen_age: 8, server: 1 };
        let next = step_preemptive(st, Some(0), &s, 1, &mut never).unwrap();
        assert_eq!(next, UserState::Computing { delta: 16, gen_age: 8, server: 0 });

        let next = step_preemptive(UserState::Idle { delta: 5 }, None, &s, 1, &mut never).unwrap();
        assert_eq!(next, UserState::Idle { delta: 6 });

        let mut always = Scripted::always();
        let st = UserState::Computing { delta: 10, gen_age: 3, server: 0 };
        let next = step_preemptive(st, Some(0), &s, 2, &mut always).unwrap();
        assert_eq!(next, UserState::Idle { delta: 8 });

        assert!(step_preemptive(UserState::Idle { delta: 1 }, Some(7), &s, 1, &mut never).is_err());
    }

    #[test]
    fn non_preemptive_steps() {
        let s = two_servers();
        let mut never = Scripted::never();
        let st = UserState::Computing { delta: 9, gen_age: 8, server: 0 };
        let r = step_non_preemptive(st, NpAction::Continue, &[true, false], &s, 1, &mut never).unwrap();
        assert_eq!(r.state, UserState::Computing { delta: 10, gen_age: 8, server: 0 });
        assert_eq!(r.release, None);

        let st = UserState::Computing { delta: 7, gen_age: 5, server: 1 };
        let r = step_non_preemptive(st, NpAction::Drop, &[false, true], &s, 1, &mut never).unwrap();
        assert_eq!(r.state, UserState::Idle { delta: 8 });
        assert_eq!(r.release, Some(1));

        let r = step_non_preemptive(UserState::Idle { delta: 4 }, NpAction::Offload(1), &[true, true], &s, 1, &mut never);
        assert!(matches!(r, Err(Error::Scheduling(_))));
        let r = step_non_preemptive(UserState::Idle { delta: 4 }, NpAction::Continue, &[false, false], &s, 1, &mut never);
        assert!(r.is_err());

        let mut always = Scripted::always();
        let st = UserState::Computing { delta: 10, gen_age: 8, server: 0 };
        let r = step_non_preemptive(st, NpAction::Continue, &[true, false], &s, 1, &mut always).unwrap();
        assert_eq!(r.state, UserState::Idle { delta: 3 });
        assert!(r.completed);
        assert_eq!(r.release, Some(0));
    }

    #[test]
    fn costs() {
        let s = two_servers();
        let st = UserState::Idle { delta: 8 };
        assert_eq!(stage_cost(&st, Some(0), &s), 11.0);
        assert_eq!(stage_cost(&st, None, &s), 8.0);
    }

    #[test]
    fn assignment_validation() {
        let mut a = Assignment::idle(3);
        a.set(0, Some(1));
        a.set(2, Some(1));
        assert!(a.validate(2).is_err());
        a.set(2, Some(0));
        assert!(a.validate(2).is_ok());
        assert!(a.validate(1).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = SystemConfig::new(
            vec![UserGroup { tau_min: 2, count: 3 }],
            vec![ServerGroup { p: 0.8, count: 1, nu: 0.0 }, ServerGroup { p: 0.3, count: 2, nu: 0.0 }],
            Mode::Preemptive,
        );
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.server_groups[0].p, 0.3);
        assert_eq!(cfg.servers().len(), 3);
        cfg.beta = 1.5;
        assert!(matches!(cfg.validate(), Err(Error::Config { ref field, .. }) if field == "beta"));
        cfg.beta = 0.05;
        cfg.a_max = 12;
        assert!(cfg.validate().is_err());
    }
}
