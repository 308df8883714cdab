//! Slot-driven simulation of every policy in either mode.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{IndexSource, IndexTable};
use crate::mdp::SolveOptions;
use crate::model::{
    step_non_preemptive, step_preemptive, Mode, NpAction, ServerSpec, SystemConfig, UserSpec, UserState,
};
use crate::policy::{
    check_feasible, decide_mamp, decide_marp, decide_nested, decide_relaxed, decide_rrp, DualState, NestedRule,
    PolicyKind, SlotView,
};
use crate::rng::{policy_rng, CompletionSource, SlotCoin, UserStreams};

/// When the nested policy re-solves its subproblems.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefreshRule {
    /// Relative move of any cost that triggers a re-solve.
    pub threshold: f64,
    /// Costs below this magnitude are compared in absolute terms.
    pub floor: f64,
    /// Minimum number of slots between re-solves.
    pub min_interval: u64,
}

impl Default for RefreshRule {
    fn default() -> Self {
        RefreshRule { threshold: 0.01, floor: 1.0, min_interval: 500 }
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub policy: PolicyKind,
    pub horizon: u64,
    pub seed: u64,
    pub index_source: IndexSource,
    pub nested_rule: NestedRule,
    pub refresh: RefreshRule,
    pub solve: SolveOptions,
    /// Costs at which the relaxed policies of `rrp` and `relaxed-lb` are solved.
    pub relaxed_nu: Option<Vec<f64>>,
    /// Starting costs of the nested policy; the config's costs by default.
    pub initial_nu: Option<Vec<f64>>,
    pub initial_states: Option<Vec<UserState>>,
    /// Keep the costs fixed instead of running the dual update.
    pub freeze_nu: bool,
    /// Closed-form indices with this average cost for every user type.
    pub pinned_gamma: Option<f64>,
    /// Capacity of the event log; no log when `None`.
    pub events: Option<usize>,
    pub record_states: bool,
    pub tail_window: Option<u64>,
}

impl RunOptions {
    pub fn new(policy: PolicyKind, horizon: u64, seed: u64) -> Self {
        RunOptions {
            policy,
            horizon,
            seed,
            index_source: IndexSource::ClosedForm,
            nested_rule: NestedRule::Matching,
            refresh: RefreshRule::default(),
            solve: SolveOptions::default(),
            relaxed_nu: None,
            initial_nu: None,
            initial_states: None,
            freeze_nu: false,
            pinned_gamma: None,
            events: None,
            record_states: false,
            tail_window: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Offload { server: usize, gen_age: u32 },
    Migrate { from: usize, to: usize },
    Complete { server: usize, elapsed: u32, reset_to: u32 },
    Drop { server: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub t: u64,
    pub user: usize,
    /// Age at the start of the slot.
    pub delta: u32,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Bounded event log. When full, every other stored event is discarded and
/// from then on only every `stride`-th event is kept.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EventLog {
    pub capacity: usize,
    pub stride: u64,
    pub seen: u64,
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn new(capacity: usize) -> Self {
        EventLog { capacity: capacity.max(2), stride: 1, seen: 0, events: Vec::new() }
    }

    pub fn push(&mut self, e: Event) {
        self.seen += 1;
        if (self.seen - 1) % self.stride != 0 {
            return;
        }
        if self.events.len() == self.capacity {
            let mut keep = false;
            self.events.retain(|_| {
                keep = !keep;
                keep
            });
            self.stride *= 2;
            if (self.seen - 1) % self.stride != 0 {
                return;
            }
        }
        self.events.push(e);
    }

    /// Whether every event was kept.
    pub fn is_complete(&self) -> bool {
        self.stride == 1
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub policy: PolicyKind,
    pub seed: u64,
    pub horizon: u64,
    pub num_users: usize,
    pub tail_window: u64,
    /// Mean age over users at the start of each slot.
    pub slot_aoi: Vec<f64>,
    /// Running average of `slot_aoi`.
    pub avg_aoi_trace: Vec<f64>,
    /// Moving average of `slot_aoi` over the tail window.
    pub window_trace: Vec<f64>,
    /// Mean of the last `tail_window` slots; NaN for an empty run.
    pub final_avg_aoi: f64,
    pub per_user_mean: Vec<f64>,
    /// Costs in force at each slot (nested policy only).
    pub nu_trace: Vec<Vec<f64>>,
    pub offloads: u64,
    pub completions: u64,
    pub drops: u64,
    pub migrations: u64,
    pub refreshes: usize,
    pub wallclock: f64,
    pub events: Option<EventLog>,
    pub states: Vec<Vec<UserState>>,
}

impl Metrics {
    fn empty(policy: PolicyKind, seed: u64, horizon: u64, num_users: usize, tail: u64) -> Self {
        Metrics {
            policy,
            seed,
            horizon,
            num_users,
            tail_window: tail,
            slot_aoi: Vec::with_capacity(horizon as usize),
            avg_aoi_trace: Vec::with_capacity(horizon as usize),
            window_trace: Vec::with_capacity(horizon as usize),
            final_avg_aoi: f64::NAN,
            per_user_mean: vec![0.0; num_users],
            nu_trace: Vec::new(),
            offloads: 0,
            completions: 0,
            drops: 0,
            migrations: 0,
            refreshes: 0,
            wallclock: 0.0,
            events: None,
            states: Vec::new(),
        }
    }

    /// Mean of `slot_aoi` over the whole run.
    pub fn running_avg_aoi(&self) -> f64 {
        self.avg_aoi_trace.last().copied().unwrap_or(f64::NAN)
    }

    fn nu_tail(&self, frac: f64, stat: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let n = self.nu_trace.len();
        if n == 0 {
            return Vec::new();
        }
        let start = n - ((n as f64 * frac).ceil() as usize).clamp(1, n);
        (0..self.nu_trace[0].len())
            .map(|m| {
                let tail: Vec<f64> = self.nu_trace[start..].iter().map(|v| v[m]).collect();
                let mean = tail.iter().sum::<f64>() / tail.len() as f64;
                let scale = if mean.abs() < 1e-12 { 1.0 } else { mean.abs() };
                stat(&tail) / scale
            })
            .collect()
    }

    /// Relative drift of each cost over the final `frac` of slots: the
    /// difference between the means of the window's two halves, over the
    /// window mean.
    pub fn nu_tail_change(&self, frac: f64) -> Vec<f64> {
        self.nu_tail(frac, |x| {
            let (a, b) = x.split_at(x.len() / 2);
            if a.is_empty() {
                return 0.0;
            }
            let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            (avg(b) - avg(a)).abs()
        })
    }

    /// Relative range `(max - min) / mean` of each cost over the final `frac` of slots.
    pub fn nu_tail_spread(&self, frac: f64) -> Vec<f64> {
        self.nu_tail(frac, |x| {
            let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            hi - lo
        })
    }

    /// Mean cost vector over the final `frac` of slots.
    pub fn nu_tail_mean(&self, frac: f64) -> Vec<f64> {
        let n = self.nu_trace.len();
        if n == 0 {
            return Vec::new();
        }
        let start = n - ((n as f64 * frac).ceil() as usize).clamp(1, n);
        let k = self.nu_trace[0].len();
        (0..k)
            .map(|m| self.nu_trace[start..].iter().map(|v| v[m]).sum::<f64>() / (n - start) as f64)
            .collect()
    }
}

/// Replicates every user and server group `r` times.
pub fn scale_config(cfg: &SystemConfig, r: usize) -> Result<SystemConfig> {
    if r == 0 {
        return Err(Error::config("r", "must be >= 1"));
    }
    let mut out = cfg.clone();
    for g in &mut out.user_groups {
        g.count *= r;
    }
    for g in &mut out.server_groups {
        g.count *= r;
    }
    Ok(out)
}

fn policy_needs_tables(policy: PolicyKind) -> bool {
    matches!(policy, PolicyKind::Nested | PolicyKind::Rrp | PolicyKind::RelaxedLb)
}

/// Runs one simulation with per-user random streams derived from the seed.
pub fn run(cfg: &SystemConfig, opts: &RunOptions) -> Result<Metrics> {
    let mut streams = UserStreams::new(opts.seed, cfg.num_users());
    run_with(cfg, opts, &mut streams)
}

/// Runs one simulation drawing completions from `source`.
pub fn run_with<S: CompletionSource + ?Sized>(cfg: &SystemConfig, opts: &RunOptions, source: &mut S) -> Result<Metrics> {
    cfg.validate()?;
    let start = Instant::now();
    let users: Vec<UserSpec> = cfg.users();
    let n_users = users.len();
    let k = cfg.server_groups.len();
    let relaxed = opts.policy == PolicyKind::RelaxedLb;
    let servers: Vec<ServerSpec> = if relaxed { cfg.server_types(&cfg.initial_nu()) } else { cfg.servers() };
    let tail = opts.tail_window.unwrap_or(cfg.tail_window);
    let mut metrics = Metrics::empty(opts.policy, opts.seed, opts.horizon, n_users, tail);
    metrics.events = opts.events.map(EventLog::new);

    let mut states = match &opts.initial_states {
        Some(s) if s.len() != n_users => {
            return Err(Error::config("initial_states", format!("expected {n_users} states, got {}", s.len())))
        }
        Some(s) => s.clone(),
        None => vec![UserState::START; n_users],
    };
    let mut holder: Vec<Option<usize>> = vec![None; servers.len()];
    for (n, s) in states.iter().enumerate() {
        if !s.is_valid() {
            return Err(Error::config("initial_states", format!("state {s:?} of user {n} is invalid")));
        }
        if let (Mode::NonPreemptive, Some(m), false) = (cfg.mode, s.server(), relaxed) {
            if m >= servers.len() || holder[m].replace(n).is_some() {
                return Err(Error::config("initial_states", format!("server {m} held twice or unknown")));
            }
        }
    }
    if opts.horizon == 0 {
        metrics.wallclock = start.elapsed().as_secs_f64();
        return Ok(metrics);
    }

    let nu0 = opts.initial_nu.clone().unwrap_or_else(|| cfg.initial_nu());
    if nu0.len() != k {
        return Err(Error::config("nu", format!("expected {k} entries, got {}", nu0.len())));
    }
    let mut dual = DualState::new(nu0.clone(), cfg.beta)?;
    let mut table = match (opts.policy, opts.pinned_gamma) {
        (PolicyKind::Nested, Some(g)) => Some(IndexTable::pinned(&nu0, vec![g; cfg.user_groups.len()])),
        (PolicyKind::Nested, None) => Some(IndexTable::build(cfg, &nu0, opts.index_source, opts.solve, None)?),
        _ => None,
    };
    let relaxed_tables = if policy_needs_tables(opts.policy) && opts.policy != PolicyKind::Nested {
        let nu = opts.relaxed_nu.clone().unwrap_or_else(|| cfg.initial_nu());
        IndexTable::build(cfg, &nu, IndexSource::CriticalCost, opts.solve, None)?.tables
    } else {
        Vec::new()
    };
    let mut rng = policy_rng(opts.seed);
    let mut last_refresh = 0u64;
    let mut sum = 0.0;
    let mut window_sum = 0.0;
    let mut busy = vec![false; servers.len()];

    for t in 1..=opts.horizon {
        let aoi = states.iter().map(|s| s.delta() as f64).sum::<f64>() / n_users as f64;
        for (acc, s) in metrics.per_user_mean.iter_mut().zip(&states) {
            *acc += s.delta() as f64;
        }
        sum += aoi;
        window_sum += aoi;
        metrics.slot_aoi.push(aoi);
        if metrics.slot_aoi.len() as u64 > tail {
            window_sum -= metrics.slot_aoi[metrics.slot_aoi.len() - 1 - tail as usize];
        }
        let filled = (metrics.slot_aoi.len() as u64).min(tail).max(1);
        metrics.avg_aoi_trace.push(sum / t as f64);
        metrics.window_trace.push(window_sum / filled as f64);
        if opts.record_states {
            metrics.states.push(states.clone());
        }

        let view = SlotView { states: &states, users: &users, servers: &servers, holder: &holder, mode: cfg.mode, num_types: k };
        let decision = match opts.policy {
            PolicyKind::Nested => {
                metrics.nu_trace.push(dual.nu.clone());
                decide_nested(&view, table.as_ref().expect("nested policy has a table"), opts.nested_rule)
            }
            PolicyKind::Mamp => decide_mamp(&view),
            PolicyKind::Marp => decide_marp(&view),
            PolicyKind::Rrp => decide_rrp(&view, &relaxed_tables, &mut rng),
            PolicyKind::RelaxedLb => decide_relaxed(&view, &relaxed_tables),
        };
        if !relaxed {
            check_feasible(&view, &decision.actions)?;
        }

        for (m, b) in busy.iter_mut().enumerate() {
            *b = !relaxed && holder[m].is_some();
        }
        for n in 0..n_users {
            let s = states[n];
            let a = decision.actions[n];
            let tau = users[n].tau_min;
            let mut coin = SlotCoin { source: &mut *source, user: n, t };
            let next = match cfg.mode {
                Mode::Preemptive => step_preemptive(s, a, &servers, tau, &mut coin)?,
                Mode::NonPreemptive => {
                    let act = match (s, a) {
                        (UserState::Idle { .. }, None) => NpAction::Idle,
                        (UserState::Idle { .. }, Some(m)) => NpAction::Offload(m),
                        (UserState::Computing { .. }, Some(_)) => NpAction::Continue,
                        (UserState::Computing { .. }, None) => NpAction::Drop,
                    };
                    let step = step_non_preemptive(s, act, &busy, &servers, tau, &mut coin)?;
                    if !relaxed {
                        if let Some(m) = step.release {
                            holder[m] = None;
                        }
                        if let Some(m) = step.acquire {
                            holder[m] = Some(n);
                        }
                    }
                    step.state
                }
            };
            let kind = match (s, a, next) {
                (UserState::Idle { delta }, Some(m), _) => {
                    metrics.offloads += 1;
                    Some(EventKind::Offload { server: m, gen_age: delta })
                }
                (UserState::Computing { server, .. }, None, _) => {
                    metrics.drops += 1;
                    Some(EventKind::Drop { server })
                }
                (UserState::Computing { delta, gen_age, .. }, Some(m), UserState::Idle { delta: reset }) => {
                    metrics.completions += 1;
                    Some(EventKind::Complete { server: m, elapsed: delta - gen_age, reset_to: reset })
                }
                (UserState::Computing { server, .. }, Some(m), _) if server != m => {
                    metrics.migrations += 1;
                    Some(EventKind::Migrate { from: server, to: m })
                }
                _ => None,
            };
            if let (Some(kind), Some(log)) = (kind, metrics.events.as_mut()) {
                log.push(Event { t, user: n, delta: s.delta(), kind });
            }
            states[n] = next;
        }

        if let (Some(table), Some(nu_prime)) = (table.as_mut(), decision.nu_prime) {
            if !opts.freeze_nu {
                dual.update(&nu_prime);
                table.set_nu(&dual.nu);
                if t - last_refresh >= opts.refresh.min_interval
                    && table.drift(opts.refresh.floor) > opts.refresh.threshold
                {
                    table.refresh(cfg, opts.solve)?;
                    last_refresh = t;
                    metrics.refreshes += 1;
                }
            }
        }
    }

    let h = opts.horizon as usize;
    let w = (tail as usize).clamp(1, h);
    metrics.final_avg_aoi = metrics.slot_aoi[h - w..].iter().sum::<f64>() / w as f64;
    for x in &mut metrics.per_user_mean {
        *x /= h as f64;
    }
    metrics.wallclock = start.elapsed().as_secs_f64();
    Ok(metrics)
}

/// Monte Carlo mean of the always-offload age recursion with unshifted
/// geometric service: services are drawn until one lasts a single slot, and
/// the sample is the total of the service times drawn.
pub fn idealized_age_mean(p: f64, samples: u64, seed: u64) -> f64 {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Geometric};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let geo = Geometric::new(p).expect("p in (0, 1]");
    let mut total = 0u64;
    for _ in 0..samples {
        loop {
            let k = geo.sample(&mut rng) + 1;
            total += k;
            if k == 1 {
                break;
            }
        }
    }
    total as f64 / samples as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ServerGroup, UserGroup};
    use crate::rng::Scripted;

    fn small(mode: Mode) -> SystemConfig {
        let mut cfg = SystemConfig::new(
            vec![UserGroup { tau_min: 1, count: 3 }, UserGroup { tau_min: 2, count: 2 }],
            vec![ServerGroup { p: 0.4, count: 1, nu: 0.0 }, ServerGroup { p: 0.8, count: 1, nu: 0.0 }],
            mode,
        );
        cfg.a_max = 40;
        cfg
    }

    #[test]
    fn empty_horizon() {
        let m = run(&small(Mode::Preemptive), &RunOptions::new(PolicyKind::Mamp, 0, 1)).unwrap();
        assert!(m.slot_aoi.is_empty() && m.final_avg_aoi.is_nan());
    }

    #[test]
    fn deterministic_given_seed() {
        for mode in [Mode::Preemptive, Mode::NonPreemptive] {
            for policy in [PolicyKind::Nested, PolicyKind::Rrp, PolicyKind::Marp] {
                let opts = RunOptions::new(policy, 400, 9);
                let a = run(&small(mode), &opts).unwrap();
                let b = run(&small(mode), &opts).unwrap();
                assert_eq!(a.slot_aoi, b.slot_aoi);
                assert_eq!(a.nu_trace, b.nu_trace);
            }
        }
    }

    #[test]
    fn running_average_matches_trace() {
        let m = run(&small(Mode::NonPreemptive), &RunOptions::new(PolicyKind::Nested, 700, 2)).unwrap();
        let mut s = 0.0;
        for (t, (&x, &avg)) in m.slot_aoi.iter().zip(&m.avg_aoi_trace).enumerate() {
            s += x;
            assert!((s / (t + 1) as f64 - avg).abs() < 1e-9);
        }
        let tail: f64 = m.slot_aoi[200..].iter().sum::<f64>() / 500.0;
        assert!((tail - m.final_avg_aoi).abs() < 1e-9);
    }

    #[test]
    fn age_accounting_from_events() {
        for mode in [Mode::Preemptive, Mode::NonPreemptive] {
            let mut opts = RunOptions::new(PolicyKind::Mamp, 300, 4);
            opts.events = Some(1 << 20);
            opts.record_states = true;
            let m = run(&small(mode), &opts).unwrap();
            let log = m.events.as_ref().unwrap();
            assert!(log.is_complete());
            let first: u64 = m.states[0].iter().map(|s| s.delta() as u64).sum();
            let last: u64 = m.states[299].iter().map(|s| s.delta() as u64).sum();
            let resets: u64 = log
                .events
                .iter()
                .filter(|e| e.t < 300)
                .filter_map(|e| match e.kind {
                    EventKind::Complete { reset_to, .. } => Some((e.delta + 1 - reset_to) as u64),
                    _ => None,
                })
                .sum();
            assert_eq!(last, first + 5 * 299 - resets);
        }
    }

    #[test]
    fn non_preemptive_servers_are_conserved() {
        let mut opts = RunOptions::new(PolicyKind::Nested, 500, 3);
        opts.record_states = true;
        let m = run(&small(Mode::NonPreemptive), &opts).unwrap();
        for s in &m.states {
            let mut used: Vec<usize> = s.iter().filter_map(UserState::server).collect();
            let n = used.len();
            used.sort_unstable();
            used.dedup();
            assert_eq!(used.len(), n);
        }
    }

    #[test]
    fn scripted_never_completes() {
        let cfg = small(Mode::NonPreemptive);
        let m = run_with(&cfg, &RunOptions::new(PolicyKind::Mamp, 50, 0), &mut Scripted::never()).unwrap();
        assert_eq!(m.completions, 0);
        assert_eq!(m.offloads, 2);
    }

    #[test]
    fn event_log_downsamples() {
        let mut log = EventLog::new(4);
        for t in 0..10 {
            log.push(Event { t, user: 0, delta: 1, kind: EventKind::Drop { server: 0 } });
        }
        assert!(!log.is_complete());
        assert!(log.events.len() <= 4);
        assert!(log.events.windows(2).all(|w| w[0].t < w[1].t));
    }

    #[test]
    fn scaling_replicates_groups() {
        let cfg = small(Mode::Preemptive);
        assert_eq!(scale_config(&cfg, 1).unwrap(), cfg);
        let c2 = scale_config(&cfg, 2).unwrap();
        assert_eq!(c2.num_users(), 10);
        assert_eq!(c2.num_servers(), 4);
        assert!(scale_config(&cfg, 0).is_err());
    }
}
