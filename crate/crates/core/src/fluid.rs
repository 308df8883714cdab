//! Relaxed lower bound, fluid occupancy programs and the fixed-point check.
//!
//! Relaxing the per-slot capacity constraint to a long-run one decouples the
//! users: at a cost vector `nu` every user type solves its own average-cost
//! problem, and
//!
//! ```text
//! L(nu) = (1/N) * (sum_g count_g * gamma_g(nu) - sum_m nu_m * cap_m)
//! ```
//!
//! is a lower bound on the optimal average age. [`solve_relaxed_dual`]
//! maximizes it by projected subgradient ascent. [`FluidLp`] writes the same
//! relaxation as a linear program over stationary state-action frequencies,
//! whose optimum equals `max L` on the shared truncation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::IndexTable;
use crate::mdp::{build_truncated_mdp, solve_from, stationary, MdpTable, SolveOptions, State, ValueTable};
use crate::model::{SystemConfig, UserSpec, UserState};

/// Direction of optimization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cmp {
    Le,
    Eq,
    Ge,
}

/// One sparse constraint row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub terms: Vec<(usize, f64)>,
    pub cmp: Cmp,
    pub rhs: f64,
}

/// A linear program with bounded variables and sparse rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProgram {
    pub sense: Sense,
    pub objective: Vec<f64>,
    pub bounds: Vec<(f64, f64)>,
    pub rows: Vec<Row>,
}

impl LinearProgram {
    pub fn new(sense: Sense) -> Self {
        LinearProgram { sense, objective: Vec::new(), bounds: Vec::new(), rows: Vec::new() }
    }

    pub fn add_var(&mut self, cost: f64, bounds: (f64, f64)) -> usize {
        self.objective.push(cost);
        self.bounds.push(bounds);
        self.objective.len() - 1
    }

    pub fn add_row(&mut self, terms: Vec<(usize, f64)>, cmp: Cmp, rhs: f64) {
        self.rows.push(Row { terms, cmp, rhs });
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Largest violation of any row or bound at `x`.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let rows = self.rows.iter().map(|r| {
            let lhs: f64 = r.terms.iter().map(|&(j, a)| a * x[j]).sum();
            match r.cmp {
                Cmp::Le => (lhs - r.rhs).max(0.0),
                Cmp::Ge => (r.rhs - lhs).max(0.0),
                Cmp::Eq => (lhs - r.rhs).abs(),
            }
        });
        let bounds = self.bounds.iter().zip(x).map(|(&(lo, hi), &v)| (lo - v).max(v - hi).max(0.0));
        rows.chain(bounds).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
}

/// Anything that can solve a [`LinearProgram`] to optimality.
pub trait LpSolver {
    fn solve(&self, lp: &LinearProgram) -> Result<LpSolution>;
}

/// Simplex solver from the `microlp` crate.
#[derive(Clone, Copy, Debug, Default)]
pub struct MicroLp;

impl LpSolver for MicroLp {
    fn solve(&self, lp: &LinearProgram) -> Result<LpSolution> {
        let dir = match lp.sense {
            Sense::Minimize => microlp::OptimizationDirection::Minimize,
            Sense::Maximize => microlp::OptimizationDirection::Maximize,
        };
        let mut p = microlp::Problem::new(dir);
        let vars: Vec<microlp::Variable> =
            lp.objective.iter().zip(&lp.bounds).map(|(&c, &b)| p.add_var(c, b)).collect();
        for r in &lp.rows {
            let op = match r.cmp {
                Cmp::Le => microlp::ComparisonOp::Le,
                Cmp::Eq => microlp::ComparisonOp::Eq,
                Cmp::Ge => microlp::ComparisonOp::Ge,
            };
            let mut terms = r.terms.clone();
            terms.sort_by_key(|t| t.0);
            terms.dedup_by(|b, a| {
                let same = a.0 == b.0;
                if same {
                    a.1 += b.1;
                }
                same
            });
            p.add_constraint(terms.into_iter().map(|(j, a)| (vars[j], a)), op, r.rhs);
        }
        let sol = match p.solve() {
            Ok(out) => out.into_solution().map_err(|_| Error::Lp("interrupted".into()))?,
            Err(microlp::Error::Infeasible) => return Err(Error::Infeasible),
            Err(e) => return Err(Error::Lp(e.to_string())),
        };
        let x: Vec<f64> = vars.iter().map(|&v| sol.var_value_raw(v)).collect();
        Ok(LpSolution { objective: lp.value(&x), x })
    }
}

/// How [`solve_relaxed_dual`] searches over `nu`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DualMethod {
    /// Cutting planes inside a trust region, with a certified upper bound.
    CuttingPlane,
    /// Projected subgradient steps `c / sqrt(k)` with averaging.
    Subgradient,
}

impl std::str::FromStr for DualMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cutting-plane" => Ok(DualMethod::CuttingPlane),
            "subgradient" => Ok(DualMethod::Subgradient),
            _ => Err(Error::config("method", format!("unknown dual method `{s}`"))),
        }
    }
}

/// Stopping rule and step size of the dual ascent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualOptions {
    pub method: DualMethod,
    pub max_rounds: usize,
    /// Relative gap between the certified upper bound and the best dual
    /// value (cutting planes), or relative spread of the dual value over the
    /// last 20% of rounds (subgradient), that counts as converged.
    pub tol: f64,
    /// Step constant `c` in `c / sqrt(k)`; `None` uses `max p / min p`.
    pub step: Option<f64>,
    pub solve: SolveOptions,
}

impl Default for DualOptions {
    fn default() -> Self {
        DualOptions {
            method: DualMethod::CuttingPlane,
            max_rounds: 200,
            tol: 1e-3,
            step: None,
            solve: SolveOptions { tol: 1e-7, max_iters: 100_000 },
        }
    }
}

/// Result of [`solve_relaxed_dual`].
#[derive(Clone, Debug)]
pub struct RelaxedDual {
    /// Best cost vector (cutting planes) or the average of the second half
    /// of the iterates (subgradient).
    pub nu_star: Vec<f64>,
    /// Best dual value found.
    pub lower_bound: f64,
    /// No dual value exceeds this; infinite when not certified.
    pub upper_bound: f64,
    /// Dual value at `nu_star`.
    pub dual_at_star: f64,
    pub dual_trace: Vec<f64>,
    pub nu_trace: Vec<Vec<f64>>,
    /// Stationary activation of each server type at `nu_star`, in servers.
    pub load: Vec<f64>,
    pub capacity: Vec<f64>,
    pub rounds: usize,
    pub converged: bool,
    /// Per-group solutions at `nu_star`.
    pub tables: Vec<ValueTable>,
}

impl RelaxedDual {
    /// `load - capacity` per server type at `nu_star`.
    pub fn residuals(&self) -> Vec<f64> {
        self.load.iter().zip(&self.capacity).map(|(l, c)| l - c).collect()
    }
}

struct Round {
    tables: Vec<ValueTable>,
    dual: f64,
    load: Vec<f64>,
}

fn group_mdps(cfg: &SystemConfig, nu: &[f64]) -> Result<Vec<MdpTable>> {
    let servers = cfg.server_types(nu);
    cfg.user_groups
        .iter()
        .enumerate()
        .map(|(g, grp)| {
            let user = UserSpec { id: 0, group: g, tau_min: grp.tau_min };
            build_truncated_mdp(&user, &servers, nu, cfg.a_max, cfg.mode)
        })
        .collect()
}

fn evaluate(cfg: &SystemConfig, nu: &[f64], warm: Option<&[ValueTable]>, opts: SolveOptions) -> Result<Round> {
    let mdps = group_mdps(cfg, nu)?;
    let k = nu.len();
    let solved = mdps
        .par_iter()
        .enumerate()
        .map(|(g, mdp)| {
            let vt = solve_from(mdp, warm.and_then(|w| w.get(g)), opts)?;
            let act = vt.stationary()?.activation(k);
            Ok((vt, act))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = cfg.num_users() as f64;
    let mut load = vec![0.0; k];
    let mut total = 0.0;
    for ((vt, act), grp) in solved.iter().zip(&cfg.user_groups) {
        total += grp.count as f64 * vt.gamma;
        for (l, a) in load.iter_mut().zip(act) {
            *l += grp.count as f64 * a;
        }
    }
    let paid: f64 = nu.iter().zip(&cfg.server_groups).map(|(c, s)| c * s.count as f64).sum();
    Ok(Round { dual: (total - paid) / n, load, tables: solved.into_iter().map(|(vt, _)| vt).collect() })
}

/// Whether `nu` maximizes the dual: every coordinate has zero excess load,
/// or sits at zero with spare capacity.
fn stationary_point(nu: &[f64], grad: &[f64]) -> bool {
    grad.iter().zip(nu).all(|(&g, &v)| g.abs() < 1e-9 || (v == 0.0 && g < 0.0))
}

struct Trace {
    dual: Vec<f64>,
    nu: Vec<Vec<f64>>,
}

impl Trace {
    fn push(&mut self, nu: &[f64], r: &Round) {
        self.dual.push(r.dual);
        self.nu.push(nu.to_vec());
    }
}

/// Lagrangian lower bound: maximizes the dual function over `nu >= 0`.
///
/// Each round solves every user type at the current `nu`; the excess load
/// `(load_m - cap_m) / N` is a supergradient. With
/// [`DualMethod::CuttingPlane`] the supergradients define a piecewise-linear
/// model that overestimates the dual; the next point maximizes the model in
/// a box around the best point so far, and the model maximum over all
/// admissible `nu` is the certified upper bound. [`DualMethod::Subgradient`]
/// steps by `c / sqrt(k)` instead. Both stop at once when a round finds a
/// stationary point.
pub fn solve_relaxed_dual(cfg: &SystemConfig, opts: DualOptions) -> Result<RelaxedDual> {
    cfg.validate()?;
    let capacity: Vec<f64> = cfg.server_groups.iter().map(|s| s.count as f64).collect();
    let mut trace = Trace { dual: Vec::new(), nu: Vec::new() };
    let (nu_star, last, upper, converged) = match opts.method {
        DualMethod::CuttingPlane => cutting_plane(cfg, opts, &capacity, &mut trace)?,
        DualMethod::Subgradient => subgradient(cfg, opts, &capacity, &mut trace)?,
    };
    let best = trace.dual.iter().cloned().fold(last.dual, f64::max);
    Ok(RelaxedDual {
        nu_star,
        lower_bound: best,
        upper_bound: upper,
        dual_at_star: last.dual,
        rounds: trace.dual.len(),
        dual_trace: trace.dual,
        nu_trace: trace.nu,
        load: last.load,
        capacity,
        converged,
        tables: last.tables,
    })
}

type Outcome = (Vec<f64>, Round, f64, bool);

fn excess(r: &Round, capacity: &[f64], n: f64) -> Vec<f64> {
    r.load.iter().zip(capacity).map(|(l, c)| (l - c) / n).collect()
}

fn cutting_plane(cfg: &SystemConfig, opts: DualOptions, capacity: &[f64], trace: &mut Trace) -> Result<Outcome> {
    let k = capacity.len();
    let n = cfg.num_users() as f64;
    let a = cfg.a_max as f64;
    // no server is worth more per slot than the span of the wait-forever values
    let ceiling = a * a / 2.0;
    let mut cuts: Vec<(Vec<f64>, f64, Vec<f64>)> = Vec::new();
    let mut x = vec![0.0; k];
    let mut radius = a;
    let mut center: Option<(Vec<f64>, Round)> = None;
    let mut predicted = f64::INFINITY;
    let mut upper = f64::INFINITY;
    for _ in 0..opts.max_rounds.max(1) {
        let warm = center.as_ref().map(|c| c.1.tables.as_slice());
        let r = evaluate(cfg, &x, warm, opts.solve)?;
        trace.push(&x, &r);
        let grad = excess(&r, capacity, n);
        if stationary_point(&x, &grad) {
            return Ok((x, r, trace.dual.last().copied().unwrap_or(f64::NAN), true));
        }
        cuts.push((x.clone(), r.dual, grad));
        match &center {
            Some((_, c)) if r.dual < c.dual + 0.1 * (predicted - c.dual) => radius = (radius * 0.5).max(1e-6),
            _ => {
                let moved = center.as_ref().map_or(0.0, |(c, _)| max_dist(c, &x));
                if moved >= 0.5 * radius {
                    radius *= 2.0;
                }
                center = Some((x.clone(), r));
            }
        }
        let (cx, cr) = center.as_ref().expect("center is set after the first round");
        let best = cr.dual;
        upper = upper.min(model_max(&cuts, &vec![0.0; k], &vec![ceiling; k])?.1);
        if upper - best <= opts.tol * best.abs().max(1.0) {
            break;
        }
        let lo: Vec<f64> = cx.iter().map(|v| (v - radius).max(0.0)).collect();
        let hi: Vec<f64> = cx.iter().map(|v| (v + radius).min(ceiling)).collect();
        let (next, pred) = model_max(&cuts, &lo, &hi)?;
        if pred - best <= 1e-9 * best.abs().max(1.0) {
            radius *= 2.0;
        }
        predicted = pred;
        x = next;
    }
    let (cx, cr) = center.expect("at least one round runs");
    let converged = upper - cr.dual <= opts.tol * cr.dual.abs().max(1.0);
    Ok((cx, cr, upper, converged))
}

fn max_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Maximizes the cutting-plane model over a box.
fn model_max(cuts: &[(Vec<f64>, f64, Vec<f64>)], lo: &[f64], hi: &[f64]) -> Result<(Vec<f64>, f64)> {
    let k = lo.len();
    let mut lp = LinearProgram::new(Sense::Maximize);
    for m in 0..k {
        lp.add_var(0.0, (lo[m], hi[m]));
    }
    let t = lp.add_var(1.0, (f64::NEG_INFINITY, f64::INFINITY));
    for (at, val, g) in cuts {
        let mut terms: Vec<(usize, f64)> = g.iter().enumerate().map(|(m, &gm)| (m, -gm)).collect();
        terms.push((t, 1.0));
        let rhs = val - g.iter().zip(at).map(|(gm, xm)| gm * xm).sum::<f64>();
        lp.add_row(terms, Cmp::Le, rhs);
    }
    let sol = MicroLp.solve(&lp)?;
    Ok((sol.x[..k].to_vec(), sol.x[t]))
}

fn subgradient(cfg: &SystemConfig, opts: DualOptions, capacity: &[f64], trace: &mut Trace) -> Result<Outcome> {
    let k = capacity.len();
    let pmax = cfg.server_groups.iter().map(|s| s.p).fold(0.0, f64::max);
    let pmin = cfg.server_groups.iter().map(|s| s.p).fold(1.0, f64::min);
    let c = opts.step.unwrap_or(pmax / pmin);
    let mut nu = vec![0.0; k];
    let mut warm: Option<Vec<ValueTable>> = None;
    for round in 1..=opts.max_rounds.max(1) {
        let r = evaluate(cfg, &nu, warm.as_deref(), opts.solve)?;
        trace.push(&nu, &r);
        let grad: Vec<f64> = r.load.iter().zip(capacity).map(|(l, c)| l - c).collect();
        if stationary_point(&nu, &grad) {
            return Ok((nu, r, trace.dual.last().copied().unwrap_or(f64::NAN), true));
        }
        let step = c / (round as f64).sqrt();
        for (v, g) in nu.iter_mut().zip(&grad) {
            *v = (*v + step * g).max(0.0);
        }
        warm = Some(r.tables);
    }
    let rounds = trace.nu.len();
    let tail = &trace.nu[rounds / 2..];
    let mut avg = vec![0.0; k];
    for v in tail {
        for (a, x) in avg.iter_mut().zip(v) {
            *a += x / tail.len() as f64;
        }
    }
    let r = evaluate(cfg, &avg, warm.as_deref(), opts.solve)?;
    let window = &trace.dual[rounds - (rounds / 5).max(1)..];
    let hi = window.iter().cloned().fold(r.dual, f64::max);
    let lo = window.iter().cloned().fold(r.dual, f64::min);
    let converged = hi - lo <= opts.tol * hi.abs().max(1.0);
    Ok((avg, r, f64::INFINITY, converged))
}

/// Occupancy variables of one user type.
#[derive(Clone, Debug)]
struct Block {
    mdp: MdpTable,
    count: f64,
    /// First variable of each state; a state's actions follow `mdp.actions`.
    start: Vec<usize>,
}

/// Stationary state-action frequencies of one user type.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupOccupancy {
    /// Fraction of time in each state.
    pub z: Vec<f64>,
    /// `(action, frequency)` per state.
    pub x: Vec<Vec<(Option<usize>, f64)>>,
}

/// Solution of the relaxed fluid program.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OccupancyMeasure {
    pub groups: Vec<GroupOccupancy>,
    /// Per-user average cost.
    pub objective: f64,
    /// Largest violation of the balance and normalization rows.
    pub balance_residual: f64,
    /// Activation of each server type, in servers.
    pub load: Vec<f64>,
}

/// The relaxed problem as a linear program over occupancy measures.
///
/// Variables are `x[g][s][a]`, the stationary frequency of state `s` and
/// action `a` for a user of group `g`. Rows: flow balance per state, unit
/// mass per group, and per-type capacity `sum_g count_g * sum_s x[g][s][m]
/// <= cap_m`. The objective is the per-user average of age plus the costs
/// carried by the server types.
#[derive(Clone, Debug)]
pub struct FluidLp {
    pub lp: LinearProgram,
    blocks: Vec<Block>,
    balance_rows: usize,
}

/// Builds the relaxed fluid program of `cfg` with activation costs `nu`.
///
/// With `nu = 0` its optimum is the relaxed lower bound.
pub fn build_fluid_lp_relaxed(cfg: &SystemConfig, nu: &[f64]) -> Result<FluidLp> {
    cfg.validate()?;
    let n = cfg.num_users() as f64;
    let mut lp = LinearProgram::new(Sense::Minimize);
    let mut blocks = Vec::new();
    for (mdp, grp) in group_mdps(cfg, nu)?.into_iter().zip(&cfg.user_groups) {
        let count = grp.count as f64;
        let mut start = Vec::with_capacity(mdp.num_states());
        for i in 0..mdp.num_states() {
            let s = mdp.state(i);
            start.push(lp.num_vars());
            for a in mdp.actions(&s) {
                lp.add_var(count / n * mdp.cost(&s, a), (0.0, 1.0));
            }
        }
        blocks.push(Block { mdp, count, start });
    }
    for b in &blocks {
        let ns = b.mdp.num_states();
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ns];
        for i in 0..ns {
            let s = b.mdp.state(i);
            for (j, a) in b.mdp.actions(&s).into_iter().enumerate() {
                let var = b.start[i] + j;
                rows[i].push((var, 1.0));
                for tr in b.mdp.transitions(&s, a) {
                    if tr.prob > 0.0 {
                        rows[tr.next].push((var, -tr.prob));
                    }
                }
            }
        }
        for terms in rows {
            lp.add_row(terms, Cmp::Eq, 0.0);
        }
    }
    let balance_rows = lp.rows.len();
    for b in &blocks {
        let end = b.start.last().map_or(0, |&s| s + b.mdp.actions(&b.mdp.state(b.start.len() - 1)).len());
        lp.add_row((b.start[0]..end).map(|v| (v, 1.0)).collect(), Cmp::Eq, 1.0);
    }
    for (m, srv) in cfg.server_groups.iter().enumerate() {
        let mut terms = Vec::new();
        for b in &blocks {
            for i in 0..b.mdp.num_states() {
                let s = b.mdp.state(i);
                if let Some(j) = b.mdp.actions(&s).iter().position(|&a| a == Some(m)) {
                    terms.push((b.start[i] + j, b.count));
                }
            }
        }
        lp.add_row(terms, Cmp::Le, srv.count as f64);
    }
    Ok(FluidLp { lp, blocks, balance_rows })
}

impl FluidLp {
    pub fn solve_with(&self, solver: &impl LpSolver) -> Result<OccupancyMeasure> {
        let sol = solver.solve(&self.lp)?;
        Ok(self.decode(&sol.x))
    }

    pub fn solve(&self) -> Result<OccupancyMeasure> {
        self.solve_with(&MicroLp)
    }

    fn decode(&self, x: &[f64]) -> OccupancyMeasure {
        let k = self.blocks.first().map_or(0, |b| b.mdp.num_servers());
        let mut load = vec![0.0; k];
        let groups = self
            .blocks
            .iter()
            .map(|b| {
                let mut z = Vec::with_capacity(b.start.len());
                let mut xs = Vec::with_capacity(b.start.len());
                for (i, &st) in b.start.iter().enumerate() {
                    let acts = b.mdp.actions(&b.mdp.state(i));
                    let row: Vec<(Option<usize>, f64)> =
                        acts.iter().enumerate().map(|(j, &a)| (a, x[st + j].max(0.0))).collect();
                    for &(a, v) in &row {
                        if let Some(m) = a {
                            load[m] += b.count * v;
                        }
                    }
                    z.push(row.iter().map(|r| r.1).sum());
                    xs.push(row);
                }
                GroupOccupancy { z, x: xs }
            })
            .collect();
        let balance_residual = self.lp.rows[..self.balance_rows + self.blocks.len()]
            .iter()
            .map(|r| {
                let lhs: f64 = r.terms.iter().map(|&(j, a)| a * x[j]).sum();
                (lhs - r.rhs).abs()
            })
            .fold(0.0, f64::max);
        OccupancyMeasure { groups, objective: self.lp.value(x), balance_residual, load }
    }
}

/// Outcome of [`check_fixed_point_equivalence`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FixedPointReport {
    /// Optimum of the relaxed fluid program.
    pub relaxed_objective: f64,
    /// Optimum of the index program at the given prices.
    pub index_objective: f64,
    /// Index-program value of the relaxed solution.
    pub index_value_at_relaxed: f64,
    /// Relaxed-program cost of the policy the index program picks.
    pub index_policy_cost: f64,
    /// `max` of the two normalized gaps.
    pub gap: f64,
    pub tol: f64,
}

impl FixedPointReport {
    pub fn holds(&self) -> bool {
        self.gap < self.tol
    }
}

fn as_user_state(s: &State) -> UserState {
    if s.is_l1() {
        UserState::Idle { delta: s.delta }
    } else {
        UserState::Computing { delta: s.delta, gen_age: s.gen_age(), server: s.copy }
    }
}

/// Checks that the relaxed fluid solution is a fixed point of the index
/// program.
///
/// The index program at prices `prices` is, per user type and state,
/// `max sum_m (I_m(s) - prices_m) * x[s][m]` subject to `sum_m x[s][m] <=
/// z[s]`, with `z` taken from the relaxed solution and `I` from `table`.
/// Two gaps are measured, both relative to `1 + |relaxed objective|`: how
/// far the relaxed solution is from optimal in the index program, and how
/// much the index program's own choice (best positive reduced index per
/// state, run as a stationary policy) costs more than the relaxed optimum.
/// At the fixed point both vanish; prices away from it make them positive.
pub fn check_fixed_point_equivalence(
    fluid: &FluidLp,
    relaxed: &OccupancyMeasure,
    table: &IndexTable,
    prices: &[f64],
    tol: f64,
) -> Result<FixedPointReport> {
    let n: f64 = fluid.blocks.iter().map(|b| b.count).sum();
    let mut best = 0.0;
    let mut at_relaxed = 0.0;
    let mut policy_cost = 0.0;
    for (g, (b, occ)) in fluid.blocks.iter().zip(&relaxed.groups).enumerate() {
        let ns = b.mdp.num_states();
        let mut choice = vec![None; ns];
        for i in 0..ns {
            let s = b.mdp.state(i);
            let us = as_user_state(&s);
            let reduced = |m: usize| table.index(g, &us, m) - prices[m];
            let mut top = (None, 0.0);
            for a in b.mdp.actions(&s).into_iter().flatten() {
                let r = reduced(a);
                if r > top.1 + 1e-12 {
                    top = (Some(a), r);
                }
            }
            choice[i] = top.0;
            best += b.count / n * occ.z[i] * top.1;
            for &(a, v) in &occ.x[i] {
                if let Some(m) = a {
                    at_relaxed += b.count / n * v * reduced(m);
                }
            }
        }
        let st = stationary(&b.mdp, |i| choice[i])?;
        policy_cost += b.count / n * st.average_cost(&b.mdp);
    }
    let scale = 1.0 + relaxed.objective.abs();
    let gap = ((best - at_relaxed) / scale).max((policy_cost - relaxed.objective) / scale);
    Ok(FixedPointReport {
        relaxed_objective: relaxed.objective,
        index_objective: best,
        index_value_at_relaxed: at_relaxed,
        index_policy_cost: policy_cost,
        gap,
        tol,
    })
}
