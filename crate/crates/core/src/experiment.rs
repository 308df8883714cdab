//! Multi-run experiments: scale sweeps and policy comparisons.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fluid::{solve_relaxed_dual, DualOptions, RelaxedDual};
use crate::policy::PolicyKind;
use crate::sim::{run, scale_config, Metrics, RunOptions};
use crate::model::SystemConfig;

/// One run of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub r: usize,
    pub policy: PolicyKind,
    pub seed: u64,
    pub tail_avg_aoi: f64,
    pub running_avg_aoi: f64,
    pub lower_bound: f64,
    /// `(tail - lower_bound) / lower_bound`.
    pub gap_vs_lb: f64,
    pub wallclock: f64,
}

/// Whether any of `policies` needs the relaxed dual solution.
pub fn needs_dual(policies: &[PolicyKind]) -> bool {
    policies.iter().any(|p| matches!(p, PolicyKind::Rrp | PolicyKind::RelaxedLb))
}

/// Runs every `(r, policy, seed)` combination in parallel.
///
/// The per-user relaxation does not depend on `r`, so one dual solution of
/// the unscaled config serves every scale: it supplies the lower-bound
/// column and the relaxed policies of `rrp` and `relaxed-lb`. It is
/// computed here when `relaxed` is `None`.
pub fn sweep_scale(
    cfg: &SystemConfig,
    r_list: &[usize],
    policies: &[PolicyKind],
    seeds: &[u64],
    template: &RunOptions,
    relaxed: Option<&RelaxedDual>,
) -> Result<Vec<SweepRow>> {
    let owned;
    let dual = match relaxed {
        Some(d) => d,
        None => {
            owned = solve_relaxed_dual(cfg, DualOptions::default())?;
            &owned
        }
    };
    let configs = r_list.iter().map(|&r| Ok((r, scale_config(cfg, r)?))).collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for (r, scaled) in &configs {
        for &policy in policies {
            for &seed in seeds {
                jobs.push((*r, scaled, policy, seed));
            }
        }
    }
    jobs.par_iter()
        .map(|&(r, scaled, policy, seed)| {
            let mut opts = template.clone();
            opts.policy = policy;
            opts.seed = seed;
            if opts.relaxed_nu.is_none() {
                opts.relaxed_nu = Some(dual.nu_star.clone());
            }
            let m = run(scaled, &opts)?;
            Ok(row(r, &m, dual.lower_bound))
        })
        .collect()
}

fn row(r: usize, m: &Metrics, lb: f64) -> SweepRow {
    SweepRow {
        r,
        policy: m.policy,
        seed: m.seed,
        tail_avg_aoi: m.final_avg_aoi,
        running_avg_aoi: m.running_avg_aoi(),
        lower_bound: lb,
        gap_vs_lb: (m.final_avg_aoi - lb) / lb,
        wallclock: m.wallclock,
    }
}

/// Mean and standard error of one policy's tail AoI at one scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub r: usize,
    pub policy: PolicyKind,
    pub runs: usize,
    pub mean: f64,
    pub stderr: f64,
    pub gap_vs_lb: f64,
}

pub fn summarize(rows: &[SweepRow]) -> Vec<PolicySummary> {
    let mut keys: Vec<(usize, PolicyKind)> = rows.iter().map(|x| (x.r, x.policy)).collect();
    keys.sort_by_key(|&(r, p)| (r, PolicyKind::ALL.iter().position(|&q| q == p)));
    keys.dedup();
    keys.into_iter()
        .map(|(r, policy)| {
            let xs: Vec<&SweepRow> = rows.iter().filter(|x| x.r == r && x.policy == policy).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().map(|x| x.tail_avg_aoi).sum::<f64>() / n;
            let var = if xs.len() > 1 {
                xs.iter().map(|x| (x.tail_avg_aoi - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let lb = xs[0].lower_bound;
            PolicySummary { r, policy, runs: xs.len(), mean, stderr: (var / n).sqrt(), gap_vs_lb: (mean - lb) / lb }
        })
        .collect()
}

/// A policy's distance from the nested policy.
///
/// `gap_over_nested` divides the absolute gap by the nested mean,
/// `gap_over_other` by the policy's own mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub policy: PolicyKind,
    pub mean: f64,
    pub gap_abs: f64,
    pub gap_over_nested: f64,
    pub gap_over_other: f64,
}

/// Gaps of every policy against the nested one at the same scale.
pub fn relative_gaps(summaries: &[PolicySummary]) -> Result<Vec<GapRow>> {
    let nested = summaries
        .iter()
        .find(|s| s.policy == PolicyKind::Nested)
        .ok_or_else(|| Error::config("policies", "the comparison needs the nested policy"))?;
    Ok(summaries
        .iter()
        .filter(|s| s.r == nested.r)
        .map(|s| {
            let gap = s.mean - nested.mean;
            GapRow {
                policy: s.policy,
                mean: s.mean,
                gap_abs: gap,
                gap_over_nested: gap / nested.mean,
                gap_over_other: gap / s.mean,
            }
        })
        .collect())
}

/// Whether `xs` never rises by more than `tol` relative to the running minimum.
pub fn non_increasing(xs: &[f64], tol: f64) -> bool {
    let mut lo = f64::INFINITY;
    xs.iter().all(|&x| {
        let ok = x <= lo * (1.0 + tol) || !lo.is_finite();
        lo = lo.min(x);
        ok
    })
}

/// Published results, for side-by-side reports.
pub mod published {
    /// Table I (non-preemptive, r = 20, last 500 slots): policy, AoI, relative gap.
    pub const TABLE1: [(&str, f64, Option<f64>); 4] =
        [("nested", 370.05, None), ("rrp", 386.87, Some(0.0435)), ("mamp", 446.03, Some(0.1703)), ("marp", 496.22, Some(0.2543))];
    /// Table II (preemptive, r = 20, last 500 slots): policy, AoI.
    pub const TABLE2: [(&str, f64); 4] = [("nested", 224.55), ("rrp", 403.15), ("mamp", 462.74), ("marp", 588.43)];
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(policy: PolicyKind, mean: f64) -> PolicySummary {
        PolicySummary { r: 1, policy, runs: 1, mean, stderr: 0.0, gap_vs_lb: 0.0 }
    }

    #[test]
    fn gap_conventions() {
        let rows = relative_gaps(&[s(PolicyKind::Nested, 370.05), s(PolicyKind::Mamp, 446.03)]).unwrap();
        let mamp = &rows[1];
        assert!((mamp.gap_abs - 75.98).abs() < 1e-9);
        assert!((mamp.gap_over_other - 0.17035).abs() < 1e-4);
        assert!((mamp.gap_over_nested - 0.20532).abs() < 1e-4);
        assert!(relative_gaps(&[s(PolicyKind::Mamp, 1.0)]).is_err());
    }

    #[test]
    fn trend() {
        assert!(non_increasing(&[10.0, 9.0, 9.1, 8.0], 0.02));
        assert!(!non_increasing(&[10.0, 9.0, 9.5], 0.02));
        assert!(non_increasing(&[], 0.0));
    }
}
