//! Truncated per-user MDP, its average-cost solver and structural checks.

mod build;
mod rvi;

pub use build::{build_truncated_mdp, MdpTable, State, Succ};
pub use rvi::{relative_value_iteration, solve_from, stationary, SolveOptions, Stationary, ValueTable};
mod structure;

pub use structure::{
    check_mltt, check_value_bounds, extract_policy_and_thresholds, BoundReport, MlttReport, MlttViolation,
    Threshold, ThresholdTable,
};
