//! Named, reproducible experiments: scenario files, the runner, metrics and
//! post-run checks.

mod builtin;
mod check;
mod compare;
mod metrics;
mod run;
mod scenario;

pub use builtin::{builtin, builtin_names, load, BUILTIN};
pub use check::{check_agreement, check_run, AgreementReport, CheckResult, Report};
pub use compare::{
    campaign_scenario, compare_modes, comparison_csv, comparison_table, run_campaign, CampaignReport, CampaignRun,
    CompareRow,
};
pub use metrics::{OpMetrics, RunMetrics};
pub use run::{build, run_scenario, ClientSummary, Process, ReplicaSummary, RunOutput, Sim};
pub use scenario::{
    CheckName, Checks, ClientPlan, ConfigError, Scenario, SystemSection, WorkloadGroup, SCENARIO_VERSION,
};
