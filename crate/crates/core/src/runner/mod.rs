//! Closed-loop episodes: scripted obstacle vehicles are sensed by the
//! roadside unit, beam power is allocated, and the ego vehicle plans
//! against the resulting (inflated) estimates.

mod config;
mod episode;
mod metrics;
mod sweep;

pub use config::{
    EgoConfig, IsacSection, Method, ObstacleConfig, PlannerSection, ScenarioConfig, DEFAULT_SCENARIO_TOML,
};
pub use episode::{
    run_episode, run_episode_with, Episode, EpisodeOptions, ObstacleLog, PlanRecord, PlanSummary, StepLog, StepStatus,
};
pub use metrics::{compute_metrics, FailureReason, Metrics};
pub use sweep::{
    aggregate, episode_log_name, parse_list, parse_seeds, run_sweep, write_aggregates_csv, write_metrics_csv,
    write_step_log, AggregateRow, SweepResult, METRICS_HEADER,
};
