//! Structured pruning: plans, model surgery and the staged prune-distill loop.

mod plan;
mod stage;

pub use plan::{apply_plan, lowest, select_dims, PlanTargets, PrunePlan, StageKind};
pub use stage::{
    IterationRecord, LogRecord, OneShotOutcome, PipelineOutcome, PruneData, Pruner, RunLog, Scope, StageConfig, StageOutcome, SurgeryCheck,
    StopReason, Timing,
};
