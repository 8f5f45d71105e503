//! Slot F1 and the evaluation protocols: zero-shot transfer, seen/unseen
//! breakdown, template robustness, few-shot budgets, ablations and the
//! inverse-task analysis.

mod metrics;
mod pipeline;
mod protocols;
mod report;

pub use metrics::{count, evaluate_seen_unseen, multiset_overlap, restrict, slot_f1, Counts, Pair, Prf, ScoredUtterance};
pub use pipeline::{inverse_examples, main_examples, score_utterance, train_pipeline, GoldEcho, PipelineConfig, SlotFiller, TrainedPipeline};
pub use protocols::{
    ablation_suite, evaluate_unit, evaluate_zero_shot, few_shot_suite, inverse_task_analysis, robustness_from, robustness_suite, run_unit, unit_split, Budget, DomainEvaluation,
    InverseDelta, RobustnessResult, UnitResult, UnitSpec, Variant,
};
pub use report::{render_csv, render_table, AblationRow, BudgetRow, DomainRow, EvalReport, InverseSummary, Protocol, RobustnessRow, SeedScore, SeenUnseenTable, Stat, ZeroShotTable, SCHEMA_VERSION};
