//! Synthetic-domain experiments: memory swaps, memory growth, in-task
//! injection, architecture variants and retrieval export.

mod harness;
mod heatmap;
mod runs;
mod synthetic;

pub use harness::{
    experiment_model, fit_and_evaluate, mean_sd, pretrain_general, ExperimentConfig, ExperimentReport, Pretrained,
    Source, DOMAIN_ID_BASE, IN_TASK_ID_BASE,
};
pub use heatmap::{export_retrieval_heatmap, HEATMAP_HEADER};
pub use runs::{
    condition_memory, domain_adaptation_from, in_task_from, in_task_split, in_task_texts, knowledge_update_from,
    run_domain_adaptation, run_in_task, run_knowledge_update, run_variant_sweep, sweep_layouts, AdaptCondition,
    InTaskVariant, IN_TASK_MEMORY_SHARE, SWEEP_TOP_N,
};
pub use synthetic::{generate_domains, DomainData, Entity, SyntheticData, SyntheticDomainSpec};
