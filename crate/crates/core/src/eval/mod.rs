//! Evaluation harness: few-shot episodes, ablation modes, domain shift, the
//! synthetic benchmark and report emission.

mod ablation;
mod bench;
mod crops;
mod dataset;
mod episode;
mod metrics;
mod report;

pub use ablation::{
    component_modes, criterion_modes, full_matrix, prepare_cache, run_ablation, run_domain_generalization,
    DomainTarget, EvalConfig, EvalReport, EvalResults, Mode, RANDOM_REPEATS,
};
pub use bench::{
    default_synth_modes, generate_world, mean_std, synthetic_benchmark, ModeAggregate, SynthConfig, SynthReport,
    SynthWorld,
};
pub use crops::{crop_manifest, materialize};
pub use dataset::{DatasetImage, DatasetManifest};
pub use episode::{build_fewshot_episode, Episode};
pub use metrics::{evaluate, Accuracy};
pub use report::{canonical_json, reports_csv, synth_csv};
