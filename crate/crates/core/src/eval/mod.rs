//! Evaluation harness: metrics, corpora, the end-to-end pipeline and the
//! experiment drivers built on it.

pub mod corpus;
pub mod fairness;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod sweep;
pub mod synth;

pub use corpus::{read_instances, write_jsonl, EvalInstance};
pub use fairness::{fairness_suite, FairnessReport, TOKEN_TOLERANCE};
pub use metrics::{aga, canonical_state, jga};
pub use pipeline::{
    derive_seed, evaluate, run_pipeline, ArmMethod, EvalSummary, ExperimentConfig, Harness, InstanceRow, PipelineRun,
    VerifierBackend, VerifierSpec,
};
pub use report::write_report;
pub use sweep::{grid_search, sweep, GridPoint, GridSearchReport, SearchGrid, SweepGrid, SweepTable};
pub use synth::{synth_corpus, SynthCorpus, SynthSpec};
