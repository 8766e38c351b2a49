//! Experiment plumbing: configuration, artifacts, result tables and the
//! end-to-end runs driven by the command-line tool.

mod artifacts;
mod config;
mod results;
mod run;

pub use artifacts::{unix_now, ArtifactDir, RunManifest, MANIFEST_NAME};
pub use config::{
    DataSection, ExperimentConfig, QuantSection, RangeMode, RangeSetting, Seeds, SweepSection, TrainSection,
    CONFIG_VERSION,
};
pub use results::{quantile, write_rows, ResultRow, ResultTable, Stats, SummaryRow, RESULT_VERSION};
pub use run::{
    export_heatmap, heatmap_csv, heatmap_overlay, load_checkpoint, map_checkpoint, noise_trials, quant_sweep,
    run_full_pipeline, run_noise_sweep, train_model, DistributionSummary, HeatmapOverlay, OverlayBlock,
    PipelineSummary, ProgramFile, ACCURACY, PROGRAM_VERSION,
};
