//! Metrics, synthetic data and the experiment grid runner.

pub mod experiment;
pub mod metrics;
pub mod textures;

pub use experiment::{
    run_experiment, run_grid, summarize, to_csv, AttackGrid, CellSummary, DatasetSource, ExperimentConfig, GridFamily,
    Method, ResultRow, CSV_HEADER,
};
pub use metrics::{bit_accuracy, luma, psnr, ssim, Db, MetricsReport};
pub use textures::{generate_texture, generate_textures, load_dataset, texture_file_name, write_textures, TextureSpec};
