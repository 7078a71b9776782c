//! Image-quality metrics, sweeps and their CSV/SVG reports.

mod metrics;
mod report;
mod sweep;

pub use metrics::{
    extract_patches, frechet_distance, mean_color_error, mean_psnr_signed, proxy_fid, psnr,
    psnr_from_mse, psnr_signed, Psnr, FID_RIDGE, PSNR_CAP_DB,
};
pub use report::{run_dir, short_hash, MetricRecord, SweepResult, CSV_HEADER};
pub use sweep::{dp_sweep, evaluate, rd_sweep, roundtrip, scaling_result, score};
