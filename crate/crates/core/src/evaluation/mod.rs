//! Image quality metrics and validation-set reports.

mod lpips;
mod metrics;
mod report;

pub use lpips::{Lpips, LPIPS_LAYERS};
pub use metrics::{gaussian_taps, luma, mse, psnr, psnr_from_mse, ssim, ssim_gray, SSIM_SIGMA, SSIM_WINDOW};
pub use report::{
    evaluate_manifest, evaluate_set, Aggregate, ConstantFill, EvalImage, EvalOptions, IdentityInpainter, Inpainter,
    MaskSource, MetricsReport, MetricsRow, REPORT_CSV, REPORT_PLOT, REPORT_SUMMARY,
};
