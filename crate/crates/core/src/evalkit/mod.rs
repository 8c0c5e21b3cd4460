//! Pretrained-free evaluation: PSNR, SSIM, grammar attribute matching and a
//! highlight statistic, plus the evaluation driver.

mod attributes;
mod evaluate;
mod metrics;

pub use attributes::{attribute_match, side_quadrant, AttributeCheck, AttributeMatch};
pub use evaluate::{
    eval_condition, evaluate, evaluate_checkpoint, evaluate_keeping, evaluate_with, split_indices,
    with_metallic, Aggregate, DdimSampler, EvalMode, EvalOptions, EvalReport, GeneratedTile,
    SampleRow, Split, TileSampler,
};
pub use metrics::{
    is_foreground, luminance, psnr, specular_statistic, ssim, view_specular, FOREGROUND_THRESHOLD,
    PSNR_CAP_DB,
};
