//! Dual-control conditioning: a reference pass over the input view whose
//! self-attention keys and values are appended to the main denoiser, text
//! interaction inside that pass, and the training-time condition switcher.

mod attend;
mod bundle;

pub(crate) use attend::text_cross_attention;
pub use attend::{append_kv, text_image_interact, CrossAttnIds, KvEntry, ReferenceKV};
pub use bundle::{switch_conditions, Branch, ConditionBundle, DEFAULT_MODALITY_PROBS};
