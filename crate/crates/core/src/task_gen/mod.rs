//! Task generation: synthetic GP regression, image completion, IDX ingestion
//! and task caches.

pub mod cache;
pub mod idx;
pub mod image;
pub mod kernel;
pub mod synth;

pub use cache::{config_hash, read_task_cache, write_task_cache, CachedTask};
pub use idx::{load_idx, ImageSet};
pub use image::{sample_image_task, ImagePool, ImageTaskConfig, IntensityStats};
pub use kernel::{gp_sample, kernel_eval, KernelFamily, KernelSpec};
pub use synth::{sample_synth_task, SynthTaskConfig};
