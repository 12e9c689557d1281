//! KV blocks, their position plan, an ordered store and the cache file.

mod block;
mod file;
mod plan;
mod store;

pub use block::{KvBlock, LayerKv};
pub use file::{encode_cache, load_cache, save_cache, CACHE_MAGIC, CACHE_VERSION};
pub use plan::{plan_positions, PePlan, PlanOptions};
pub use store::KvStore;
