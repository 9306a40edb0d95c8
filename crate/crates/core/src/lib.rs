//! Region-aligned image editing toolkit.
//!
//! - [`plan_format`]: planner output parsing, grading and canonical text.
//! - [`region_grid`]: pixel boxes to patch-grid token groups.
//! - [`attention_mask`]: region attention masks, reference oracle, mask files.
//! - [`toy_mmdit`]: small joint-attention transformer for exercising masks.
//! - [`rl_rewards`]: format/reasoning and judge rewards, group advantages.
//! - [`bench_eval`]: benchmark score aggregation and dataset statistics.
//! - [`cli`]: the `regionedit` command.

pub mod attention_mask;
pub mod bench_eval;
pub mod cli;
pub mod plan_format;
pub mod region_grid;
pub mod rl_rewards;
pub mod toy_mmdit;

pub use attention_mask::{build_mask, mask_stats, verify_mask, AttentionMask, RuleSet};
pub use plan_format::{inspect_plan, parse_plan, serialize_plan, BBox, EditPlan, ImageSize, RegionHint};
pub use region_grid::{build_layout, map_bbox_to_patches, perturb_bbox, ImageGeometry, TokenLayout};
