pub mod ablate;
pub mod build_map;
pub mod eval_cmd;
pub mod heatmap;
pub mod localize;
pub mod synth;
pub mod train;
