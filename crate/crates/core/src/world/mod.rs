//! Synthetic driving world: kinematic scenarios, BEV rasterisation, backward
//! flow and the on-disk dataset.

mod dataset;
mod grid;
mod raster;
mod scenario;

pub use dataset::{
    build_dataset, config_hash, load_manifest, load_sample, sample_path, scenario_seeds, Dataset,
    DatasetConfig, Manifest, Sample, MANIFEST_FILE,
};
pub use grid::GridSpec;
pub use raster::{
    compute_backward_flow, input_raster, rasterize_frame, warp_consistency, AgentBox, BevFrameGT,
    RASTER_CHANNELS,
};
pub use scenario::{
    generate_scenario, step_state, AgentState, AgentTrack, FlowMode, Scenario, ScenarioConfig,
};
