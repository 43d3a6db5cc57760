//! Simplified quadruped simulator, procedural terrain and domain
//! randomization.

mod env;
mod randomization;
mod terrain;

pub use env::{
    assemble_observation, pd_torque, Observation, QuadrupedEnv, RobotState, Sensors, SimConfig, StepOutcome,
    HISTORY_WIDTH, PROP_DIM,
};
pub use randomization::{randomize, DomainRandomization, RandomizationRanges};
pub use terrain::{
    build_terrain, noise_bound, stair_rise, wave_amplitude, HeightField, TerrainKind, GRID_RESOLUTION, MAX_LEVEL,
    MIN_LEVEL, NOISE_NODES, STAIR_RUN, TILE_SIZE,
};
