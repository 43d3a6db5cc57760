//! Motion frames and windows, procedural reference gaits, and datasets.

mod dataset;
mod frame;
mod gait;
mod kinematics;

pub use dataset::{MotionDataset, DATASET_FORMAT, DATASET_VERSION, DEFAULT_FRAME_RATE};
pub use frame::{make_windows, reverse_frames, MotionFrame, MotionWindow, QUATERNION_TOLERANCE};
pub use gait::{contact_schedule, generate_gait, GaitSpec, GaitStyle};
pub use kinematics::{Leg, Morphology, JOINTS_PER_LEG, NUM_JOINTS, NUM_LEGS};

/// Default number of preceding frames in a motion window.
pub const DEFAULT_HISTORY: usize = 9;
