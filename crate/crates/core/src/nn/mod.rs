//! Dense networks, a gradient tape and first-order optimizers.

mod net;
mod optim;
mod tape;

pub use net::{
    log_std_bounds, rows_to_matrix, Activation, DenseNet, InitSpec, Linear, OutputHead, MAX_STD, MIN_STD,
    NET_FORMAT, NET_FORMAT_VERSION,
};
pub use optim::{Optimizer, OptimizerConfig, UpdateRule};
pub use tape::{Gradients, Param, ParamId, Tape, Var};
