pub mod error;
pub mod gradcheck;
pub mod graphcore;
pub mod heads;
pub mod hungarian;
pub mod metrics;
pub mod mecl;
pub mod model;
pub mod nn;
pub mod optim;
pub mod psga;
pub mod sgbtrans;
pub mod synthdata;
pub mod trainer;
pub mod tensor;
pub mod textdiff;
