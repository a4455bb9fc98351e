//! Bit-exact emulation of an FP8/BF16 mixed-precision transformer training
//! pipeline, with an analytical planner for memory, FLOPs and throughput.

pub mod numerics;
pub mod tensorops;
pub mod model;
pub mod comms;
pub mod optim;
pub mod offload;
pub mod memplan;
