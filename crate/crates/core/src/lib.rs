pub mod adapter;
pub mod calibration;
pub mod corpus;
pub mod model;
pub mod router_ops;
pub mod runtime;
pub mod tensor;
