pub mod data;
pub mod harness;
pub mod library;
pub mod model;
pub mod program;
pub mod tensor;
pub mod transformer;
