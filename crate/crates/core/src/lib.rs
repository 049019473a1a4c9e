pub mod camrender;
pub mod cli;
pub mod controller;
pub mod dataset;
pub mod eval;
pub mod policy;
pub mod expert;
pub mod simworld;
pub mod tensor;
pub mod train;
