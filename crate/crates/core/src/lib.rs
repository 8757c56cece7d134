pub mod data;
pub mod eval;
pub mod graph;
pub mod model;
pub mod train;
