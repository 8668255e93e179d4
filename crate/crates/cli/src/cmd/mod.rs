pub mod curves;
pub mod eval;
pub mod gen;
pub mod render;
pub mod train;
