pub mod eval;
pub mod gradcheck;
pub mod project_debug;
pub mod synth;
pub mod train;
