pub mod checkpoint;
pub mod ir_eval;
pub mod model;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;
