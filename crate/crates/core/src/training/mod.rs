pub mod checkpoint;
pub mod eval;
pub mod gradcheck;
pub mod optim;
pub mod schedule;
pub mod trainer;
