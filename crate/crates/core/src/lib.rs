pub mod numerics;
pub mod diffusion;
pub mod conditioning;
pub mod model;
pub mod training;
pub mod data;
pub mod sampling;
pub mod io;
pub mod metrics;
pub mod cli;
