pub mod cli;
pub mod embedstore;
pub mod harness;
pub mod losses;
pub mod manifold;
pub mod nnet;
pub mod samplers;
pub mod synthetic;
pub mod trainer;
