pub mod analysis;
pub mod attack;
pub mod autodiff;
pub mod data;
pub mod fl;
pub mod harness;
pub mod models;
pub mod seed;
