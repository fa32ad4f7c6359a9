pub mod dcmp;
pub mod diffops;
pub mod evalharness;
pub mod gridio;
pub mod metrics;
pub mod synthdata;
pub mod training;
pub mod unetnode;
