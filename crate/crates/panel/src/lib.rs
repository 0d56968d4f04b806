pub mod datasets;
pub mod files;
pub mod gateway;
pub mod runner;
