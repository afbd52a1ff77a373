pub mod commands;
pub mod config;
pub mod estimators;
pub mod expr;
pub mod geometry;
pub mod model;
pub mod numeric;
pub mod stochastics;
pub mod verify;
