pub mod control;
pub mod dataset;
pub mod geometry;
pub mod plysim;
pub mod preprocess;
pub mod render;
pub mod tinynn;
pub mod training;
