pub mod cli;
pub mod datagen;
pub mod eval;
pub mod geometry;
pub mod mechanics;
pub mod model;
pub mod optics;
pub mod pipeline;
