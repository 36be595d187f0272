pub mod config;
pub mod dedup;
pub mod evaluation;
pub mod geolocate;
pub mod geometry;
pub mod interface;
pub mod pipeline;
pub mod providers;
pub mod sift;
pub mod store;
pub mod synth;
