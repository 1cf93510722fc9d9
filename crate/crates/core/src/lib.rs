pub mod cutter;
pub mod gazetteer;
pub mod grid;
pub mod jobs;
pub mod manifest;
pub mod raster;
pub mod scaler;
pub mod server;
pub mod store;
