//! On-disk formats: RF container, run config, CSV tables, images.

pub mod config;
pub mod image;
pub mod rf;
pub mod tables;

pub use config::{parse_channel_spec, read_config, RunConfig};
pub use image::write_image;
pub use rf::{open_rf, read_rf, write_rf, RfHeader, RfReader, RfWriter};
pub use tables::{
    read_locations, read_scores, read_truth, write_locations, write_scores, write_truth, LocationRecord,
};
