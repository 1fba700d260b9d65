//! File formats: PNM rasters, raw float rasters, ASCII PLY models, and
//! key=value config files.

pub mod kv;
pub mod ply;
pub mod pnm;

pub use ply::{read_ply, write_ply};
pub use pnm::{
    read_f32_raster, read_pgm16, read_ppm, write_f32_raster, write_pgm16, write_ppm,
};
