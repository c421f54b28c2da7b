//! Float32 grids and 8-bit grayscale PNG rasters.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;

use plume_core::time::Pollutant;

use crate::error::{CliError, Result};

/// Linear µg/m³ → gray ramp: `min` maps to 0, `max` (and above) to 255.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ColorScale {
    pub pollutant: &'static str,
    pub min_ugm3: f64,
    pub max_ugm3: f64,
}

impl ColorScale {
    pub fn fixed(p: Pollutant) -> Self {
        let max_ugm3 = match p {
            Pollutant::NO2 => 200.0,
            Pollutant::O3 => 240.0,
            Pollutant::PM25 => 75.0,
            Pollutant::PM10 => 150.0,
        };
        Self {
            pollutant: p.name(),
            min_ugm3: 0.0,
            max_ugm3,
        }
    }

    pub fn level(&self, v: f32) -> u8 {
        if !v.is_finite() {
            return 0;
        }
        let t = ((v as f64 - self.min_ugm3) / (self.max_ugm3 - self.min_ugm3)).clamp(0.0, 1.0);
        (t * 255.0).round() as u8
    }
}

/// Row-major little-endian f32, row 0 north.
pub fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn write_png(path: &Path, width: usize, height: usize, data: &[f32], scale: &ColorScale) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let pixels: Vec<u8> = data.iter().map(|&v| scale.level(v)).collect();
    let io = |e: png::EncodingError| CliError::Io(format!("{}: {e}", path.display()));
    let mut w = enc.write_header().map_err(io)?;
    w.write_image_data(&pixels).map_err(io)?;
    w.finish().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_is_linear_and_clamped() {
        let s = ColorScale::fixed(Pollutant::PM25);
        assert_eq!(s.level(0.0), 0);
        assert_eq!(s.level(37.5), 128);
        assert_eq!(s.level(75.0), 255);
        assert_eq!(s.level(500.0), 255);
        assert_eq!(s.level(-3.0), 0);
        assert_eq!(s.level(f32::NAN), 0);
    }

    #[test]
    fn png_has_grid_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let data: Vec<f32> = (0..6 * 4).map(|i| i as f32 * 10.0).collect();
        write_png(&p, 6, 4, &data, &ColorScale::fixed(Pollutant::NO2)).unwrap();
        let dec = png::Decoder::new(std::io::BufReader::new(File::open(&p).unwrap()));
        let r = dec.read_info().unwrap();
        assert_eq!((r.info().width, r.info().height), (6, 4));
    }
}
