//! Binary PGM/PPM writers for boards, states and schedule heat maps.

use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// Writes a binary grayscale PGM ("P5", max value 255).
pub fn write_pgm<P: AsRef<Path>>(path: P, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(pixels)?;
    Ok(())
}

/// Writes a binary RGB PPM ("P6", max value 255).
pub fn write_ppm<P: AsRef<Path>>(path: P, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    debug_assert_eq!(rgb.len(), 3 * width * height);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P6\n{width} {height}\n255\n")?;
    out.write_all(rgb)?;
    Ok(())
}

/// Renders a square grid of scalar cell values in `[-1, 1]` as grayscale
/// cells upscaled by `scale` (value -1 = black, +1 = white).
pub fn render_value_grid<P: AsRef<Path>>(
    path: P,
    cells: &[f64],
    order: usize,
    scale: usize,
) -> Result<()> {
    debug_assert_eq!(cells.len(), order * order);
    let side = order * scale;
    let mut pixels = vec![0u8; side * side];
    for r in 0..order {
        for c in 0..order {
            let v = cells[r * order + c].clamp(-1.0, 1.0);
            let g = ((v + 1.0) / 2.0 * 255.0).round() as u8;
            for pr in 0..scale {
                let row = r * scale + pr;
                let start = row * side + c * scale;
                pixels[start..start + scale].fill(g);
            }
        }
    }
    write_pgm(path, side, side, &pixels)
}
