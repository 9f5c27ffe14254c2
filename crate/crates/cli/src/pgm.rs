use std::io::Write;
use std::path::Path;

/// Binary greyscale (P5) image with 8-bit samples.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> std::io::Result<()> {
    assert_eq!(pixels.len(), width * height, "pixel buffer does not match {width}x{height}");
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    f.flush()
}

/// Label map to black (0) / white (255).
pub fn mask_pixels(labels: &[u8]) -> Vec<u8> {
    labels.iter().map(|&l| if l != 0 { 255 } else { 0 }).collect()
}

/// Min–max stretch to 0..=255; a constant image renders black.
pub fn stretch(values: &[f32]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)) * 255.0).round() as u8)
        .collect()
}

/// Values in [0,1] to 0..=255 (clamped).
pub fn unit_pixels(values: &[f64]) -> Vec<u8> {
    values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}
