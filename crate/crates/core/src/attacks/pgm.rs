use std::fs;
use std::io::Write;
use std::path::Path;

use crate::nn::Tensor;

/// Binary 8-bit greyscale PGM of a `[0, 1]` image.
pub fn write_pgm(path: &Path, pixels: &[f64], width: usize, height: usize) -> std::io::Result<()> {
    if pixels.len() != width * height {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            format!("{} pixels for a {width}x{height} image", pixels.len()),
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::File::create(path)?.write_all(&out)
}

/// Writes `truth_<i>.pgm` for every true image and `recon_<i>.pgm` for the
/// reconstruction matched to truth `i`; `matched[r]` is that `i` for `recon[r]`.
pub fn dump_attack_images(
    dir: &Path,
    truth: &Tensor,
    recon: &[Vec<f64>],
    matched: &[usize],
    height: usize,
    width: usize,
) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for i in 0..truth.rows() {
        write_pgm(&dir.join(format!("truth_{i}.pgm")), truth.row(i), width, height)?;
    }
    for (r, &i) in recon.iter().zip(matched) {
        write_pgm(&dir.join(format!("recon_{i}.pgm")), r, width, height)?;
    }
    Ok(())
}
