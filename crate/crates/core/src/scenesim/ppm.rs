//! Binary PPM/PGM export for visual inspection.

use super::{DataError, SceneRecord};
use std::fs;
use std::io::Write;
use std::path::Path;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// P6, maxval 255, from H x W x 3 floats in [0, 1].
pub fn write_ppm(path: &Path, rgb: &[f32], w: usize, h: usize) -> Result<(), DataError> {
    assert_eq!(rgb.len(), h * w * 3);
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = rgb.iter().map(|&v| to_u8(v)).collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// P5, maxval 255, from H x W floats in [0, 1].
pub fn write_pgm(path: &Path, grey: &[f32], w: usize, h: usize) -> Result<(), DataError> {
    assert_eq!(grey.len(), h * w);
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = grey.iter().map(|&v| to_u8(v)).collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Writes `scene_<index>_view_<v>.ppm` per camera and
/// `scene_<index>_range.pgm` for the range channel.
pub fn export_ppm(record: &SceneRecord, dir: &Path, index: usize) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    for (v, (img, cam)) in record.images.iter().zip(&record.rig.cameras).enumerate() {
        write_ppm(
            &dir.join(format!("scene_{index:06}_view_{v:02}.ppm")),
            img,
            cam.width,
            cam.height,
        )?;
    }
    let h = record.range_image.height();
    let w = record.range_image.width();
    let range: Vec<f32> = (0..h * w)
        .map(|i| record.range_image.data()[i * 2])
        .collect();
    write_pgm(
        &dir.join(format!("scene_{index:06}_range.pgm")),
        &range,
        w,
        h,
    )?;
    Ok(())
}
