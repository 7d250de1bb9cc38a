//! 8-bit raster synthesis and PNG export.
//!
//! Intensities are schematic: a shaded fundus with a vessel-like texture in
//! the microscope view, bright ILM/RPE bands and a needle streak in the
//! B-scan. Nothing downstream reads these pixels; they exist for export,
//! replay and the live view.

use image::{GrayImage, Luma};
use nalgebra::Vector2;
use rand::Rng;

use super::{BScanAnnotations, BScanGeometry, CameraModel, Rig};
use crate::error::Result;
use crate::phantom::SceneSnapshot;
use crate::rng;
use crate::units;

const NEEDLE_LENGTH_UM: f64 = 6000.0;

pub(crate) fn microscope_raster(scene: &SceneSnapshot, cam: &CameraModel) -> GrayImage {
    let phantom = &scene.phantom;
    let w = units::MICROSCOPE_WIDTH;
    let h = units::MICROSCOPE_HEIGHT;
    let mut img = GrayImage::new(w, h);
    let seed_phase = (phantom.seed % 97) as f64 * 0.37;
    for y in 0..h {
        for x in 0..w {
            let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let hit = cam.intersect_height_field(
                &px,
                |xy| phantom.ilm_height_unchecked(xy),
                |xy| phantom.ilm_gradient(xy),
            );
            let xy = hit.xy();
            let value = if phantom.contains(&xy) {
                let g = phantom.ilm_gradient(&xy);
                let shade = 1.0 / (1.0 + g.norm_squared()).sqrt();
                let vessel = ((xy.x * 0.004 + seed_phase).sin() * (xy.y * 0.003).cos()
                    + (0.0025 * (xy.x + xy.y)).sin())
                .abs();
                let vessel = if vessel < 0.08 { 0.55 } else { 1.0 };
                150.0 * shade * vessel + 30.0
            } else {
                15.0
            };
            img.put_pixel(x, y, Luma([value.clamp(0.0, 255.0) as u8]));
        }
    }
    let tip = cam.project(&scene.tool.tip);
    let far = cam.project(&scene.tool.shaft_point(NEEDLE_LENGTH_UM));
    draw_segment(&mut img, tip, far, 2.5, 235);
    img
}

pub(crate) fn bscan_raster(
    scene: &SceneSnapshot,
    geom: &BScanGeometry,
    ann: &BScanAnnotations,
    rig: &Rig,
) -> GrayImage {
    let cols = geom.line.n_columns as u32;
    let rows = units::BSCAN_ROWS;
    let mut img = GrayImage::new(cols, rows);
    let mut speckle = rng::substream(scene.phantom.seed, "raster.speckle", scene.tool.frame_id);
    let band = |row: f64, centre: f64, half: f64| (row - centre).abs() <= half;
    for c in 0..cols {
        let ilm = ann.ilm_rows[c as usize];
        let rpe = ann.rpe_rows[c as usize];
        for r in 0..rows {
            let row = r as f64;
            let mut v: f64 = match (ilm, rpe) {
                (Some(i), Some(p)) => {
                    if band(row, i, 2.0) {
                        225.0
                    } else if band(row, p, 3.0) {
                        205.0
                    } else if row > i && row < p {
                        // Faint intra-retinal layering.
                        70.0 + 25.0 * ((row - i) / (p - i) * std::f64::consts::PI * 4.0).sin().abs()
                    } else if row > p {
                        (110.0 - 0.4 * (row - p)).max(20.0)
                    } else {
                        12.0
                    }
                }
                _ => 8.0,
            };
            if rig.bscan.speckle {
                v *= speckle.random_range(0.75..1.25);
            }
            img.put_pixel(c, r, Luma([v.clamp(0.0, 255.0) as u8]));
        }
    }
    if let (Some(tip), Some(base)) = (ann.tip_px, ann.base_px) {
        let dir = (base - tip).normalize();
        draw_segment(&mut img, tip, tip + dir * 2000.0, 2.0, 255);
    }
    img
}

fn draw_segment(img: &mut GrayImage, a: Vector2<f64>, b: Vector2<f64>, half_width: f64, value: u8) {
    let (w, h) = img.dimensions();
    let len = (b - a).norm();
    let steps = (len.ceil() as usize * 2).max(1);
    let r = half_width.ceil() as i64;
    for s in 0..=steps {
        let p = a + (b - a) * (s as f64 / steps as f64);
        for dy in -r..=r {
            for dx in -r..=r {
                if ((dx * dx + dy * dy) as f64).sqrt() > half_width {
                    continue;
                }
                let x = p.x.floor() as i64 + dx;
                let y = p.y.floor() as i64 + dy;
                if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
                    img.put_pixel(x as u32, y as u32, Luma([value]));
                }
            }
        }
    }
}

/// Encode a raster as PNG bytes.
pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}
