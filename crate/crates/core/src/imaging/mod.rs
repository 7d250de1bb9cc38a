//! Observation streams: top-down microscope frames and tool-tracking
//! B-scans, plus the perception oracle that reads keypoints and retinal
//! layer profiles back out of them.
//!
//! Rendering is split in two. Geometry and ground-truth annotations are
//! always computed; pixel rasters are only produced in
//! [`RenderMode::Full`], since the controller consumes detections and the
//! batch runner never needs the intensities.

pub mod camera;
pub mod perception;
pub mod raster;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::galvo::{self, GalvoCalibration, ScanLine};
use crate::phantom::{EyePhantom, SceneSnapshot};
use crate::units;

pub use camera::CameraModel;
pub use perception::{
    perceive, perceive_bscan, perceive_microscope, project_tip_to_ilm, track_tool_scanline,
    BScanDetection, MicroscopeDetection, NoiseConfig, PerceptionResult,
};

/// Shaft length used to derive the projected needle direction.
const SHAFT_PROBE_UM: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum RenderMode {
    /// Geometry and annotations only.
    #[default]
    Annotations,
    /// Annotations plus an 8-bit raster.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BScanConfig {
    /// World height imaged on row 0, micrometres.
    pub reference_height_um: f64,
    /// Half-width of the slab around the scan plane in which the needle
    /// tip is visible, micrometres.
    pub needle_visibility_um: f64,
    /// Multiplicative speckle on rendered rasters.
    pub speckle: bool,
}

impl Default for BScanConfig {
    fn default() -> Self {
        Self {
            reference_height_um: 1500.0,
            needle_visibility_um: 15.0,
            speckle: true,
        }
    }
}

/// Imaging hardware: the microscope camera, the physical galvo mirror model
/// (hidden from the controller) and the B-scan depth reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub camera: CameraModel,
    pub galvo_truth: GalvoCalibration,
    pub bscan: BScanConfig,
}

impl Default for Rig {
    fn default() -> Self {
        Self {
            camera: CameraModel::default(),
            galvo_truth: galvo::default_true_galvo(),
            bscan: BScanConfig::default(),
        }
    }
}

impl Rig {
    pub fn row_of_height(&self, z: f64) -> f64 {
        (self.bscan.reference_height_um - z) / units::BSCAN_UM_PER_ROW
    }

    pub fn height_of_row(&self, row: f64) -> f64 {
        self.bscan.reference_height_um - row * units::BSCAN_UM_PER_ROW
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroscopeAnnotations {
    pub tip_px: Vector2<f64>,
    pub base_px: Vector2<f64>,
    pub tool_visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroscopeFrame {
    pub width: u32,
    pub height: u32,
    pub timestamp: f64,
    pub frame_id: u64,
    pub camera: CameraModel,
    pub annotations: MicroscopeAnnotations,
    #[serde(skip)]
    pub pixels: Option<image::GrayImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BScanAnnotations {
    /// (column, row) of the needle tip when it lies in the scan slab.
    pub tip_px: Option<Vector2<f64>>,
    pub base_px: Option<Vector2<f64>>,
    /// Distance of the tip from the scan plane, micrometres.
    pub tip_offset_um: f64,
    /// Signed tip offset along the scan normal, microscope pixels.
    pub tip_normal_offset_px: f64,
    pub ilm_rows: Vec<Option<f64>>,
    pub rpe_rows: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BScanFrame {
    pub width: u32,
    pub height: u32,
    pub timestamp: f64,
    pub frame_id: u64,
    pub scan_line: ScanLine,
    pub annotations: BScanAnnotations,
    #[serde(skip)]
    pub pixels: Option<image::GrayImage>,
}

fn microscope_keypoints(scene: &SceneSnapshot, cam: &CameraModel) -> (Vector2<f64>, Vector2<f64>) {
    let tip = cam.project(&scene.tool.tip);
    let up = cam.project(&scene.tool.shaft_point(SHAFT_PROBE_UM));
    let dir = (up - tip).try_normalize(1e-12).unwrap_or_else(|| Vector2::new(-1.0, 0.0));
    (tip, tip + dir * units::MICROSCOPE_TIP_BASE_PX)
}

/// Render the top-down view. Frames whose tip falls outside the image are
/// flagged `tool_visible = false`.
pub fn render_microscope(scene: &SceneSnapshot, cam: &CameraModel, mode: RenderMode) -> MicroscopeFrame {
    let (tip_px, base_px) = microscope_keypoints(scene, cam);
    let annotations = MicroscopeAnnotations {
        tool_visible: CameraModel::in_frame(&tip_px),
        tip_px,
        base_px,
    };
    let pixels = match mode {
        RenderMode::Annotations => None,
        RenderMode::Full => Some(raster::microscope_raster(scene, cam)),
    };
    MicroscopeFrame {
        width: units::MICROSCOPE_WIDTH,
        height: units::MICROSCOPE_HEIGHT,
        timestamp: scene.sim_time,
        frame_id: scene.tool.frame_id,
        camera: *cam,
        annotations,
        pixels,
    }
}

/// Where the scan physically lands: the laser image position as an affine
/// function of the scan parameter, `A(t) = origin + t * tangent`.
#[derive(Debug, Clone, Copy)]
pub struct BScanGeometry {
    pub line: ScanLine,
    pub origin: Vector2<f64>,
    pub tangent: Vector2<f64>,
}

impl BScanGeometry {
    pub fn new(line: &ScanLine, calib: &GalvoCalibration, rig: &Rig) -> Result<Self> {
        let v0 = galvo::voltage_for_position(calib, &line.center)?;
        let dv = galvo::voltage_tangent(calib, &line.tangent)?;
        Ok(Self {
            line: *line,
            origin: rig.galvo_truth.forward(&v0),
            tangent: rig.galvo_truth.r * dv,
        })
    }

    pub fn laser_px(&self, column: usize) -> Vector2<f64> {
        self.origin + self.tangent * self.line.column_parameter(column)
    }

    /// Fractional column of the scan point closest to image position `px`
    /// and the perpendicular pixel distance to it (signed along the normal).
    pub fn locate(&self, px: &Vector2<f64>) -> (f64, f64) {
        let rel = px - self.origin;
        let t = rel.dot(&self.tangent) / self.tangent.norm_squared();
        let foot = self.origin + self.tangent * t;
        let normal = Vector2::new(-self.tangent.y, self.tangent.x).normalize();
        (self.line.column_of_parameter(t), (px - foot).dot(&normal))
    }

    /// (column, row) of a world point, with its signed normal offset in px.
    pub fn image_of(&self, p: &Vector3<f64>, rig: &Rig) -> (Vector2<f64>, f64) {
        let (col, off) = self.locate(&rig.camera.project(p));
        (Vector2::new(col, rig.row_of_height(p.z)), off)
    }
}

/// Per-column ILM and RPE rows; `None` where the A-scan misses the phantom.
pub fn layer_profiles(
    phantom: &EyePhantom,
    geom: &BScanGeometry,
    rig: &Rig,
) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
    let n = geom.line.n_columns;
    let mut ilm = Vec::with_capacity(n);
    let mut rpe = Vec::with_capacity(n);
    let f = |xy: &Vector2<f64>| phantom.ilm_height_unchecked(xy);
    let g = |xy: &Vector2<f64>| phantom.ilm_gradient(xy);
    for k in 0..n {
        let hit = rig.camera.intersect_height_field(&geom.laser_px(k), f, g);
        if phantom.contains(&hit.xy()) && hit.z.is_finite() {
            let row = rig.row_of_height(hit.z);
            ilm.push(Some(row));
            rpe.push(Some(row + phantom.thickness() / units::BSCAN_UM_PER_ROW));
        } else {
            ilm.push(None);
            rpe.push(None);
        }
    }
    (ilm, rpe)
}

/// Render the B-scan acquired along `line`, whose mirror voltages come from
/// the fitted `calib` and whose laser path follows the rig's true mirrors.
pub fn render_bscan(
    scene: &SceneSnapshot,
    line: &ScanLine,
    calib: &GalvoCalibration,
    rig: &Rig,
    mode: RenderMode,
) -> Result<BScanFrame> {
    line.validate()?;
    let geom = BScanGeometry::new(line, calib, rig)?;
    let phantom = &scene.phantom;

    let centre_hit = rig.camera.intersect_height_field(
        &geom.laser_px(line.n_columns / 2),
        |xy| phantom.ilm_height_unchecked(xy),
        |xy| phantom.ilm_gradient(xy),
    );
    if !phantom.contains(&centre_hit.xy()) {
        let xy = centre_hit.xy();
        return Err(Error::OutOfDomain { x: xy.x, y: xy.y });
    }

    let (ilm_rows, rpe_rows) = layer_profiles(phantom, &geom, rig);

    let (tip_img, tip_normal_offset_px) = geom.image_of(&scene.tool.tip, rig);
    let (base_img, _) = geom.image_of(&scene.tool.shaft_point(SHAFT_PROBE_UM), rig);
    let tip_offset_um = tip_normal_offset_px.abs() * rig.camera.um_per_px;
    let in_image = tip_img.x >= -0.5
        && tip_img.x <= line.n_columns as f64 - 0.5
        && tip_img.y >= 0.0
        && tip_img.y < units::BSCAN_ROWS as f64;
    let visible = in_image && tip_offset_um <= rig.bscan.needle_visibility_um;
    let (tip_px, base_px) = if visible {
        let dir = (base_img - tip_img)
            .try_normalize(1e-12)
            .unwrap_or_else(|| Vector2::new(0.0, -1.0));
        (Some(tip_img), Some(tip_img + dir * units::BSCAN_TIP_BASE_PX))
    } else {
        (None, None)
    };

    let annotations = BScanAnnotations {
        tip_px,
        base_px,
        tip_offset_um,
        tip_normal_offset_px,
        ilm_rows,
        rpe_rows,
    };
    let pixels = match mode {
        RenderMode::Annotations => None,
        RenderMode::Full => Some(raster::bscan_raster(scene, &geom, &annotations, rig)),
    };
    Ok(BScanFrame {
        width: line.n_columns as u32,
        height: units::BSCAN_ROWS,
        timestamp: scene.sim_time,
        frame_id: scene.tool.frame_id,
        scan_line: *line,
        annotations,
        pixels,
    })
}

/// Stack of parallel B-scans around `line`, slice `n_slices / 2` being the
/// line itself; neighbouring slices are `spacing_px` apart along the scan
/// normal.
pub fn acquire_volume(
    scene: &SceneSnapshot,
    line: &ScanLine,
    calib: &GalvoCalibration,
    rig: &Rig,
    n_slices: usize,
    spacing_px: f64,
) -> Result<Vec<BScanFrame>> {
    let centre = (n_slices / 2) as f64;
    (0..n_slices)
        .map(|j| {
            let slice_line = line.offset((j as f64 - centre) * spacing_px);
            render_bscan(scene, &slice_line, calib, rig, RenderMode::Annotations)
        })
        .collect()
}

/// Slice index and tip pixel of the slice that images the tip most
/// centrally.
pub fn locate_tip_in_volume(volume: &[BScanFrame]) -> Option<(usize, Vector2<f64>)> {
    volume
        .iter()
        .enumerate()
        .filter_map(|(j, f)| f.annotations.tip_px.map(|tip| (j, tip, f.annotations.tip_offset_um)))
        .min_by(|a, b| a.2.total_cmp(&b.2))
        .map(|(j, tip, _)| (j, tip))
}
