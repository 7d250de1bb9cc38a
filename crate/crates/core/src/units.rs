//! Pixel/micron conversion factors and fixed image geometry.

/// Microscope image, micrometres per pixel at the retina plane.
pub const MICROSCOPE_UM_PER_PX: f64 = 13.6;
/// B-scan, micrometres per row (along image height / depth).
pub const BSCAN_UM_PER_ROW: f64 = 2.6;
/// B-scan, micrometres per column (along image width / lateral).
pub const BSCAN_UM_PER_COL: f64 = 5.3;
/// Spacing between neighbouring B-scan slices of a volume.
pub const BSCAN_UM_PER_SLICE: f64 = 13.6;

pub const MICROSCOPE_WIDTH: u32 = 640;
pub const MICROSCOPE_HEIGHT: u32 = 480;
pub const BSCAN_COLUMNS: u32 = 512;
pub const BSCAN_ROWS: u32 = 1024;

/// Tip-to-base keypoint spacing enforced by the detectors.
pub const MICROSCOPE_TIP_BASE_PX: f64 = 50.0;
pub const BSCAN_TIP_BASE_PX: f64 = 100.0;

pub const MICROSCOPE_RATE_HZ: f64 = 30.0;
pub const BSCAN_RATE_HZ: f64 = 11.0;

/// Scan length in microscope pixels implied by 512 columns at the B-scan
/// lateral scale.
pub fn default_scan_length_px() -> f64 {
    BSCAN_COLUMNS as f64 * BSCAN_UM_PER_COL / MICROSCOPE_UM_PER_PX
}
