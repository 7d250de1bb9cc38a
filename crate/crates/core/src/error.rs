use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("query ({x:.1}, {y:.1}) um is outside the phantom domain")]
    OutOfDomain { x: f64, y: f64 },

    #[error("calibration is not identifiable: {0}")]
    NonIdentifiable(String),

    #[error("calibration matrix is singular (det = {det:e})")]
    SingularCalibration { det: f64 },

    #[error("image Jacobian is singular (det = {det:e})")]
    SingularJacobian { det: f64 },

    #[error("degenerate scan line: {0}")]
    DegenerateScanLine(&'static str),

    #[error("robot displacement is zero; Jacobian update undefined")]
    ZeroMotion,

    #[error("invalid detection: {0}")]
    InvalidDetection(&'static str),

    #[error("subretinal goal lies above the needle tip")]
    GoalAboveTip,

    #[error("{action} not accepted in phase {phase}")]
    WrongPhase { action: &'static str, phase: String },

    #[error("tool tip coincides with the pivot")]
    TipAtPivot,

    #[error("infeasible trajectory: {0}")]
    Infeasible(String),

    #[error("missing annotation: {0}")]
    MissingAnnotation(&'static str),

    #[error("record format version {found} does not match supported version {expected}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml write error: {0}")]
    TomlSer(#[from] toml::ser::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}
