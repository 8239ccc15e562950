use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("degenerate mesh: {0}")]
    DegenerateMesh(&'static str),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("degenerate point cloud: all points coincide")]
    DegenerateCloud,
    #[error("camera error: {0}")]
    Camera(&'static str),
    #[error("size error: {0}")]
    Size(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("reduction over an empty set")]
    EmptySet,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value in `{0}`")]
    NonFinite(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}
