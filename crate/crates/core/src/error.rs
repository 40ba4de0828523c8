//! Error type shared by the core modules.

use alloc::string::String;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// A tensor/matrix shape contract was violated.
    Shape(String),
    /// A scalar parameter is out of its documented range.
    Param(String),
    /// A mask is not strictly binary or is empty where content is required.
    Mask(String),
    /// A numeric invariant failed (non-finite values, FFT residue, ...).
    Numeric(String),
    /// An ordering precondition failed (e.g. DDIM target step not earlier).
    Order(String),
    /// A caller-supplied precondition failed that fits none of the above.
    Precondition(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Shape(m) => write!(f, "shape error: {m}"),
            CoreError::Param(m) => write!(f, "parameter error: {m}"),
            CoreError::Mask(m) => write!(f, "mask error: {m}"),
            CoreError::Numeric(m) => write!(f, "numeric error: {m}"),
            CoreError::Order(m) => write!(f, "ordering error: {m}"),
            CoreError::Precondition(m) => write!(f, "precondition error: {m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;

macro_rules! bail_shape {
    ($($arg:tt)*) => {
        return Err($crate::error::CoreError::Shape(alloc::format!($($arg)*)))
    };
}
macro_rules! bail_param {
    ($($arg:tt)*) => {
        return Err($crate::error::CoreError::Param(alloc::format!($($arg)*)))
    };
}
macro_rules! bail_mask {
    ($($arg:tt)*) => {
        return Err($crate::error::CoreError::Mask(alloc::format!($($arg)*)))
    };
}

pub(crate) use {bail_mask, bail_param, bail_shape};
