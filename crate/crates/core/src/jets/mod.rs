//! Exact jet arithmetic and adapted coordinates at a point.

pub mod chart;
pub mod poly;

pub use chart::{
    correction_coeffs, correction_coeffs_with, extract_jetdata, extract_jetdata_with, random_jetdata, verify_chart,
    AdaptedChart, AlphaForm, ChartVerification, CoordCorrection, JetData,
};
pub use poly::{mat_det, mat_identity, mat_inverse, mat_mul, Monomial, PolyMat, PolyRing, TruncPoly};
