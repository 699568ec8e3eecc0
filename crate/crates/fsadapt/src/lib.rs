//! fsadapt: few-shot multi-label adaptation of a tiny stage-structured
//! vision transformer, with partial freezing and text-embedding-guided
//! classification heads.

pub mod adapt;
pub mod encoder;
pub mod eval;
pub mod rng;
pub mod semantic;
pub mod taskgen;
pub mod tensor;
