pub(crate) mod broadcast;
pub mod conv;
pub(crate) mod gemm;
pub(crate) mod pool;
