pub mod activation;
pub mod conv;
pub(crate) mod elementwise;
pub mod loss;
pub(crate) mod matmul;
pub mod norm;
pub mod pool;
pub(crate) mod reduce;
pub(crate) mod shape;
