//! Geometry-driven optical/SAR fine-grained retrieval.
//!
//! Everything numeric is generic over [`scalar::Scalar`]; the aliases below
//! fix the scalar to `f64`, which is what training and evaluation use.

pub mod scalar;
pub mod tensor;
pub mod verify;
pub mod imgproc;
pub mod model;
pub mod losses;
pub mod eval;
pub mod synthdata;
pub mod trainer;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = tensor::Graph<f64>;
pub type ParamStore = model::ParamStore<f64>;
pub type GrayImage = imgproc::GrayImage<f64>;
pub type RgbImage = imgproc::RgbImage<f64>;
pub type EmbeddingSet = eval::EmbeddingSet<f64>;
