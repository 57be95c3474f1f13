//! Feed-forward novel-view synthesis with feature-Gaussian splatting.
//!
//! Input images are patchified and processed by a token backbone; each token
//! predicts free-moving feature Gaussians which are splatted to a feature
//! canvas at the target view, decoded by a local/global attention decoder,
//! and merged across opacity partitions into color or metric depth.
//!
//! Everything differentiable runs on the in-crate tape engine in
//! [`tensor`]; the rasterizer contributes a fused tape op with an analytic
//! backward verified against central differences.

pub mod gaussians;
pub mod geometry;
pub mod nn;
pub mod rasterizer;
pub mod tensor;
