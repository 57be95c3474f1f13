//! Feature-Gaussian prediction: token head, attribute activations, 3D
//! covariance assembly, and opacity partitioning.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::geometry::Camera;
use crate::nn::{Linear, Module};
use crate::tensor::{Elem, Tape, Tensor};

/// Activation ranges for raw head outputs.
#[derive(Clone, Debug)]
pub struct ActivationConfig {
    /// Offset bound in pixels (tanh amplitude); 4 patch widths by default.
    pub offset_bound: f64,
    /// Base scale in scene units; exp head multiplies it.
    pub scale_base: f64,
    /// Clamp on the raw log-scale before exp.
    pub scale_raw_clamp: f64,
}

impl ActivationConfig {
    /// Defaults tied to patch size and scene extent (far - near).
    pub fn from_scene(patch: usize, near: f64, far: f64) -> ActivationConfig {
        ActivationConfig {
            offset_bound: 4.0 * patch as f64,
            scale_base: (far - near) / 256.0,
            scale_raw_clamp: 5.0,
        }
    }
}

/// Structure-of-arrays view of N feature Gaussians. All attribute tensors are
/// activations on the same tape; partition copies share storage except for
/// the suppressed opacities.
#[derive(Clone)]
pub struct GaussianSet {
    /// N×F pass-through features.
    pub features: Tensor,
    /// N×2 patch-center pixels in the source view (constant).
    pub anchors: Tensor,
    /// N×2 activated offsets, bounded pixels.
    pub offsets: Tensor,
    /// N ray distances in (near, far).
    pub depths: Tensor,
    /// N×4 unit quaternions (w,x,y,z).
    pub quaternions: Tensor,
    /// N×3 positive scene-unit scales.
    pub scales: Tensor,
    /// N opacities in (0,1).
    pub opacities: Tensor,
    /// N×S raw partition logits.
    pub partition_logits: Tensor,
    /// Source view per Gaussian.
    pub source_camera: Arc<Vec<usize>>,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.depths.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn partitions(&self) -> usize {
        self.partition_logits.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Raw head layout per Gaussian: [F features | 2 offset | 1 depth | 4 quat |
/// 3 scale | 1 opacity | S partition logits].
pub fn raw_block_width(feature_dim: usize, partitions: usize) -> usize {
    feature_dim + 2 + 1 + 4 + 3 + 1 + partitions
}

/// Activated attribute bundle produced from a raw N×(block width) tensor.
pub struct Activated {
    pub features: Tensor,
    pub offsets: Tensor,
    pub depths: Tensor,
    pub quaternions: Tensor,
    pub scales: Tensor,
    pub opacities: Tensor,
    pub partition_logits: Tensor,
}

/// Map raw head outputs to valid attribute ranges:
/// offset = bound·tanh, depth = near + (far-near)·sigmoid, opacity = sigmoid,
/// scale = base·exp(clamp), quaternion normalized with an identity fallback.
pub fn activate_attributes(
    tape: &Tape,
    raw: &Tensor,
    feature_dim: usize,
    partitions: usize,
    near: f64,
    far: f64,
    cfg: &ActivationConfig,
) -> Activated {
    let width = raw_block_width(feature_dim, partitions);
    assert_eq!(
        raw.shape().len(),
        2,
        "activate_attributes: raw must be N×{width}, got {:?}",
        raw.shape()
    );
    assert_eq!(raw.shape()[1], width, "raw block width {} != {width}", raw.shape()[1]);
    let n = raw.shape()[0];
    let f = feature_dim;

    let features = tape.slice(raw, 1, 0, f);
    let offsets_raw = tape.slice(raw, 1, f, 2);
    let depth_raw = tape.slice(raw, 1, f + 2, 1);
    let quat_raw = tape.slice(raw, 1, f + 3, 4);
    let scale_raw = tape.slice(raw, 1, f + 7, 3);
    let opacity_raw = tape.slice(raw, 1, f + 10, 1);
    let partition_logits = tape.slice(raw, 1, f + 11, partitions);

    let offsets = tape.scale(&tape.tanh(&offsets_raw), cfg.offset_bound);
    let depths = {
        let s = tape.sigmoid(&depth_raw);
        let span = tape.scale(&s, far - near);
        let base = Tensor::full(raw.dtype(), &[], near);
        tape.reshape(&tape.add(&span, &base), &[n])
    };
    let quaternions = tape.normalize(&quat_raw, 1e-8, Some(0));
    let scales = {
        let clamped = tape.clamp(&scale_raw, -cfg.scale_raw_clamp, cfg.scale_raw_clamp);
        tape.scale(&tape.exp(&clamped), cfg.scale_base)
    };
    let opacities = tape.reshape(&tape.sigmoid(&opacity_raw), &[n]);

    Activated {
        features,
        offsets,
        depths,
        quaternions,
        scales,
        opacities,
        partition_logits,
    }
}

/// Per-token Gaussian head: a single linear projection emitting K raw blocks
/// per token, plus the constant anchor table.
pub struct GaussianHead {
    pub proj: Linear,
    pub k_per_token: usize,
    pub feature_dim: usize,
    pub partitions: usize,
    pub patch: usize,
}

impl GaussianHead {
    pub fn new(
        rng: &mut ChaCha8Rng,
        token_dim: usize,
        k_per_token: usize,
        feature_dim: usize,
        partitions: usize,
        patch: usize,
    ) -> GaussianHead {
        let width = raw_block_width(feature_dim, partitions);
        let mut proj = Linear::new(rng, token_dim, k_per_token * width, true);
        // Spread the K depth biases across (near, far) so the initial
        // Gaussians tile the frustum instead of stacking at one depth, and
        // start quaternions at identity so rotation gradients are live.
        if let Some(bias) = &mut proj.bias {
            let mut b = bias.to_f32_vec();
            for k in 0..k_per_token {
                let base = k * width;
                let frac = (k as f64 + 0.5) / k_per_token as f64;
                let logit = (frac / (1.0 - frac)).ln();
                b[base + feature_dim + 2] = logit as f32;
                b[base + feature_dim + 3] = 1.0; // quaternion w
            }
            *bias = Tensor::from_f32(&[b.len()], b).requires_grad(true);
        }
        GaussianHead {
            proj,
            k_per_token,
            feature_dim,
            partitions,
            patch,
        }
    }

    /// Predict N = L·K activated Gaussians from backbone tokens. Tokens are
    /// view-major row-major; anchors are the originating patch centers.
    pub fn predict(
        &self,
        tape: &Tape,
        tokens: &Tensor,
        cameras: &[Camera],
        cfg: &ActivationConfig,
    ) -> GaussianSet {
        let l = tokens.shape()[0];
        let views = cameras.len();
        assert!(views > 0, "predict: no cameras");
        let (w_img, h_img) = (cameras[0].width, cameras[0].height);
        let p = self.patch;
        let (tw, th) = (w_img / p, h_img / p);
        assert_eq!(
            l,
            views * tw * th,
            "predict: {l} tokens inconsistent with {views} views of {w_img}x{h_img} at patch {p}"
        );
        let near = cameras[0].near;
        let far = cameras[0].far;
        for c in cameras {
            assert_eq!(
                (c.near, c.far),
                (near, far),
                "predict: all source cameras must share near/far"
            );
        }

        let width = raw_block_width(self.feature_dim, self.partitions);
        let n = l * self.k_per_token;
        let raw = self.proj.forward(tape, tokens); // L × K·width
        let raw = tape.reshape(&raw, &[n, width]);
        let act = activate_attributes(
            tape,
            &raw,
            self.feature_dim,
            self.partitions,
            near,
            far,
            cfg,
        );

        // anchor (patch center) and source view per Gaussian
        let centre = (p as f64 - 1.0) / 2.0;
        let mut anchors = vec![0.0f64; n * 2];
        let mut source = vec![0usize; n];
        for v in 0..views {
            for ty in 0..th {
                for tx in 0..tw {
                    let token = (v * th + ty) * tw + tx;
                    for k in 0..self.k_per_token {
                        let g = token * self.k_per_token + k;
                        anchors[g * 2] = tx as f64 * p as f64 + centre;
                        anchors[g * 2 + 1] = ty as f64 * p as f64 + centre;
                        source[g] = v;
                    }
                }
            }
        }
        let anchors = Tensor::from_f64(&[n, 2], anchors).cast(tokens.dtype());

        GaussianSet {
            features: act.features,
            anchors,
            offsets: act.offsets,
            depths: act.depths,
            quaternions: act.quaternions,
            scales: act.scales,
            opacities: act.opacities,
            partition_logits: act.partition_logits,
            source_camera: Arc::new(source),
        }
    }
}

impl Module for GaussianHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.proj.visit(&format!("{prefix}.proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.proj.visit_mut(&format!("{prefix}.proj"), f);
    }
}

/// Copy `g` with opacities suppressed by the s-th softmax partition weight.
/// All other attributes share storage with the original.
pub fn apply_partition(tape: &Tape, g: &GaussianSet, s: usize) -> GaussianSet {
    let parts = g.partitions();
    assert!(s < parts, "apply_partition: index {s} out of range for S={parts}");
    let weights = tape.softmax(&g.partition_logits, 1);
    let w_s = tape.reshape(&tape.slice(&weights, 1, s, 1), &[g.len()]);
    let opacities = tape.mul(&g.opacities, &w_s);
    GaussianSet {
        opacities,
        ..g.clone()
    }
}

// ---------------------------------------------------------------------------
// 3D covariance from scale and rotation (dtype-generic, used by the splat
// kernel and its adjoint).
// ---------------------------------------------------------------------------

/// Σ = R(q) diag(s²) R(q)ᵀ, row-major 3×3.
pub fn covariance3d<T: Elem>(scale: [T; 3], quat: [T; 4]) -> [T; 9] {
    let r = crate::tensor::ops::quat_to_rot(&quat);
    // M = R diag(s)
    let mut m = [T::zero(); 9];
    for i in 0..3 {
        for j in 0..3 {
            m[i * 3 + j] = r[i * 3 + j] * scale[j];
        }
    }
    let mut cov = [T::zero(); 9];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = T::zero();
            for k in 0..3 {
                acc += m[i * 3 + k] * m[j * 3 + k];
            }
            cov[i * 3 + j] = acc;
        }
    }
    cov
}

/// Adjoint of [`covariance3d`]: gradients on scale and quaternion from a
/// full-entry gradient on Σ.
pub fn covariance3d_vjp<T: Elem>(scale: [T; 3], quat: [T; 4], d_cov: &[T; 9]) -> ([T; 3], [T; 4]) {
    let r = crate::tensor::ops::quat_to_rot(&quat);
    let mut m = [T::zero(); 9];
    for i in 0..3 {
        for j in 0..3 {
            m[i * 3 + j] = r[i * 3 + j] * scale[j];
        }
    }
    // Σ = M Mᵀ  =>  dM = (G + Gᵀ) M
    let mut dm = [T::zero(); 9];
    for i in 0..3 {
        for k in 0..3 {
            let mut acc = T::zero();
            for j in 0..3 {
                acc += (d_cov[i * 3 + j] + d_cov[j * 3 + i]) * m[j * 3 + k];
            }
            dm[i * 3 + k] = acc;
        }
    }
    // M = R diag(s)
    let mut d_scale = [T::zero(); 3];
    let mut d_r = [T::zero(); 9];
    for i in 0..3 {
        for j in 0..3 {
            d_scale[j] += dm[i * 3 + j] * r[i * 3 + j];
            d_r[i * 3 + j] = dm[i * 3 + j] * scale[j];
        }
    }
    let d_quat = crate::tensor::ops::quat_to_rot_vjp(&quat, &d_r);
    (d_scale, d_quat)
}
