//! Differentiable tile-based splatting of feature Gaussians, with an exact
//! brute-force oracle and an analytic backward pass registered as a single
//! fused tape op.

mod kernels;

pub use kernels::{
    backward_tiles, bin_tiles, forward_oracle, forward_tiles, prepare, Prepared, PixelState,
    RawMap, SplatGrads, SplatInputs, Thresholds, TileLists,
};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::gaussians::GaussianSet;
use crate::geometry::{CamParams, Camera};
use crate::tensor::Backward;
use crate::tensor::{DType, Elem, NodeId, Storage, Tape, Tensor};

static GENERATION: AtomicU64 = AtomicU64::new(1);

/// Splatting thresholds and switches. The defaults are the standard
/// compositing conventions; `alpha_normalize` divides the canvas by
/// accumulated alpha (off by default, exposed as a config switch).
#[derive(Clone, Debug)]
pub struct RasterConfig {
    pub tile_size: usize,
    pub dilation: f64,
    pub alpha_clamp: f64,
    pub alpha_skip: f64,
    pub transmittance_cutoff: f64,
    /// Offset clamp margin in pixels (4 patch widths for patch 8).
    pub offset_margin: f64,
    /// Store per-contribution transmittances instead of re-deriving them
    /// from the saved termination state in backward.
    pub cache_transmittance: bool,
    pub alpha_normalize: bool,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            tile_size: 16,
            dilation: 0.3,
            alpha_clamp: 0.99,
            alpha_skip: 1.0 / 255.0,
            transmittance_cutoff: 1e-4,
            offset_margin: 32.0,
            cache_transmittance: false,
            alpha_normalize: false,
        }
    }
}

impl RasterConfig {
    fn thresholds<T: Elem>(&self) -> Thresholds<T> {
        Thresholds {
            dilation: T::from_f64(self.dilation),
            alpha_clamp: T::from_f64(self.alpha_clamp),
            alpha_skip: T::from_f64(self.alpha_skip),
            cutoff: T::from_f64(self.transmittance_cutoff),
        }
    }
}

/// Saved forward state for one splat call; pairs with the inputs that
/// produced it (guarded by a generation token).
pub struct SplatContext<T: Elem> {
    prep: Prepared<T>,
    tiles: TileLists,
    state: PixelState<T>,
    sources: Vec<CamParams<T>>,
    target: CamParams<T>,
    th: Thresholds<T>,
    width: usize,
    height: usize,
    pub generation: u64,
}

impl<T: Elem> SplatContext<T> {
    pub fn offset_clamp_count(&self) -> usize {
        self.prep.offset_clamps
    }

    pub fn visible(&self) -> usize {
        self.prep.visible()
    }
}

/// Kernel-level forward: project, bin, composite. `target` is the full-res
/// camera; the canvas is `target.{width,height} / r`.
pub fn splat_forward<T: Elem>(
    inputs: &SplatInputs<'_, T>,
    sources: &[Camera],
    target: &Camera,
    r: usize,
    cfg: &RasterConfig,
) -> (RawMap<T>, SplatContext<T>) {
    assert!(
        target.width % r == 0 && target.height % r == 0,
        "canvas divisor {r} does not divide {}x{}",
        target.width,
        target.height
    );
    let width = target.width / r;
    let height = target.height / r;
    let target_canvas = target.rescaled(width, height).expect("proportional canvas");
    let tp: CamParams<T> = target_canvas.to_params();
    let sp: Vec<CamParams<T>> = sources.iter().map(|c| c.to_params()).collect();
    let th = cfg.thresholds::<T>();
    let prep = prepare(inputs, &sp, &tp, &th, T::from_f64(cfg.offset_margin));
    let tiles = bin_tiles(&prep, width, height, cfg.tile_size);
    let (map, state) = forward_tiles(inputs, &prep, &tiles, width, height, &th, cfg.cache_transmittance);
    let ctx = SplatContext {
        prep,
        tiles,
        state,
        sources: sp,
        target: tp,
        th,
        width,
        height,
        generation: GENERATION.fetch_add(1, Ordering::Relaxed),
    };
    (map, ctx)
}

/// Kernel-level backward for a matching forward call.
pub fn splat_backward<T: Elem>(
    ctx: &SplatContext<T>,
    inputs: &SplatInputs<'_, T>,
    grad_values: &[T],
    grad_alpha: Option<&[T]>,
) -> SplatGrads<T> {
    assert_eq!(
        grad_values.len(),
        ctx.width * ctx.height * inputs.feature_dim,
        "grad_values length does not match the forward canvas"
    );
    backward_tiles(
        inputs,
        &ctx.prep,
        &ctx.tiles,
        &ctx.state,
        &ctx.sources,
        &ctx.target,
        &ctx.th,
        grad_values,
        grad_alpha,
        ctx.width,
        ctx.height,
    )
}

/// Brute-force reference: identical math, global depth sort, no tiles.
pub fn oracle_splat<T: Elem>(
    inputs: &SplatInputs<'_, T>,
    sources: &[Camera],
    target: &Camera,
    r: usize,
    cfg: &RasterConfig,
) -> RawMap<T> {
    let width = target.width / r;
    let height = target.height / r;
    let target_canvas = target.rescaled(width, height).expect("proportional canvas");
    let tp: CamParams<T> = target_canvas.to_params();
    let sp: Vec<CamParams<T>> = sources.iter().map(|c| c.to_params()).collect();
    let th = cfg.thresholds::<T>();
    let prep = prepare(inputs, &sp, &tp, &th, T::from_f64(cfg.offset_margin));
    forward_oracle(inputs, &prep, width, height, &th)
}

// ---------------------------------------------------------------------------
// Tape integration: one fused node covering projection + compositing, with
// gradients chained to offsets, depths, quaternions, scales, opacities, and
// features.
// ---------------------------------------------------------------------------

/// Rendered feature canvas. `values` and `alpha` are tape-tracked slices of
/// the fused splat output.
pub struct FeatureMap {
    /// (H/r, W/r, F)
    pub values: Tensor,
    /// (H/r, W/r) accumulated opacity.
    pub alpha: Tensor,
    pub r: usize,
}

enum SavedCtx {
    F32(SplatContext<f32>),
    F64(SplatContext<f64>),
}

struct SplatNode {
    ids: [Option<NodeId>; 6],
    ctx: SavedCtx,
    features: Storage,
    anchors: Storage,
    offsets: Storage,
    depths: Storage,
    quaternions: Storage,
    scales: Storage,
    opacities: Storage,
    source_camera: Arc<Vec<usize>>,
    n: usize,
    feature_dim: usize,
}

impl SplatNode {
    fn run<T: Elem>(
        &self,
        ctx: &SplatContext<T>,
        grad: &[T],
        features: &[T],
        anchors: &[T],
        offsets: &[T],
        depths: &[T],
        quaternions: &[T],
        scales: &[T],
        opacities: &[T],
    ) -> SplatGrads<T> {
        let f = self.feature_dim;
        let pixels = ctx.width * ctx.height;
        // incoming grad is (H, W, F+1): F value channels then alpha
        let mut gv = vec![T::zero(); pixels * f];
        let mut ga = vec![T::zero(); pixels];
        for p in 0..pixels {
            gv[p * f..(p + 1) * f].copy_from_slice(&grad[p * (f + 1)..p * (f + 1) + f]);
            ga[p] = grad[p * (f + 1) + f];
        }
        let inputs = SplatInputs {
            features,
            anchors,
            offsets,
            depths,
            quaternions,
            scales,
            opacities,
            source_camera: &self.source_camera,
            n: self.n,
            feature_dim: f,
        };
        splat_backward(ctx, &inputs, &gv, Some(&ga))
    }
}

impl Backward for SplatNode {
    fn input_ids(&self) -> &[Option<NodeId>] {
        &self.ids
    }

    fn vjp(&self, grad: &Storage) -> Vec<Option<Storage>> {
        macro_rules! pack {
            ($g:expr, $ctor:path) => {{
                let g = $g;
                vec![
                    self.ids[0].map(|_| $ctor(Arc::new(g.features))),
                    self.ids[1].map(|_| $ctor(Arc::new(g.offsets))),
                    self.ids[2].map(|_| $ctor(Arc::new(g.depths))),
                    self.ids[3].map(|_| $ctor(Arc::new(g.quaternions))),
                    self.ids[4].map(|_| $ctor(Arc::new(g.scales))),
                    self.ids[5].map(|_| $ctor(Arc::new(g.opacities))),
                ]
            }};
        }
        match (&self.ctx, grad) {
            (SavedCtx::F32(ctx), Storage::F32(g)) => pack!(
                self.run(
                    ctx,
                    g,
                    self.features.as_f32(),
                    self.anchors.as_f32(),
                    self.offsets.as_f32(),
                    self.depths.as_f32(),
                    self.quaternions.as_f32(),
                    self.scales.as_f32(),
                    self.opacities.as_f32(),
                ),
                Storage::F32
            ),
            (SavedCtx::F64(ctx), Storage::F64(g)) => pack!(
                self.run(
                    ctx,
                    g,
                    self.features.as_f64(),
                    self.anchors.as_f64(),
                    self.offsets.as_f64(),
                    self.depths.as_f64(),
                    self.quaternions.as_f64(),
                    self.scales.as_f64(),
                    self.opacities.as_f64(),
                ),
                Storage::F64
            ),
            _ => panic!("splat: dtype mismatch between saved context and gradient"),
        }
    }

    fn op_name(&self) -> &'static str {
        "splat"
    }
}

/// Splat a Gaussian set onto the `H/r × W/r` canvas of `target`, recorded as
/// one differentiable op. Returns the rendered map; gradients flow to
/// features, offsets, depths, quaternions, scales, and opacities.
pub fn splat_features(
    tape: &Tape,
    g: &GaussianSet,
    sources: &[Camera],
    target: &Camera,
    r: usize,
    cfg: &RasterConfig,
) -> FeatureMap {
    let n = g.len();
    let f = g.feature_dim();
    let dtype = g.features.dtype();

    macro_rules! run {
        ($as_slice:ident, $ctor:path, $saved:path, $ty:ty) => {{
            let inputs = SplatInputs::<$ty> {
                features: g.features.data().$as_slice(),
                anchors: g.anchors.data().$as_slice(),
                offsets: g.offsets.data().$as_slice(),
                depths: g.depths.data().$as_slice(),
                quaternions: g.quaternions.data().$as_slice(),
                scales: g.scales.data().$as_slice(),
                opacities: g.opacities.data().$as_slice(),
                source_camera: &g.source_camera,
                n,
                feature_dim: f,
            };
            let (map, ctx) = splat_forward(&inputs, sources, target, r, cfg);
            // interleave values and alpha into (H, W, F+1)
            let pixels = map.width * map.height;
            let mut data = vec![<$ty>::default(); pixels * (f + 1)];
            for p in 0..pixels {
                data[p * (f + 1)..p * (f + 1) + f]
                    .copy_from_slice(&map.values[p * f..(p + 1) * f]);
                data[p * (f + 1) + f] = map.alpha[p];
            }
            (
                Tensor::from_storage(
                    &[map.height, map.width, f + 1],
                    $ctor(Arc::new(data)),
                ),
                $saved(ctx),
            )
        }};
    }

    let (out, ctx) = match dtype {
        DType::F32 => run!(as_f32, Storage::F32, SavedCtx::F32, f32),
        DType::F64 => run!(as_f64, Storage::F64, SavedCtx::F64, f64),
    };

    let ids = [
        tape.track(&g.features),
        tape.track(&g.offsets),
        tape.track(&g.depths),
        tape.track(&g.quaternions),
        tape.track(&g.scales),
        tape.track(&g.opacities),
    ];
    let node = SplatNode {
        ids,
        ctx,
        features: g.features.data().clone(),
        anchors: g.anchors.data().clone(),
        offsets: g.offsets.data().clone(),
        depths: g.depths.data().clone(),
        quaternions: g.quaternions.data().clone(),
        scales: g.scales.data().clone(),
        opacities: g.opacities.data().clone(),
        source_camera: g.source_camera.clone(),
        n,
        feature_dim: f,
    };
    let out = match tape.record(
        ids.iter().any(|i| i.is_some()),
        Box::new(node),
        out.numel(),
        out.dtype(),
    ) {
        Some(id) => out.with_node(id),
        None => out,
    };

    let mut values = tape.slice(&out, 2, 0, f);
    let h = out.shape()[0];
    let w = out.shape()[1];
    let alpha = tape.reshape(&tape.slice(&out, 2, f, 1), &[h, w]);
    if cfg.alpha_normalize {
        let denom = tape.clamp(&alpha, 1e-4, 1.0);
        let denom = tape.reshape(&denom, &[h, w, 1]);
        // broadcast the single trailing channel over F by explicit concat
        let parts: Vec<Tensor> = (0..f).map(|_| denom.clone()).collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        let denom_f = tape.concat(&refs, 2);
        values = tape.div(&values, &denom_f);
    }
    FeatureMap { values, alpha, r }
}

/// Owned synthetic attribute arrays for tests and benchmarks.
pub struct OwnedSplatInputs<T> {
    pub features: Vec<T>,
    pub anchors: Vec<T>,
    pub offsets: Vec<T>,
    pub depths: Vec<T>,
    pub quaternions: Vec<T>,
    pub scales: Vec<T>,
    pub opacities: Vec<T>,
    pub source_camera: Vec<usize>,
    pub n: usize,
    pub feature_dim: usize,
}

impl<T: Elem> OwnedSplatInputs<T> {
    pub fn as_inputs(&self) -> SplatInputs<'_, T> {
        SplatInputs {
            features: &self.features,
            anchors: &self.anchors,
            offsets: &self.offsets,
            depths: &self.depths,
            quaternions: &self.quaternions,
            scales: &self.scales,
            opacities: &self.opacities,
            source_camera: &self.source_camera,
            n: self.n,
            feature_dim: self.feature_dim,
        }
    }

    /// Random plausible attributes anchored to `sources[0]`'s image plane.
    pub fn random(seed: u64, n: usize, feature_dim: usize, sources: &[Camera]) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cam = &sources[0];
        let extent = cam.far - cam.near;
        let mut o = OwnedSplatInputs {
            features: Vec::with_capacity(n * feature_dim),
            anchors: Vec::with_capacity(n * 2),
            offsets: Vec::with_capacity(n * 2),
            depths: Vec::with_capacity(n),
            quaternions: Vec::with_capacity(n * 4),
            scales: Vec::with_capacity(n * 3),
            opacities: Vec::with_capacity(n),
            source_camera: vec![0; n],
            n,
            feature_dim,
        };
        for _ in 0..n {
            for _ in 0..feature_dim {
                o.features.push(T::from_f64(rng.gen_range(-1.0..1.0)));
            }
            o.anchors.push(T::from_f64(rng.gen_range(0.0..cam.width as f64 - 1.0)));
            o.anchors.push(T::from_f64(rng.gen_range(0.0..cam.height as f64 - 1.0)));
            o.offsets.push(T::from_f64(rng.gen_range(-4.0..4.0)));
            o.offsets.push(T::from_f64(rng.gen_range(-4.0..4.0)));
            o.depths.push(T::from_f64(
                rng.gen_range(cam.near + 0.2 * extent..cam.far - 0.2 * extent),
            ));
            let mut q = [0.0f64; 4];
            loop {
                for v in q.iter_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
                let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-3 {
                    for v in q.iter_mut() {
                        *v /= norm;
                    }
                    break;
                }
            }
            for v in q {
                o.quaternions.push(T::from_f64(v));
            }
            for _ in 0..3 {
                o.scales
                    .push(T::from_f64(extent / 64.0 * (rng.gen_range(-1.2f64..1.2)).exp()));
            }
            o.opacities.push(T::from_f64(rng.gen_range(0.05..0.95)));
        }
        o
    }
}

#[cfg(test)]
mod tests;
