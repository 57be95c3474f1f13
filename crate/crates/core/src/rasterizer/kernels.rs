//! Dtype-generic splatting kernels: projection prep, tile binning,
//! front-to-back compositing, and the analytic backward.
//!
//! Numerical contract shared by the tile path and the oracle: identical alpha
//! evaluation, identical skip and cutoff thresholds, identical per-pixel
//! traversal order (ascending camera-z, Gaussian index as tie-break). Tile
//! bounding boxes cover the entire alpha >= skip-threshold support, so the
//! two paths composite exactly the same contribution sequences.

use rayon::prelude::*;

use crate::gaussians::{covariance3d, covariance3d_vjp};
use crate::geometry::{project_gaussian, project_gaussian_vjp, ray_point, ray_point_vjp, CamParams, Projected, RayPoint};
use crate::tensor::Elem;

/// Threshold constants lowered to the kernel element type.
#[derive(Clone, Debug)]
pub struct Thresholds<T> {
    pub dilation: T,
    pub alpha_clamp: T,
    pub alpha_skip: T,
    pub cutoff: T,
}

/// Borrowed per-Gaussian attribute arrays.
pub struct SplatInputs<'a, T> {
    pub features: &'a [T],
    pub anchors: &'a [T],
    pub offsets: &'a [T],
    pub depths: &'a [T],
    pub quaternions: &'a [T],
    pub scales: &'a [T],
    pub opacities: &'a [T],
    pub source_camera: &'a [usize],
    pub n: usize,
    pub feature_dim: usize,
}

/// Per-visible-Gaussian screen-space data, sorted by (z_cam, index).
pub struct Prepared<T> {
    /// Original Gaussian index per sorted slot.
    pub index: Vec<usize>,
    pub mean: Vec<[T; 2]>,
    /// Packed symmetric inverse covariance (m00, m01, m11).
    pub conic: Vec<[T; 3]>,
    pub z: Vec<T>,
    pub opacity: Vec<T>,
    /// Conservative pixel radius of the alpha >= skip support.
    pub radius: Vec<T>,
    pub proj: Vec<Projected<T>>,
    pub ray: Vec<RayPoint<T>>,
    pub cov3: Vec<[T; 9]>,
    /// Offset-margin clamp events (debug counter).
    pub offset_clamps: usize,
    /// Margin clamp flags per visible Gaussian (x, y).
    pub offset_clamped: Vec<[bool; 2]>,
}

impl<T> Prepared<T> {
    pub fn visible(&self) -> usize {
        self.index.len()
    }
}

/// Project every Gaussian, cull against the target near plane, and sort by
/// ascending camera-z with the Gaussian index as deterministic tie-break.
pub fn prepare<T: Elem>(
    inputs: &SplatInputs<'_, T>,
    sources: &[CamParams<T>],
    target: &CamParams<T>,
    th: &Thresholds<T>,
    offset_margin: T,
) -> Prepared<T> {
    struct Vis<T> {
        index: usize,
        mean: [T; 2],
        conic: [T; 3],
        z: T,
        opacity: T,
        radius: T,
        proj: Projected<T>,
        ray: RayPoint<T>,
        cov3: [T; 9],
        clamped: [bool; 2],
    }

    let f = inputs.feature_dim;
    debug_assert_eq!(inputs.features.len(), inputs.n * f);
    let items: Vec<Option<Vis<T>>> = (0..inputs.n)
        .into_par_iter()
        .map(|i| {
            let src = &sources[inputs.source_camera[i]];
            let mut ox = inputs.offsets[i * 2];
            let mut oy = inputs.offsets[i * 2 + 1];
            let cx = ox.max(-offset_margin).min(offset_margin);
            let cy = oy.max(-offset_margin).min(offset_margin);
            let clamped = [cx != ox, cy != oy];
            ox = cx;
            oy = cy;
            let px = inputs.anchors[i * 2] + ox;
            let py = inputs.anchors[i * 2 + 1] + oy;
            let ray = ray_point(src, px, py, inputs.depths[i]);
            let scale = [
                inputs.scales[i * 3],
                inputs.scales[i * 3 + 1],
                inputs.scales[i * 3 + 2],
            ];
            let quat = [
                inputs.quaternions[i * 4],
                inputs.quaternions[i * 4 + 1],
                inputs.quaternions[i * 4 + 2],
                inputs.quaternions[i * 4 + 3],
            ];
            let cov3 = covariance3d(scale, quat);
            let proj = project_gaussian(target, ray.position, &cov3, th.dilation)?;
            let det = proj.cov[0] * proj.cov[3] - proj.cov[1] * proj.cov[2];
            if det <= T::zero() {
                return None;
            }
            let inv_det = T::one() / det;
            let conic = [
                proj.cov[3] * inv_det,
                -proj.cov[1] * inv_det,
                proj.cov[0] * inv_det,
            ];
            // support radius: lambda_max of cov2d, q* covering alpha >= skip
            let half = T::from_f64(0.5);
            let mid = (proj.cov[0] + proj.cov[3]) * half;
            let d2 = (proj.cov[0] - proj.cov[3]) * half;
            let lam = mid + (d2 * d2 + proj.cov[1] * proj.cov[2]).max(T::zero()).sqrt();
            let o = inputs.opacities[i];
            let radius = if th.alpha_skip <= T::zero() {
                // no skip threshold: support is unbounded, bin everywhere
                T::infinity()
            } else {
                let nine = T::from_f64(9.0);
                let qstar = if o > th.alpha_skip {
                    let two = T::from_f64(2.0);
                    nine.max(two * (o / th.alpha_skip).ln())
                } else {
                    nine
                };
                T::from_f64(1.05) * (qstar * lam.max(T::zero())).sqrt()
            };
            Some(Vis {
                index: i,
                mean: proj.mean,
                conic,
                z: proj.z_cam,
                opacity: o,
                radius,
                proj,
                ray,
                cov3,
                clamped,
            })
        })
        .collect();

    let mut vis: Vec<Vis<T>> = items.into_iter().flatten().collect();
    vis.sort_by(|a, b| {
        a.z.partial_cmp(&b.z)
            .expect("non-finite camera depth in sort")
            .then(a.index.cmp(&b.index))
    });

    let mut prep = Prepared {
        index: Vec::with_capacity(vis.len()),
        mean: Vec::with_capacity(vis.len()),
        conic: Vec::with_capacity(vis.len()),
        z: Vec::with_capacity(vis.len()),
        opacity: Vec::with_capacity(vis.len()),
        radius: Vec::with_capacity(vis.len()),
        proj: Vec::with_capacity(vis.len()),
        ray: Vec::with_capacity(vis.len()),
        cov3: Vec::with_capacity(vis.len()),
        offset_clamps: 0,
        offset_clamped: Vec::with_capacity(vis.len()),
    };
    for v in vis {
        if v.clamped[0] || v.clamped[1] {
            prep.offset_clamps += 1;
        }
        prep.index.push(v.index);
        prep.mean.push(v.mean);
        prep.conic.push(v.conic);
        prep.z.push(v.z);
        prep.opacity.push(v.opacity);
        prep.radius.push(v.radius);
        prep.proj.push(v.proj);
        prep.ray.push(v.ray);
        prep.cov3.push(v.cov3);
        prep.offset_clamped.push(v.clamped);
    }
    prep
}

/// Per-tile slot lists (indices into the sorted `Prepared` arrays).
pub struct TileLists {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub lists: Vec<Vec<u32>>,
}

/// Bin a prepared set into tiles. Each Gaussian lands in every tile its
/// bounding box overlaps; lists inherit the global (z, index) order.
pub fn bin_tiles<T: Elem>(
    prep: &Prepared<T>,
    width: usize,
    height: usize,
    tile_size: usize,
) -> TileLists {
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for slot in 0..prep.visible() {
        let m = prep.mean[slot];
        let r = prep.radius[slot].into_f64();
        let (mx, my) = (m[0].into_f64(), m[1].into_f64());
        // pixel centers are at integer coordinates
        let x0 = (mx - r).floor().max(0.0) as usize;
        let y0 = (my - r).floor().max(0.0) as usize;
        if mx + r < 0.0 || my + r < 0.0 || x0 >= width || y0 >= height {
            continue;
        }
        let x1 = ((mx + r).ceil() as usize).min(width - 1);
        let y1 = ((my + r).ceil() as usize).min(height - 1);
        for ty in (y0 / tile_size)..=(y1 / tile_size) {
            for tx in (x0 / tile_size)..=(x1 / tile_size) {
                lists[ty * tiles_x + tx].push(slot as u32);
            }
        }
    }
    TileLists {
        tile_size,
        tiles_x,
        tiles_y,
        lists,
    }
}

#[inline]
fn eval_alpha<T: Elem>(mean: [T; 2], conic: [T; 3], opacity: T, px: T, py: T, clamp: T) -> (T, T, bool) {
    let dx = px - mean[0];
    let dy = py - mean[1];
    let two = T::from_f64(2.0);
    let q = conic[0] * dx * dx + two * conic[1] * dx * dy + conic[2] * dy * dy;
    let half = T::from_f64(0.5);
    let sigma = (-half * q).exp();
    let raw = opacity * sigma;
    if raw > clamp {
        (sigma, clamp, true)
    } else {
        (sigma, raw, false)
    }
}

/// Rendered canvas plus the per-pixel state the backward pass needs.
pub struct RawMap<T> {
    pub width: usize,
    pub height: usize,
    pub feature_dim: usize,
    /// H×W×F composited features.
    pub values: Vec<T>,
    /// H×W accumulated opacity (1 - final transmittance).
    pub alpha: Vec<T>,
}

pub struct PixelState<T> {
    /// Exclusive end position in the pixel's tile list.
    pub end: Vec<u32>,
    pub t_final: Vec<T>,
    /// Full-cache mode: (slot-in-tile-list, transmittance before) pairs.
    pub cached: Option<Vec<Vec<(u32, T)>>>,
}

/// Tile-parallel forward compositing. Deterministic for any thread count:
/// tiles own disjoint pixels and are composited sequentially inside.
pub fn forward_tiles<T: Elem>(
    inputs: &SplatInputs<'_, T>,
    prep: &Prepared<T>,
    tiles: &TileLists,
    width: usize,
    height: usize,
    th: &Thresholds<T>,
    cache_transmittance: bool,
) -> (RawMap<T>, PixelState<T>) {
    let f = inputs.feature_dim;
    let ts = tiles.tile_size;

    struct TileOut<T> {
        values: Vec<T>,
        alpha: Vec<T>,
        end: Vec<u32>,
        t_final: Vec<T>,
        cached: Option<Vec<Vec<(u32, T)>>>,
    }

    let tile_results: Vec<TileOut<T>> = (0..tiles.lists.len())
        .into_par_iter()
        .map(|tid| {
            let tx = tid % tiles.tiles_x;
            let ty = tid / tiles.tiles_x;
            let x0 = tx * ts;
            let y0 = ty * ts;
            let w = ts.min(width - x0);
            let h = ts.min(height - y0);
            let list = &tiles.lists[tid];
            let mut out = TileOut {
                values: vec![T::zero(); w * h * f],
                alpha: vec![T::zero(); w * h],
                end: vec![0u32; w * h],
                t_final: vec![T::one(); w * h],
                cached: cache_transmittance.then(|| vec![Vec::new(); w * h]),
            };
            for py in 0..h {
                for px in 0..w {
                    let pixel = py * w + px;
                    let fx = T::from_f64((x0 + px) as f64);
                    let fy = T::from_f64((y0 + py) as f64);
                    let mut t = T::one();
                    let mut end = list.len() as u32;
                    for (pos, &slot) in list.iter().enumerate() {
                        let s = slot as usize;
                        let (_sigma, alpha, _clamped) = eval_alpha(
                            prep.mean[s],
                            prep.conic[s],
                            prep.opacity[s],
                            fx,
                            fy,
                            th.alpha_clamp,
                        );
                        if alpha < th.alpha_skip {
                            continue;
                        }
                        if let Some(c) = out.cached.as_mut() {
                            c[pixel].push((pos as u32, t));
                        }
                        let w_i = alpha * t;
                        let g = prep.index[s];
                        let dst = &mut out.values[pixel * f..(pixel + 1) * f];
                        let src = &inputs.features[g * f..(g + 1) * f];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += v * w_i;
                        }
                        t = t * (T::one() - alpha);
                        if t < th.cutoff {
                            end = pos as u32 + 1;
                            break;
                        }
                    }
                    out.end[pixel] = end;
                    out.t_final[pixel] = t;
                    out.alpha[pixel] = T::one() - t;
                }
            }
            out
        })
        .collect();

    // stitch tile-local buffers into the canvas (fixed tile order)
    let mut map = RawMap {
        width,
        height,
        feature_dim: f,
        values: vec![T::zero(); width * height * f],
        alpha: vec![T::zero(); width * height],
    };
    let mut state = PixelState {
        end: vec![0u32; width * height],
        t_final: vec![T::one(); width * height],
        cached: cache_transmittance.then(|| vec![Vec::new(); width * height]),
    };
    for (tid, tile) in tile_results.into_iter().enumerate() {
        let tx = tid % tiles.tiles_x;
        let ty = tid / tiles.tiles_x;
        let x0 = tx * ts;
        let y0 = ty * ts;
        let w = ts.min(width - x0);
        let h = ts.min(height - y0);
        for py in 0..h {
            for px in 0..w {
                let src = py * w + px;
                let dst = (y0 + py) * width + (x0 + px);
                map.values[dst * f..(dst + 1) * f]
                    .copy_from_slice(&tile.values[src * f..(src + 1) * f]);
                map.alpha[dst] = tile.alpha[src];
                state.end[dst] = tile.end[src];
                state.t_final[dst] = tile.t_final[src];
                if let (Some(sc), Some(tc)) = (state.cached.as_mut(), tile.cached.as_ref()) {
                    sc[dst] = tc[src].clone();
                }
            }
        }
    }
    (map, state)
}

/// Exact per-pixel reference: global sorted traversal over every visible
/// Gaussian, no tiles. Same alpha clamp, skip threshold, and transmittance
/// cutoff as the tile path.
pub fn forward_oracle<T: Elem>(
    inputs: &SplatInputs<'_, T>,
    prep: &Prepared<T>,
    width: usize,
    height: usize,
    th: &Thresholds<T>,
) -> RawMap<T> {
    let f = inputs.feature_dim;
    let mut map = RawMap {
        width,
        height,
        feature_dim: f,
        values: vec![T::zero(); width * height * f],
        alpha: vec![T::zero(); width * height],
    };
    for py in 0..height {
        for px in 0..width {
            let pixel = py * width + px;
            let fx = T::from_f64(px as f64);
            let fy = T::from_f64(py as f64);
            let mut t = T::one();
            for s in 0..prep.visible() {
                let (_sigma, alpha, _clamped) = eval_alpha(
                    prep.mean[s],
                    prep.conic[s],
                    prep.opacity[s],
                    fx,
                    fy,
                    th.alpha_clamp,
                );
                if alpha < th.alpha_skip {
                    continue;
                }
                let w_i = alpha * t;
                let g = prep.index[s];
                let dst = &mut map.values[pixel * f..(pixel + 1) * f];
                let src = &inputs.features[g * f..(g + 1) * f];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v * w_i;
                }
                t = t * (T::one() - alpha);
                if t < th.cutoff {
                    break;
                }
            }
            map.alpha[pixel] = T::one() - t;
        }
    }
    map
}

/// Gradients w.r.t. the raw Gaussian attributes.
pub struct SplatGrads<T> {
    pub features: Vec<T>,
    pub offsets: Vec<T>,
    pub depths: Vec<T>,
    pub quaternions: Vec<T>,
    pub scales: Vec<T>,
    pub opacities: Vec<T>,
}

/// Analytic adjoint of the compositing equation, chained through projection
/// and covariance assembly back to offsets, depths, quaternions, scales, and
/// opacities. Tile-parallel with per-tile accumulators merged in fixed order.
#[allow(clippy::too_many_arguments)]
pub fn backward_tiles<T: Elem>(
    inputs: &SplatInputs<'_, T>,
    prep: &Prepared<T>,
    tiles: &TileLists,
    state: &PixelState<T>,
    sources: &[CamParams<T>],
    target: &CamParams<T>,
    th: &Thresholds<T>,
    grad_values: &[T],
    grad_alpha: Option<&[T]>,
    width: usize,
    height: usize,
) -> SplatGrads<T> {
    let f = inputs.feature_dim;
    let nv = prep.visible();
    let ts = tiles.tile_size;

    // per-tile local accumulators over the tile's slot list
    struct TileGrads<T> {
        feat: Vec<T>,   // len(list) * F
        mean: Vec<T>,   // len(list) * 2
        conic: Vec<T>,  // len(list) * 4 (full 2x2)
        opac: Vec<T>,   // len(list)
    }

    let tile_grads: Vec<TileGrads<T>> = (0..tiles.lists.len())
        .into_par_iter()
        .map(|tid| {
            let list = &tiles.lists[tid];
            let mut tg = TileGrads {
                feat: vec![T::zero(); list.len() * f],
                mean: vec![T::zero(); list.len() * 2],
                conic: vec![T::zero(); list.len() * 4],
                opac: vec![T::zero(); list.len()],
            };
            if list.is_empty() {
                return tg;
            }
            let tx = tid % tiles.tiles_x;
            let ty = tid / tiles.tiles_x;
            let x0 = tx * ts;
            let y0 = ty * ts;
            let w = ts.min(width - x0);
            let h = ts.min(height - y0);
            let half = T::from_f64(0.5);
            let two = T::from_f64(2.0);
            for py in 0..h {
                for px in 0..w {
                    let pixel = (y0 + py) * width + (x0 + px);
                    let end = state.end[pixel] as usize;
                    if end == 0 {
                        continue;
                    }
                    let t_final = state.t_final[pixel];
                    let g_c = &grad_values[pixel * f..(pixel + 1) * f];
                    let g_a = grad_alpha.map(|ga| ga[pixel]).unwrap_or_else(T::zero);
                    let fx = T::from_f64((x0 + px) as f64);
                    let fy = T::from_f64((y0 + py) as f64);
                    let mut t_after = t_final;
                    let mut s_acc = T::zero(); // sum over later contributions of dot_j*alpha_j*T_j
                    let cached = state.cached.as_ref().map(|c| &c[pixel]);
                    let mut cache_pos = cached.map(|c| c.len());
                    for pos in (0..end).rev() {
                        let slot = list[pos] as usize;
                        let (sigma, alpha, clamped) = eval_alpha(
                            prep.mean[slot],
                            prep.conic[slot],
                            prep.opacity[slot],
                            fx,
                            fy,
                            th.alpha_clamp,
                        );
                        if alpha < th.alpha_skip {
                            continue;
                        }
                        let t_before = match (cached, cache_pos.as_mut()) {
                            (Some(c), Some(cp)) => {
                                *cp -= 1;
                                debug_assert_eq!(c[*cp].0 as usize, pos);
                                c[*cp].1
                            }
                            _ => t_after / (T::one() - alpha),
                        };
                        let gi = prep.index[slot];
                        let feat = &inputs.features[gi * f..(gi + 1) * f];
                        let mut dot = T::zero();
                        for (a, b) in feat.iter().zip(g_c) {
                            dot += *a * *b;
                        }
                        // d feature += alpha * T * gC
                        let w_i = alpha * t_before;
                        let df = &mut tg.feat[pos * f..(pos + 1) * f];
                        for (d, &g) in df.iter_mut().zip(g_c) {
                            *d += g * w_i;
                        }
                        // d alpha
                        let one_m = T::one() - alpha;
                        let d_alpha = dot * t_before - s_acc / one_m + g_a * t_final / one_m;
                        if !clamped {
                            tg.opac[pos] += d_alpha * sigma;
                            let dq = -half * d_alpha * prep.opacity[slot] * sigma;
                            let dx = fx - prep.mean[slot][0];
                            let dy = fy - prep.mean[slot][1];
                            let c = prep.conic[slot];
                            // q = dᵀ M d  =>  dq/dmean = -2 M d
                            tg.mean[pos * 2] -= dq * two * (c[0] * dx + c[1] * dy);
                            tg.mean[pos * 2 + 1] -= dq * two * (c[1] * dx + c[2] * dy);
                            // full-entry conic gradient
                            tg.conic[pos * 4] += dq * dx * dx;
                            tg.conic[pos * 4 + 1] += dq * dx * dy;
                            tg.conic[pos * 4 + 2] += dq * dx * dy;
                            tg.conic[pos * 4 + 3] += dq * dy * dy;
                        }
                        s_acc += dot * alpha * t_before;
                        t_after = t_before;
                    }
                }
            }
            tg
        })
        .collect();

    // merge per-tile accumulators into sorted-slot space, fixed tile order
    let mut d_feat = vec![T::zero(); nv * f];
    let mut d_mean = vec![T::zero(); nv * 2];
    let mut d_conic = vec![T::zero(); nv * 4];
    let mut d_opac = vec![T::zero(); nv];
    for (tid, tg) in tile_grads.into_iter().enumerate() {
        let list = &tiles.lists[tid];
        for (pos, &slot) in list.iter().enumerate() {
            let s = slot as usize;
            for j in 0..f {
                d_feat[s * f + j] += tg.feat[pos * f + j];
            }
            d_mean[s * 2] += tg.mean[pos * 2];
            d_mean[s * 2 + 1] += tg.mean[pos * 2 + 1];
            for j in 0..4 {
                d_conic[s * 4 + j] += tg.conic[pos * 4 + j];
            }
            d_opac[s] += tg.opac[pos];
        }
    }

    // chain per visible Gaussian back to the raw attributes
    let n = inputs.n;
    let mut grads = SplatGrads {
        features: vec![T::zero(); n * f],
        offsets: vec![T::zero(); n * 2],
        depths: vec![T::zero(); n],
        quaternions: vec![T::zero(); n * 4],
        scales: vec![T::zero(); n * 3],
        opacities: vec![T::zero(); n],
    };
    struct ChainOut<T> {
        index: usize,
        d_offset: [T; 2],
        d_depth: T,
        d_quat: [T; 4],
        d_scale: [T; 3],
    }
    let chained: Vec<ChainOut<T>> = (0..nv)
        .into_par_iter()
        .map(|s| {
            let gi = prep.index[s];
            // conic -> cov2d: dCov = -Conic * G * Conic (full-entry)
            let c = prep.conic[s];
            let cf = [c[0], c[1], c[1], c[2]];
            let g = &d_conic[s * 4..(s + 1) * 4];
            let cg = [
                cf[0] * g[0] + cf[1] * g[2],
                cf[0] * g[1] + cf[1] * g[3],
                cf[2] * g[0] + cf[3] * g[2],
                cf[2] * g[1] + cf[3] * g[3],
            ];
            let d_cov = [
                -(cg[0] * cf[0] + cg[1] * cf[2]),
                -(cg[0] * cf[1] + cg[1] * cf[3]),
                -(cg[2] * cf[0] + cg[3] * cf[2]),
                -(cg[2] * cf[1] + cg[3] * cf[3]),
            ];
            let d_mean2 = [d_mean[s * 2], d_mean[s * 2 + 1]];
            let (d_pos, d_cov3) =
                project_gaussian_vjp(target, &prep.cov3[s], &prep.proj[s], d_mean2, d_cov);
            let src = &sources[inputs.source_camera[gi]];
            let (mut d_px, mut d_py, d_depth) =
                ray_point_vjp(src, &prep.ray[s], inputs.depths[gi], d_pos);
            if prep.offset_clamped[s][0] {
                d_px = T::zero();
            }
            if prep.offset_clamped[s][1] {
                d_py = T::zero();
            }
            let scale = [
                inputs.scales[gi * 3],
                inputs.scales[gi * 3 + 1],
                inputs.scales[gi * 3 + 2],
            ];
            let quat = [
                inputs.quaternions[gi * 4],
                inputs.quaternions[gi * 4 + 1],
                inputs.quaternions[gi * 4 + 2],
                inputs.quaternions[gi * 4 + 3],
            ];
            let (d_scale, d_quat) = covariance3d_vjp(scale, quat, &d_cov3);
            ChainOut {
                index: gi,
                d_offset: [d_px, d_py],
                d_depth,
                d_quat,
                d_scale,
            }
        })
        .collect();

    for s in 0..nv {
        let gi = prep.index[s];
        for j in 0..f {
            grads.features[gi * f + j] = d_feat[s * f + j];
        }
        grads.opacities[gi] = d_opac[s];
    }
    for c in chained {
        let gi = c.index;
        grads.offsets[gi * 2] = c.d_offset[0];
        grads.offsets[gi * 2 + 1] = c.d_offset[1];
        grads.depths[gi] = c.d_depth;
        grads.quaternions[gi * 4..(gi + 1) * 4].copy_from_slice(&c.d_quat);
        grads.scales[gi * 3..(gi + 1) * 3].copy_from_slice(&c.d_scale);
    }
    grads
}
