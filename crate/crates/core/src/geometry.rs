//! Camera model, Plücker rays, ray-aligned depth, and EWA projection of 3D
//! Gaussians to screen space.
//!
//! Conventions, fixed across the crate:
//! - Pixel sample positions sit at integer coordinates; the principal point
//!   (cx, cy) is expressed in the same coordinates (center of a W-wide image
//!   is (W-1)/2).
//! - Depth is Euclidean distance along the ray (t in o + t·d), not camera-z.
//!   Camera-z is only used as the rasterizer sort key.
//! - Intrinsics rescale linearly with canvas size.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{DType, Elem, Tensor};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate intrinsics: fx={fx}, fy={fy}")]
    DegenerateIntrinsics { fx: f64, fy: f64 },
    #[error("camera rotation is not orthonormal (max deviation {dev})")]
    BadRotation { dev: f64 },
    #[error("invalid near/far planes: near={near}, far={far}")]
    BadNearFar { near: f64, far: f64 },
    #[error("non-positive depth {value} at pixel ({x}, {y})")]
    NonPositiveDepth { x: usize, y: usize, value: f64 },
    #[error("canvas {canvas_w}x{canvas_h} does not preserve the aspect of {width}x{height}")]
    BadCanvas {
        canvas_w: usize,
        canvas_h: usize,
        width: usize,
        height: usize,
    },
}

/// Pinhole camera with a rigid camera-to-world transform.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major 4x4 rigid transform mapping camera coordinates to world.
    pub cam_to_world: [f64; 16],
    pub near: f64,
    pub far: f64,
}

/// One entry of `poses.json`. Width/height live with the image files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseEntry {
    pub intrinsics: [f64; 4],
    pub cam_to_world: Vec<f64>,
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseFile {
    pub frames: Vec<PoseEntry>,
}

impl Camera {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.fx == 0.0 || self.fy == 0.0 {
            return Err(GeometryError::DegenerateIntrinsics {
                fx: self.fx,
                fy: self.fy,
            });
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(GeometryError::BadNearFar {
                near: self.near,
                far: self.far,
            });
        }
        // R^T R = I within 1e-5
        let r = self.rot_c2w();
        let mut dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += r[k * 3 + i] * r[k * 3 + j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((dot - expect).abs());
            }
        }
        if dev > 1e-5 {
            return Err(GeometryError::BadRotation { dev });
        }
        Ok(())
    }

    /// 3x3 rotation block (camera-to-world), row-major.
    pub fn rot_c2w(&self) -> [f64; 9] {
        let m = &self.cam_to_world;
        [m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]]
    }

    /// Camera origin in world coordinates.
    pub fn origin(&self) -> [f64; 3] {
        [self.cam_to_world[3], self.cam_to_world[7], self.cam_to_world[11]]
    }

    /// World point to camera frame.
    pub fn world_to_cam(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rot_c2w();
        let o = self.origin();
        let d = [p[0] - o[0], p[1] - o[1], p[2] - o[2]];
        // R_wc = R_c2w^T
        [
            r[0] * d[0] + r[3] * d[1] + r[6] * d[2],
            r[1] * d[0] + r[4] * d[1] + r[7] * d[2],
            r[2] * d[0] + r[5] * d[1] + r[8] * d[2],
        ]
    }

    /// Unit world-space direction of the ray through pixel (px, py).
    pub fn pixel_ray(&self, px: f64, py: f64) -> [f64; 3] {
        let k = [(px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0];
        let r = self.rot_c2w();
        let u = [
            r[0] * k[0] + r[1] * k[1] + r[2] * k[2],
            r[3] * k[0] + r[4] * k[1] + r[5] * k[2],
            r[6] * k[0] + r[7] * k[1] + r[8] * k[2],
        ];
        let n = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        [u[0] / n, u[1] / n, u[2] / n]
    }

    /// Perspective projection of a world point: pixel coordinates and
    /// camera-z. `None` when the point is at or behind the camera plane.
    pub fn project_point(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let t = self.world_to_cam(p);
        if t[2] <= 0.0 {
            return None;
        }
        Some((
            self.fx * t[0] / t[2] + self.cx,
            self.fy * t[1] / t[2] + self.cy,
            t[2],
        ))
    }

    /// Intrinsics rescaled to a proportional canvas.
    pub fn rescaled(&self, canvas_w: usize, canvas_h: usize) -> Result<Camera, GeometryError> {
        let sx = canvas_w as f64 / self.width as f64;
        let sy = canvas_h as f64 / self.height as f64;
        if (sx - sy).abs() > 1e-9 {
            return Err(GeometryError::BadCanvas {
                canvas_w,
                canvas_h,
                width: self.width,
                height: self.height,
            });
        }
        Ok(Camera {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width: canvas_w,
            height: canvas_h,
            ..self.clone()
        })
    }

    pub fn pose_entry(&self) -> PoseEntry {
        PoseEntry {
            intrinsics: [self.fx, self.fy, self.cx, self.cy],
            cam_to_world: self.cam_to_world.to_vec(),
            near: self.near,
            far: self.far,
        }
    }

    pub fn from_pose_entry(e: &PoseEntry, width: usize, height: usize) -> Camera {
        let mut m = [0.0; 16];
        m.copy_from_slice(&e.cam_to_world);
        Camera {
            fx: e.intrinsics[0],
            fy: e.intrinsics[1],
            cx: e.intrinsics[2],
            cy: e.intrinsics[3],
            width,
            height,
            cam_to_world: m,
            near: e.near,
            far: e.far,
        }
    }

    /// Identity pose looking down +z with the principal point at the image
    /// center; mostly for tests and synthetic rigs.
    pub fn facing_z(
        fx: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Camera {
        Camera {
            fx,
            fy: fx,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
            cam_to_world: [
                1.0, 0.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 1.0,
            ],
            near,
            far,
        }
    }
}

/// Per-pixel Plücker rays: unit world directions and moments o × d.
#[derive(Clone, Debug)]
pub struct RayMap {
    pub width: usize,
    pub height: usize,
    /// H×W×3 row-major.
    pub directions: Vec<f64>,
    /// H×W×3 row-major.
    pub moments: Vec<f64>,
}

impl RayMap {
    pub fn dir(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.directions[i], self.directions[i + 1], self.directions[i + 2]]
    }

    pub fn moment(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.moments[i], self.moments[i + 1], self.moments[i + 2]]
    }

    /// H×W×6 tensor of (direction, moment) channels.
    pub fn to_tensor(&self, dtype: DType) -> Tensor {
        let n = self.width * self.height;
        let mut data = vec![0.0f64; n * 6];
        for i in 0..n {
            data[i * 6..i * 6 + 3].copy_from_slice(&self.directions[i * 3..i * 3 + 3]);
            data[i * 6 + 3..i * 6 + 6].copy_from_slice(&self.moments[i * 3..i * 3 + 3]);
        }
        Tensor::from_f64(&[self.height, self.width, 6], data).cast(dtype)
    }
}

/// Plücker rays of `camera` at a proportional canvas resolution.
pub fn plucker_rays(
    camera: &Camera,
    canvas_w: usize,
    canvas_h: usize,
) -> Result<RayMap, GeometryError> {
    if camera.fx == 0.0 || camera.fy == 0.0 {
        return Err(GeometryError::DegenerateIntrinsics {
            fx: camera.fx,
            fy: camera.fy,
        });
    }
    let cam = camera.rescaled(canvas_w, canvas_h)?;
    let o = cam.origin();
    let mut directions = vec![0.0; canvas_w * canvas_h * 3];
    let mut moments = vec![0.0; canvas_w * canvas_h * 3];
    for y in 0..canvas_h {
        for x in 0..canvas_w {
            let d = cam.pixel_ray(x as f64, y as f64);
            let m = cross(o, d);
            let i = (y * canvas_w + x) * 3;
            directions[i..i + 3].copy_from_slice(&d);
            moments[i..i + 3].copy_from_slice(&m);
        }
    }
    Ok(RayMap {
        width: canvas_w,
        height: canvas_h,
        directions,
        moments,
    })
}

pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// World position of a Gaussian anchored at `pixel_anchor`, displaced by
/// `offset` pixels, at ray distance `depth`. Offsets beyond `margin` pixels
/// are clamped; the flag reports whether clamping fired.
pub fn gaussian_position(
    camera: &Camera,
    pixel_anchor: [f64; 2],
    offset: [f64; 2],
    depth: f64,
    margin: Option<f64>,
) -> ([f64; 3], bool) {
    let mut ox = offset[0];
    let mut oy = offset[1];
    let mut clamped = false;
    if let Some(m) = margin {
        let cx = ox.clamp(-m, m);
        let cy = oy.clamp(-m, m);
        clamped = cx != ox || cy != oy;
        ox = cx;
        oy = cy;
    }
    let d = camera.pixel_ray(pixel_anchor[0] + ox, pixel_anchor[1] + oy);
    let o = camera.origin();
    (
        [o[0] + depth * d[0], o[1] + depth * d[1], o[2] + depth * d[2]],
        clamped,
    )
}

/// Per-pixel world points from a map of ray distances.
pub fn unproject_depth(
    camera: &Camera,
    depth: &[f64],
    width: usize,
    height: usize,
) -> Result<Vec<f64>, GeometryError> {
    assert_eq!(depth.len(), width * height, "depth map size mismatch");
    let rays = plucker_rays(camera, width, height)?;
    let o = camera.origin();
    let mut points = vec![0.0; width * height * 3];
    for y in 0..height {
        for x in 0..width {
            let t = depth[y * width + x];
            if t <= 0.0 {
                return Err(GeometryError::NonPositiveDepth { x, y, value: t });
            }
            let d = rays.dir(x, y);
            let i = (y * width + x) * 3;
            points[i] = o[0] + t * d[0];
            points[i + 1] = o[1] + t * d[1];
            points[i + 2] = o[2] + t * d[2];
        }
    }
    Ok(points)
}

// ---------------------------------------------------------------------------
// Dtype-generic camera math for the rasterizer's fused forward/backward.
// ---------------------------------------------------------------------------

/// Camera constants lowered to the kernel element type.
#[derive(Clone, Debug)]
pub struct CamParams<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation (row-major), i.e. R_c2w transposed.
    pub rot_wc: [T; 9],
    /// Camera-to-world rotation (row-major).
    pub rot_cw: [T; 9],
    pub origin: [T; 3],
    pub near: T,
    pub far: T,
    /// Frustum ratio limits for the projection Jacobian (1.3x half-tangent).
    pub lim_x: T,
    pub lim_y: T,
}

impl Camera {
    pub fn to_params<T: Elem>(&self) -> CamParams<T> {
        let c = |v: f64| T::from_f64(v);
        let r = self.rot_c2w();
        let rt = [r[0], r[3], r[6], r[1], r[4], r[7], r[2], r[5], r[8]];
        let o = self.origin();
        CamParams {
            fx: c(self.fx),
            fy: c(self.fy),
            cx: c(self.cx),
            cy: c(self.cy),
            width: self.width,
            height: self.height,
            rot_wc: rt.map(c),
            rot_cw: r.map(c),
            origin: o.map(c),
            near: c(self.near),
            far: c(self.far),
            lim_x: c(1.3 * 0.5 * self.width as f64 / self.fx),
            lim_y: c(1.3 * 0.5 * self.height as f64 / self.fy),
        }
    }
}

fn mat3_vec<T: Elem>(m: &[T; 9], v: [T; 3]) -> [T; 3] {
    [
        m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
        m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
        m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
    ]
}

fn mat3_tvec<T: Elem>(m: &[T; 9], v: [T; 3]) -> [T; 3] {
    [
        m[0] * v[0] + m[3] * v[1] + m[6] * v[2],
        m[1] * v[0] + m[4] * v[1] + m[7] * v[2],
        m[2] * v[0] + m[5] * v[1] + m[8] * v[2],
    ]
}

/// Forward ray-anchored position with the context needed by its adjoint.
#[derive(Clone, Copy, Debug)]
pub struct RayPoint<T> {
    pub position: [T; 3],
    pub dir: [T; 3],
    pub u_norm: T,
}

/// Generic twin of [`gaussian_position`] used inside the splat kernel.
pub fn ray_point<T: Elem>(cam: &CamParams<T>, px: T, py: T, depth: T) -> RayPoint<T> {
    let k = [(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, T::one()];
    let u = mat3_vec(&cam.rot_cw, k);
    let n = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    let dir = [u[0] / n, u[1] / n, u[2] / n];
    RayPoint {
        position: [
            cam.origin[0] + depth * dir[0],
            cam.origin[1] + depth * dir[1],
            cam.origin[2] + depth * dir[2],
        ],
        dir,
        u_norm: n,
    }
}

/// Adjoint of [`ray_point`]: gradient w.r.t. (px, py, depth) from a gradient
/// on the world position.
pub fn ray_point_vjp<T: Elem>(
    cam: &CamParams<T>,
    rp: &RayPoint<T>,
    depth: T,
    d_pos: [T; 3],
) -> (T, T, T) {
    let d_depth = rp.dir[0] * d_pos[0] + rp.dir[1] * d_pos[1] + rp.dir[2] * d_pos[2];
    // d_dir = depth * d_pos, then through dir = u / |u|
    let d_dir = [depth * d_pos[0], depth * d_pos[1], depth * d_pos[2]];
    let dot = rp.dir[0] * d_dir[0] + rp.dir[1] * d_dir[1] + rp.dir[2] * d_dir[2];
    let d_u = [
        (d_dir[0] - rp.dir[0] * dot) / rp.u_norm,
        (d_dir[1] - rp.dir[1] * dot) / rp.u_norm,
        (d_dir[2] - rp.dir[2] * dot) / rp.u_norm,
    ];
    let d_k = mat3_tvec(&cam.rot_cw, d_u);
    (d_k[0] / cam.fx, d_k[1] / cam.fy, d_depth)
}

/// Screen-space Gaussian produced by EWA projection.
#[derive(Clone, Copy, Debug)]
pub struct Projected<T> {
    pub mean: [T; 2],
    /// 2x2 covariance, row-major, dilation included.
    pub cov: [T; 4],
    pub z_cam: T,
    /// Clamp flags for the Jacobian frustum limits (x, y).
    pub clamped: [bool; 2],
    /// Camera-frame point, saved for the adjoint.
    pub t: [T; 3],
}

/// EWA projection of a world-space Gaussian. `None` when the camera-frame z
/// is at or behind the near plane (culled, not an error).
pub fn project_gaussian<T: Elem>(
    cam: &CamParams<T>,
    pos: [T; 3],
    cov3: &[T; 9],
    dilation: T,
) -> Option<Projected<T>> {
    let d = [
        pos[0] - cam.origin[0],
        pos[1] - cam.origin[1],
        pos[2] - cam.origin[2],
    ];
    let t = mat3_vec(&cam.rot_wc, d);
    if t[2] <= cam.near {
        return None;
    }
    let tzinv = T::one() / t[2];
    let txtz = t[0] * tzinv;
    let tytz = t[1] * tzinv;
    let txtz_c = txtz.max(-cam.lim_x).min(cam.lim_x);
    let tytz_c = tytz.max(-cam.lim_y).min(cam.lim_y);
    let clamped = [txtz_c != txtz, tytz_c != tytz];

    // J rows: [fx/tz, 0, -fx*txtz/tz], [0, fy/tz, -fy*tytz/tz]
    let j00 = cam.fx * tzinv;
    let j02 = -cam.fx * txtz_c * tzinv;
    let j11 = cam.fy * tzinv;
    let j12 = -cam.fy * tytz_c * tzinv;

    // M = J * R_wc (2x3)
    let w = &cam.rot_wc;
    let m = [
        j00 * w[0] + j02 * w[6],
        j00 * w[1] + j02 * w[7],
        j00 * w[2] + j02 * w[8],
        j11 * w[3] + j12 * w[6],
        j11 * w[4] + j12 * w[7],
        j11 * w[5] + j12 * w[8],
    ];

    // cov2d = M Σ Mᵀ + dilation I
    let v = cov3;
    let mv = [
        m[0] * v[0] + m[1] * v[3] + m[2] * v[6],
        m[0] * v[1] + m[1] * v[4] + m[2] * v[7],
        m[0] * v[2] + m[1] * v[5] + m[2] * v[8],
        m[3] * v[0] + m[4] * v[3] + m[5] * v[6],
        m[3] * v[1] + m[4] * v[4] + m[5] * v[7],
        m[3] * v[2] + m[4] * v[5] + m[5] * v[8],
    ];
    let cov = [
        mv[0] * m[0] + mv[1] * m[1] + mv[2] * m[2] + dilation,
        mv[0] * m[3] + mv[1] * m[4] + mv[2] * m[5],
        mv[3] * m[0] + mv[4] * m[1] + mv[5] * m[2],
        mv[3] * m[3] + mv[4] * m[4] + mv[5] * m[5] + dilation,
    ];

    Some(Projected {
        mean: [cam.fx * txtz + cam.cx, cam.fy * tytz + cam.cy],
        cov,
        z_cam: t[2],
        clamped,
        t,
    })
}

/// Adjoint of [`project_gaussian`]: gradients w.r.t. the world position and
/// the 3D covariance, from gradients on mean2d and cov2d (full-entry, 2x2
/// row-major). z_cam is a sort key and carries no gradient.
pub fn project_gaussian_vjp<T: Elem>(
    cam: &CamParams<T>,
    cov3: &[T; 9],
    proj: &Projected<T>,
    d_mean: [T; 2],
    d_cov: [T; 4],
) -> ([T; 3], [T; 9]) {
    let t = proj.t;
    let tzinv = T::one() / t[2];
    let txtz = t[0] * tzinv;
    let tytz = t[1] * tzinv;
    let txtz_c = txtz.max(-cam.lim_x).min(cam.lim_x);
    let tytz_c = tytz.max(-cam.lim_y).min(cam.lim_y);

    let j00 = cam.fx * tzinv;
    let j02 = -cam.fx * txtz_c * tzinv;
    let j11 = cam.fy * tzinv;
    let j12 = -cam.fy * tytz_c * tzinv;
    let w = &cam.rot_wc;
    let m = [
        j00 * w[0] + j02 * w[6],
        j00 * w[1] + j02 * w[7],
        j00 * w[2] + j02 * w[8],
        j11 * w[3] + j12 * w[6],
        j11 * w[4] + j12 * w[7],
        j11 * w[5] + j12 * w[8],
    ];

    // dV = Mᵀ G M   (G = d_cov, full-entry convention)
    let g = d_cov;
    let mut d_v = [T::zero(); 9];
    for k in 0..3 {
        for l in 0..3 {
            d_v[k * 3 + l] = m[k] * g[0] * m[l]
                + m[k] * g[1] * m[3 + l]
                + m[3 + k] * g[2] * m[l]
                + m[3 + k] * g[3] * m[3 + l];
        }
    }

    // dM = (G + Gᵀ) M V  (V symmetric)
    let gs = [
        g[0] + g[0],
        g[1] + g[2],
        g[1] + g[2],
        g[3] + g[3],
    ];
    let v = cov3;
    let mv = [
        m[0] * v[0] + m[1] * v[3] + m[2] * v[6],
        m[0] * v[1] + m[1] * v[4] + m[2] * v[7],
        m[0] * v[2] + m[1] * v[5] + m[2] * v[8],
        m[3] * v[0] + m[4] * v[3] + m[5] * v[6],
        m[3] * v[1] + m[4] * v[4] + m[5] * v[7],
        m[3] * v[2] + m[4] * v[5] + m[5] * v[8],
    ];
    let mut d_m = [T::zero(); 6];
    for r in 0..2 {
        for kk in 0..3 {
            d_m[r * 3 + kk] = gs[r * 2] * mv[kk] + gs[r * 2 + 1] * mv[3 + kk];
        }
    }

    // dJ = dM Wᵀ  (only the four nonzero J entries matter)
    let d_j00 = d_m[0] * w[0] + d_m[1] * w[1] + d_m[2] * w[2];
    let d_j02 = d_m[0] * w[6] + d_m[1] * w[7] + d_m[2] * w[8];
    let d_j11 = d_m[3] * w[3] + d_m[4] * w[4] + d_m[5] * w[5];
    let d_j12 = d_m[3] * w[6] + d_m[4] * w[7] + d_m[5] * w[8];

    // J entries to camera-frame point, branching on the clamp.
    let tz2inv = tzinv * tzinv;
    let mut d_t = [T::zero(); 3];
    // j00 = fx/tz, j11 = fy/tz
    d_t[2] -= d_j00 * cam.fx * tz2inv;
    d_t[2] -= d_j11 * cam.fy * tz2inv;
    if proj.clamped[0] {
        // j02 = -fx * lim * tzinv, lim constant
        d_t[2] += d_j02 * cam.fx * txtz_c * tz2inv;
    } else {
        // j02 = -fx * tx / tz^2
        d_t[0] -= d_j02 * cam.fx * tz2inv;
        let two = T::from_f64(2.0);
        d_t[2] += d_j02 * two * cam.fx * t[0] * tz2inv * tzinv;
    }
    if proj.clamped[1] {
        d_t[2] += d_j12 * cam.fy * tytz_c * tz2inv;
    } else {
        d_t[1] -= d_j12 * cam.fy * tz2inv;
        let two = T::from_f64(2.0);
        d_t[2] += d_j12 * two * cam.fy * t[1] * tz2inv * tzinv;
    }

    // mean2d path (always the unclamped ratios)
    d_t[0] += d_mean[0] * cam.fx * tzinv;
    d_t[2] -= d_mean[0] * cam.fx * t[0] * tz2inv;
    d_t[1] += d_mean[1] * cam.fy * tzinv;
    d_t[2] -= d_mean[1] * cam.fy * t[1] * tz2inv;

    // t = R_wc (p - c)  =>  d_p = R_wcᵀ d_t = R_c2w d_t
    let d_pos = mat3_vec(&cam.rot_cw, d_t);
    (d_pos, d_v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_camera(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Camera {
        // random rotation from a random unit quaternion
        let q: [f64; 4] = {
            let mut q = [0.0; 4];
            loop {
                for v in q.iter_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
                let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 1e-3 {
                    for v in q.iter_mut() {
                        *v /= n;
                    }
                    break;
                }
            }
            q
        };
        let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
        let r = [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ];
        let o = [
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        ];
        Camera {
            fx: rng.gen_range(20.0..60.0),
            fy: rng.gen_range(20.0..60.0),
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
            cam_to_world: [
                r[0], r[1], r[2], o[0], //
                r[3], r[4], r[5], o[1], //
                r[6], r[7], r[8], o[2], //
                0.0, 0.0, 0.0, 1.0,
            ],
            near: 0.1,
            far: 10.0,
        }
    }

    #[test]
    fn origin_camera_has_zero_moments() {
        let cam = Camera::facing_z(32.0, 8, 8, 0.1, 10.0);
        let rays = plucker_rays(&cam, 8, 8).unwrap();
        for i in 0..rays.moments.len() {
            assert!(rays.moments[i].abs() < 1e-12);
        }
    }

    #[test]
    fn offset_camera_central_moment() {
        // camera at (1,0,0) looking down +z: central ray (0,0,1),
        // moment = (1,0,0) x (0,0,1) = (0,-1,0)
        let mut cam = Camera::facing_z(32.0, 9, 9, 0.1, 10.0);
        cam.cam_to_world[3] = 1.0;
        let rays = plucker_rays(&cam, 9, 9).unwrap();
        let m = rays.moment(4, 4);
        assert!((m[0] - 0.0).abs() < 1e-12);
        assert!((m[1] + 1.0).abs() < 1e-12);
        assert!((m[2] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn ray_map_invariants_random_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let cam = random_camera(&mut rng, 16, 16);
            cam.validate().unwrap();
            let rays = plucker_rays(&cam, 4, 4).unwrap();
            let o = cam.origin();
            for y in 0..4 {
                for x in 0..4 {
                    let d = rays.dir(x, y);
                    let m = rays.moment(x, y);
                    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    assert!((n - 1.0).abs() < 1e-5, "direction not unit: {n}");
                    let dot = m[0] * d[0] + m[1] * d[1] + m[2] * d[2];
                    assert!(dot.abs() < 1e-5, "moment not orthogonal: {dot}");
                    // independent recomputation at the rescaled intrinsics
                    let rc = cam.rescaled(4, 4).unwrap();
                    let d2 = rc.pixel_ray(x as f64, y as f64);
                    let m2 = cross(o, d2);
                    for i in 0..3 {
                        assert!((d[i] - d2[i]).abs() < 1e-12);
                        assert!((m[i] - m2[i]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn degenerate_intrinsics_rejected() {
        let mut cam = Camera::facing_z(32.0, 8, 8, 0.1, 10.0);
        cam.fx = 0.0;
        assert!(plucker_rays(&cam, 8, 8).is_err());
    }

    #[test]
    fn principal_axis_position() {
        let cam = Camera::facing_z(32.0, 9, 9, 0.1, 10.0);
        let (p, clamped) = gaussian_position(&cam, [cam.cx, cam.cy], [0.0, 0.0], 2.0, None);
        assert!(!clamped);
        assert!((p[0]).abs() < 1e-12 && (p[1]).abs() < 1e-12 && (p[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_ray_position() {
        // pixel = principal point + (fx, 0): direction ∝ (1,0,1)/√2
        let cam = Camera::facing_z(32.0, 9, 9, 0.1, 10.0);
        let (p, _) = gaussian_position(&cam, [cam.cx, cam.cy], [cam.fx, 0.0], 2.0, None);
        let s = 2.0 / (2.0f64).sqrt();
        assert!((p[0] - s).abs() < 1e-12);
        assert!((p[1]).abs() < 1e-12);
        assert!((p[2] - s).abs() < 1e-12);
    }

    #[test]
    fn offset_margin_clamps_and_flags() {
        let cam = Camera::facing_z(32.0, 9, 9, 0.1, 10.0);
        let (_, clamped) = gaussian_position(&cam, [4.0, 4.0], [100.0, 0.0], 2.0, Some(32.0));
        assert!(clamped);
        let (_, ok) = gaussian_position(&cam, [4.0, 4.0], [10.0, 0.0], 2.0, Some(32.0));
        assert!(!ok);
    }

    #[test]
    fn projection_round_trip_recovers_depth_and_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let cam = random_camera(&mut rng, 32, 32);
            let anchor = [rng.gen_range(4.0..28.0), rng.gen_range(4.0..28.0)];
            let offset = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let depth = rng.gen_range(0.5..5.0);
            let (p, _) = gaussian_position(&cam, anchor, offset, depth, None);
            let (u, v, _z) = cam.project_point(p).expect("in front");
            assert!((u - (anchor[0] + offset[0])).abs() < 1e-4, "u {u}");
            assert!((v - (anchor[1] + offset[1])).abs() < 1e-4, "v {v}");
            let o = cam.origin();
            let dist =
                ((p[0] - o[0]).powi(2) + (p[1] - o[1]).powi(2) + (p[2] - o[2]).powi(2)).sqrt();
            assert!((dist - depth).abs() < 1e-4);
        }
    }

    #[test]
    fn unproject_identity_and_sphere() {
        // fx=fy=1, cx=cy=0: pixel (0,0) at depth 2 unprojects to (0,0,2)
        let cam = Camera {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 2,
            height: 2,
            cam_to_world: Camera::facing_z(1.0, 2, 2, 0.1, 10.0).cam_to_world,
            near: 0.1,
            far: 10.0,
        };
        let pts = unproject_depth(&cam, &[2.0, 2.0, 2.0, 2.0], 2, 2).unwrap();
        assert!((pts[0]).abs() < 1e-12 && (pts[1]).abs() < 1e-12 && (pts[2] - 2.0).abs() < 1e-12);
        // constant-depth plane lies on a sphere of that radius (ray distance)
        for p in pts.chunks(3) {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn unproject_rejects_nonpositive() {
        let cam = Camera::facing_z(1.0, 2, 2, 0.1, 10.0);
        let err = unproject_depth(&cam, &[1.0, 0.0, 1.0, 1.0], 2, 2).unwrap_err();
        match err {
            GeometryError::NonPositiveDepth { x, y, .. } => {
                assert_eq!((x, y), (1, 0));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn isotropic_projection_on_axis() {
        // cov3d = s² I at the principal axis: cov2d = (s·f/z)² I before dilation
        let cam = Camera::facing_z(32.0, 9, 9, 0.1, 10.0);
        let p: CamParams<f64> = cam.to_params();
        let s = 0.05f64;
        let z = 3.0;
        let cov3 = [s * s, 0.0, 0.0, 0.0, s * s, 0.0, 0.0, 0.0, s * s];
        let proj = project_gaussian(&p, [0.0, 0.0, z], &cov3, 0.0).unwrap();
        let expect = (s * 32.0 / z) * (s * 32.0 / z);
        assert!((proj.cov[0] - expect).abs() < 1e-5);
        assert!((proj.cov[3] - expect).abs() < 1e-5);
        assert!(proj.cov[1].abs() < 1e-9 && proj.cov[2].abs() < 1e-9);
        assert!((proj.z_cam - z).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = Camera::facing_z(32.0, 9, 9, 0.1, 10.0);
        let p: CamParams<f64> = cam.to_params();
        let cov3 = [0.01, 0.0, 0.0, 0.0, 0.01, 0.0, 0.0, 0.0, 0.01];
        assert!(project_gaussian(&p, [0.0, 0.0, -1.0], &cov3, 0.3).is_none());
        assert!(project_gaussian(&p, [0.0, 0.0, 0.05], &cov3, 0.3).is_none());
    }

    #[test]
    fn projected_cov_is_spd_after_dilation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let cam = random_camera(&mut rng, 32, 32);
            let p: CamParams<f64> = cam.to_params();
            // random SPD cov3 = A Aᵀ + eps I
            let mut a = [0.0; 9];
            for v in a.iter_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
            let mut cov3 = [0.0; 9];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        cov3[i * 3 + j] += a[i * 3 + k] * a[j * 3 + k];
                    }
                }
                cov3[i * 3 + i] += 1e-6;
            }
            let pos = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            if let Some(proj) = project_gaussian(&p, pos, &cov3, 0.3) {
                let det = proj.cov[0] * proj.cov[3] - proj.cov[1] * proj.cov[2];
                let tr = proj.cov[0] + proj.cov[3];
                assert!(det > 0.0 && tr > 0.0, "cov2d not SPD: {:?}", proj.cov);
                assert!((proj.cov[1] - proj.cov[2]).abs() < 1e-9, "cov2d asymmetric");
            }
        }
    }

    #[test]
    fn projection_vjp_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..20 {
            let cam = random_camera(&mut rng, 32, 32);
            let p: CamParams<f64> = cam.to_params();
            let mut a = [0.0; 9];
            for v in a.iter_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
            let mut cov3 = [0.0; 9];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        cov3[i * 3 + j] += a[i * 3 + k] * a[j * 3 + k];
                    }
                }
                cov3[i * 3 + i] += 1e-4;
            }
            // place the point safely inside the frustum of this camera
            let o = cam.origin();
            let dir = cam.pixel_ray(
                rng.gen_range(8.0..24.0),
                rng.gen_range(8.0..24.0),
            );
            let depth = rng.gen_range(1.0..4.0);
            let pos = [o[0] + depth * dir[0], o[1] + depth * dir[1], o[2] + depth * dir[2]];
            let Some(proj) = project_gaussian(&p, pos, &cov3, 0.3) else {
                continue;
            };
            // scalar loss: fixed random contraction of mean and cov
            let wm = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let wc = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let loss = |proj: &Projected<f64>| {
                proj.mean[0] * wm[0]
                    + proj.mean[1] * wm[1]
                    + proj.cov[0] * wc[0]
                    + proj.cov[1] * wc[1]
                    + proj.cov[2] * wc[2]
                    + proj.cov[3] * wc[3]
            };
            let (d_pos, d_cov3) = project_gaussian_vjp(&p, &cov3, &proj, wm, wc);
            let h = 1e-6;
            for i in 0..3 {
                let mut pp = pos;
                pp[i] += h;
                let mut pm = pos;
                pm[i] -= h;
                let fp = loss(&project_gaussian(&p, pp, &cov3, 0.3).unwrap());
                let fm = loss(&project_gaussian(&p, pm, &cov3, 0.3).unwrap());
                let num = (fp - fm) / (2.0 * h);
                let rel = (d_pos[i] - num).abs() / (num.abs() + 1e-8);
                assert!(rel < 1e-4, "trial {trial} d_pos[{i}]: {} vs {num}", d_pos[i]);
            }
            for i in 0..9 {
                let mut cp = cov3;
                cp[i] += h;
                let mut cm = cov3;
                cm[i] -= h;
                let fp = loss(&project_gaussian(&p, pos, &cp, 0.3).unwrap());
                let fm = loss(&project_gaussian(&p, pos, &cm, 0.3).unwrap());
                let num = (fp - fm) / (2.0 * h);
                let rel = (d_cov3[i] - num).abs() / (num.abs() + 1e-8);
                assert!(rel < 1e-4, "trial {trial} d_cov3[{i}]: {} vs {num}", d_cov3[i]);
            }
        }
    }

    #[test]
    fn ray_point_vjp_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let cam = random_camera(&mut rng, 32, 32);
            let p: CamParams<f64> = cam.to_params();
            let px = rng.gen_range(2.0..30.0);
            let py = rng.gen_range(2.0..30.0);
            let depth = rng.gen_range(0.5..5.0);
            let wv = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let loss = |px: f64, py: f64, d: f64| {
                let rp = ray_point(&p, px, py, d);
                rp.position[0] * wv[0] + rp.position[1] * wv[1] + rp.position[2] * wv[2]
            };
            let rp = ray_point(&p, px, py, depth);
            let (dpx, dpy, dd) = ray_point_vjp(&p, &rp, depth, wv);
            let h = 1e-6;
            let checks = [
                (dpx, (loss(px + h, py, depth) - loss(px - h, py, depth)) / (2.0 * h)),
                (dpy, (loss(px, py + h, depth) - loss(px, py - h, depth)) / (2.0 * h)),
                (dd, (loss(px, py, depth + h) - loss(px, py, depth - h)) / (2.0 * h)),
            ];
            for (an, num) in checks {
                let rel = (an - num).abs() / (num.abs() + 1e-8);
                assert!(rel < 1e-4, "{an} vs {num}");
            }
        }
    }

    #[test]
    fn pose_entry_round_trip() {
        let cam = Camera::facing_z(32.0, 16, 12, 0.2, 8.0);
        let e = cam.pose_entry();
        let back = Camera::from_pose_entry(&e, 16, 12);
        assert_eq!(cam, back);
        // unknown JSON keys are ignored
        let json = r#"{"intrinsics":[1,1,0,0],"cam_to_world":[1,0,0,0,0,1,0,0,0,0,1,0,0,0,0,1],"near":0.1,"far":5.0,"extra_key":42}"#;
        let parsed: PoseEntry = serde_json::from_str(json).unwrap();
        assert_eq!(parsed.near, 0.1);
    }
}
