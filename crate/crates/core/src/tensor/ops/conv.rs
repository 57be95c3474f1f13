//! 3x3 convolution and average pooling on H×W×C maps.

use std::sync::Arc;

use super::check_same_dtype;
use crate::tensor::tape::{Backward, NodeId};
use crate::tensor::{Elem, Storage, Tape, Tensor};

/// Border handling for the one-pixel pad of the 3x3 kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

fn conv_out_dim(n: usize, stride: usize) -> usize {
    // 3x3 kernel with pad 1: (n + 2 - 3) / stride + 1
    (n - 1) / stride + 1
}

/// Resolve a padded coordinate to Some(source index) or None (zero pad).
fn resolve(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        Some(i as usize)
    } else {
        match mode {
            PadMode::Zero => None,
            PadMode::Replicate => Some(i.clamp(0, n as isize - 1) as usize),
        }
    }
}

fn conv2d_forward<T: Elem>(
    x: &[T],
    k: &[T],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    stride: usize,
    pad: PadMode,
) -> Vec<T> {
    let ho = conv_out_dim(h, stride);
    let wo = conv_out_dim(w, stride);
    let mut out = vec![T::zero(); ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            let dst = &mut out[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
            for ky in 0..3usize {
                let sy = match resolve((oy * stride + ky) as isize - 1, h, pad) {
                    Some(v) => v,
                    None => continue,
                };
                for kx in 0..3usize {
                    let sx = match resolve((ox * stride + kx) as isize - 1, w, pad) {
                        Some(v) => v,
                        None => continue,
                    };
                    let src = &x[(sy * w + sx) * cin..(sy * w + sx + 1) * cin];
                    let kbase = (ky * 3 + kx) * cin * cout;
                    for (ci, &xv) in src.iter().enumerate() {
                        let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (o, &kv) in dst.iter_mut().zip(krow) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

struct Conv2dBackward {
    ids: [Option<NodeId>; 2],
    x: Storage,
    k: Storage,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    stride: usize,
    pad: PadMode,
}

impl Backward for Conv2dBackward {
    fn input_ids(&self) -> &[Option<NodeId>] {
        &self.ids
    }

    fn vjp(&self, grad: &Storage) -> Vec<Option<Storage>> {
        fn run<T: Elem>(
            g: &[T],
            x: &[T],
            k: &[T],
            h: usize,
            w: usize,
            cin: usize,
            cout: usize,
            stride: usize,
            pad: PadMode,
            want: [bool; 2],
        ) -> (Option<Vec<T>>, Option<Vec<T>>) {
            let ho = conv_out_dim(h, stride);
            let wo = conv_out_dim(w, stride);
            let mut dx = want[0].then(|| vec![T::zero(); h * w * cin]);
            let mut dk = want[1].then(|| vec![T::zero(); 9 * cin * cout]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = &g[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                    for ky in 0..3usize {
                        let sy = match resolve((oy * stride + ky) as isize - 1, h, pad) {
                            Some(v) => v,
                            None => continue,
                        };
                        for kx in 0..3usize {
                            let sx = match resolve((ox * stride + kx) as isize - 1, w, pad) {
                                Some(v) => v,
                                None => continue,
                            };
                            let kbase = (ky * 3 + kx) * cin * cout;
                            for ci in 0..cin {
                                let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                                let xv = x[(sy * w + sx) * cin + ci];
                                let mut acc = T::zero();
                                for (co, &gvv) in gv.iter().enumerate() {
                                    acc += gvv * krow[co];
                                    if let Some(dk) = dk.as_mut() {
                                        dk[kbase + ci * cout + co] += gvv * xv;
                                    }
                                }
                                if let Some(dx) = dx.as_mut() {
                                    dx[(sy * w + sx) * cin + ci] += acc;
                                }
                            }
                        }
                    }
                }
            }
            (dx, dk)
        }
        let want = [self.ids[0].is_some(), self.ids[1].is_some()];
        match (grad, &self.x, &self.k) {
            (Storage::F32(g), Storage::F32(x), Storage::F32(k)) => {
                let (dx, dk) = run(
                    g, x, k, self.h, self.w, self.cin, self.cout, self.stride, self.pad, want,
                );
                vec![
                    dx.map(|v| Storage::F32(Arc::new(v))),
                    dk.map(|v| Storage::F32(Arc::new(v))),
                ]
            }
            (Storage::F64(g), Storage::F64(x), Storage::F64(k)) => {
                let (dx, dk) = run(
                    g, x, k, self.h, self.w, self.cin, self.cout, self.stride, self.pad, want,
                );
                vec![
                    dx.map(|v| Storage::F64(Arc::new(v))),
                    dk.map(|v| Storage::F64(Arc::new(v))),
                ]
            }
            _ => panic!("conv2d: dtype mismatch in backward"),
        }
    }

    fn op_name(&self) -> &'static str {
        "conv2d"
    }
}

struct AvgPoolBackward {
    ids: [Option<NodeId>; 1],
    in_shape: Vec<usize>,
    factor: usize,
}

impl Backward for AvgPoolBackward {
    fn input_ids(&self) -> &[Option<NodeId>] {
        &self.ids
    }

    fn vjp(&self, grad: &Storage) -> Vec<Option<Storage>> {
        fn run<T: Elem>(g: &[T], in_shape: &[usize], f: usize) -> Vec<T> {
            let (h, w, c) = unpack_hwc(in_shape);
            let ho = h / f;
            let wo = w / f;
            let inv = T::from_f64(1.0 / (f * f) as f64);
            let mut out = vec![T::zero(); h * w * c];
            for oy in 0..ho {
                for ox in 0..wo {
                    for ch in 0..c {
                        let gv = g[(oy * wo + ox) * c + ch] * inv;
                        for dy in 0..f {
                            for dx in 0..f {
                                out[((oy * f + dy) * w + (ox * f + dx)) * c + ch] += gv;
                            }
                        }
                    }
                }
            }
            out
        }
        let g = match grad {
            Storage::F32(g) => Storage::F32(Arc::new(run(g, &self.in_shape, self.factor))),
            Storage::F64(g) => Storage::F64(Arc::new(run(g, &self.in_shape, self.factor))),
        };
        vec![Some(g)]
    }

    fn op_name(&self) -> &'static str {
        "avg_pool2d"
    }
}

fn unpack_hwc(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        _ => panic!("expected H×W or H×W×C map, got {shape:?}"),
    }
}

impl Tape {
    /// 3x3 convolution with one-pixel padding. Input `H×W×Cin`, kernel
    /// `3×3×Cin×Cout`, output `Ho×Wo×Cout`.
    pub fn conv2d(&self, x: &Tensor, kernel: &Tensor, stride: usize, pad: PadMode) -> Tensor {
        check_same_dtype("conv2d", x, kernel);
        assert!(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
        let (h, w, cin) = match x.shape() {
            [h, w, c] => (*h, *w, *c),
            _ => panic!("conv2d: input must be H×W×C, got {:?}", x.shape()),
        };
        let (cout,) = match kernel.shape() {
            [3, 3, kc, co] if *kc == cin => (*co,),
            _ => panic!(
                "conv2d: kernel must be 3×3×{cin}×Cout, got {:?}",
                kernel.shape()
            ),
        };
        assert!(h >= 3 && w >= 3, "conv2d: map {h}×{w} smaller than kernel");
        let ho = conv_out_dim(h, stride);
        let wo = conv_out_dim(w, stride);
        let data = match (x.data(), kernel.data()) {
            (Storage::F32(xv), Storage::F32(kv)) => {
                Storage::F32(Arc::new(conv2d_forward(xv, kv, h, w, cin, cout, stride, pad)))
            }
            (Storage::F64(xv), Storage::F64(kv)) => {
                Storage::F64(Arc::new(conv2d_forward(xv, kv, h, w, cin, cout, stride, pad)))
            }
            _ => unreachable!(),
        };
        let ids = [self.track(x), self.track(kernel)];
        let out = Tensor::from_storage(&[ho, wo, cout], data);
        match self.record(
            ids.iter().any(|i| i.is_some()),
            Box::new(Conv2dBackward {
                ids,
                x: x.data().clone(),
                k: kernel.data().clone(),
                h,
                w,
                cin,
                cout,
                stride,
                pad,
            }),
            out.numel(),
            out.dtype(),
        ) {
            Some(id) => out.with_node(id),
            None => out,
        }
    }

    /// Average-pool an `H×W[×C]` map by an integer factor. Output dims are
    /// floored; remainder rows/columns are dropped.
    pub fn avg_pool2d(&self, x: &Tensor, factor: usize) -> Tensor {
        assert!(factor >= 1, "avg_pool2d: factor must be >= 1");
        let (h, w, c) = unpack_hwc(x.shape());
        let ho = h / factor;
        let wo = w / factor;
        assert!(ho >= 1 && wo >= 1, "avg_pool2d: factor {factor} larger than map {h}×{w}");

        fn run<T: Elem>(x: &[T], h: usize, w: usize, c: usize, f: usize) -> Vec<T> {
            let ho = h / f;
            let wo = w / f;
            let inv = T::from_f64(1.0 / (f * f) as f64);
            let mut out = vec![T::zero(); ho * wo * c];
            for oy in 0..ho {
                for ox in 0..wo {
                    for ch in 0..c {
                        let mut acc = T::zero();
                        for dy in 0..f {
                            for dx in 0..f {
                                acc += x[((oy * f + dy) * w + (ox * f + dx)) * c + ch];
                            }
                        }
                        out[(oy * wo + ox) * c + ch] = acc * inv;
                    }
                }
            }
            out
        }

        let data = match x.data() {
            Storage::F32(v) => Storage::F32(Arc::new(run(v, h, w, c, factor))),
            Storage::F64(v) => Storage::F64(Arc::new(run(v, h, w, c, factor))),
        };
        let out_shape: Vec<usize> = if x.shape().len() == 2 {
            vec![ho, wo]
        } else {
            vec![ho, wo, c]
        };
        let ids = [self.track(x)];
        let out = Tensor::from_storage(&out_shape, data);
        match self.record(
            ids[0].is_some(),
            Box::new(AvgPoolBackward {
                ids,
                in_shape: x.shape().to_vec(),
                factor,
            }),
            out.numel(),
            out.dtype(),
        ) {
            Some(id) => out.with_node(id),
            None => out,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    #[test]
    fn conv_identity_kernel() {
        let tape = Tape::new();
        let x = Tensor::from_f32(&[4, 4, 1], (0..16).map(|i| i as f32).collect());
        // delta kernel: center tap 1
        let mut k = vec![0.0f32; 9];
        k[4] = 1.0;
        let kernel = Tensor::from_f32(&[3, 3, 1, 1], k);
        let y = tape.conv2d(&x, &kernel, 1, PadMode::Zero);
        assert_eq!(y.shape(), &[4, 4, 1]);
        assert_eq!(y.to_f32_vec(), x.to_f32_vec());
    }

    #[test]
    fn conv_stride2_dims() {
        let tape = Tape::new();
        let x = Tensor::zeros(DType::F32, &[64, 64, 3]);
        let k = Tensor::zeros(DType::F32, &[3, 3, 3, 16]);
        let y = tape.conv2d(&x, &k, 2, PadMode::Zero);
        assert_eq!(y.shape(), &[32, 32, 16]);
    }

    #[test]
    fn replicate_border_sums_kernel() {
        // constant input under replicate padding: every output equals
        // input value times the kernel sum, including at corners.
        let tape = Tape::new();
        let x = Tensor::from_f64(&[3, 3, 1], vec![2.0; 9]);
        let k = Tensor::from_f64(&[3, 3, 1, 1], (1..=9).map(|i| i as f64).collect());
        let y = tape.conv2d(&x, &k, 1, PadMode::Replicate);
        let ksum: f64 = (1..=9).map(|i| i as f64).sum();
        for v in y.to_f64_vec() {
            assert!((v - 2.0 * ksum).abs() < 1e-12);
        }
    }

    #[test]
    fn avg_pool_means() {
        let tape = Tape::new();
        let x = Tensor::from_f32(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = tape.avg_pool2d(&x, 2);
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.to_f32_vec(), vec![2.5]);
    }

    #[test]
    fn avg_pool_drops_remainder() {
        let tape = Tape::new();
        let x = Tensor::from_f32(&[5, 5], (0..25).map(|i| i as f32).collect());
        let y = tape.avg_pool2d(&x, 2);
        assert_eq!(y.shape(), &[2, 2]);
        // window at (0,0): values 0,1,5,6
        assert_eq!(y.to_f32_vec()[0], 3.0);
    }
}
