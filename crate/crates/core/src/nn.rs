//! Layer kernels with hand-written backward passes.
//!
//! Convolutions are lowered to GEMM through im2col, processed in slabs of
//! output z-planes so the column buffer stays bounded at 128³ inputs.

use crate::tensor::{gemm, Layout, Tensor};
use crate::volume::Shape3;

pub const NORM_EPS: f32 = 1e-5;
pub const LEAKY_SLOPE: f32 = 0.01;

/// Upper bound on im2col buffer elements per slab.
const COL_BUDGET: usize = 1 << 23;

/// Output extent of a 3×3×3, padding-1 convolution.
pub fn conv_out_shape(input: Shape3, stride: usize) -> Shape3 {
    Shape3(input.0.map(|n| (n - 1) / stride + 1))
}

struct Slab {
    z0: usize,
    z1: usize,
}

fn slabs(out: Shape3, k: usize) -> Vec<Slab> {
    let plane = out.w() * out.h();
    let per = (COL_BUDGET / (k * plane).max(1)).max(1);
    (0..out.d())
        .step_by(per)
        .map(|z0| Slab {
            z0,
            z1: (z0 + per).min(out.d()),
        })
        .collect()
}

/// Fill `col` (`cin*27` rows × slab columns) for output planes `z0..z1`.
fn im2col(x: &Tensor, out: Shape3, stride: usize, slab: &Slab, col: &mut [f32]) {
    let (iw, ih, id) = (x.shape.w() as i64, x.shape.h() as i64, x.shape.d() as i64);
    let (ow, oh) = (out.w(), out.h());
    let n = (slab.z1 - slab.z0) * oh * ow;
    let s = stride as i64;
    for ci in 0..x.channels {
        let src = x.channel(ci);
        for kz in 0..3i64 {
            for ky in 0..3i64 {
                for kx in 0..3i64 {
                    let row = ((ci * 27) + (kz * 9 + ky * 3 + kx) as usize) * n;
                    let dst = &mut col[row..row + n];
                    let mut j = 0;
                    for oz in slab.z0..slab.z1 {
                        let iz = oz as i64 * s + kz - 1;
                        for oy in 0..oh {
                            let iy = oy as i64 * s + ky - 1;
                            let line = &mut dst[j..j + ow];
                            j += ow;
                            if iz < 0 || iz >= id || iy < 0 || iy >= ih {
                                line.fill(0.0);
                                continue;
                            }
                            let base = ((iz * ih + iy) * iw) as usize;
                            if stride == 1 {
                                // ix = ox + kx - 1
                                let lo = (1 - kx).max(0) as usize;
                                let hi = ((iw + 1 - kx) as usize).min(ow);
                                line[..lo].fill(0.0);
                                if hi > lo {
                                    let start = base + (lo as i64 + kx - 1) as usize;
                                    line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                                }
                                line[hi.max(lo)..].fill(0.0);
                            } else {
                                for (ox, v) in line.iter_mut().enumerate() {
                                    let ix = ox as i64 * s + kx - 1;
                                    *v = if ix >= 0 && ix < iw {
                                        src[base + ix as usize]
                                    } else {
                                        0.0
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add `col` back onto `dx`; adjoint of [`im2col`].
fn col2im(dx: &mut Tensor, out: Shape3, stride: usize, slab: &Slab, col: &[f32]) {
    let (iw, ih, id) = (dx.shape.w() as i64, dx.shape.h() as i64, dx.shape.d() as i64);
    let (ow, oh) = (out.w(), out.h());
    let n = (slab.z1 - slab.z0) * oh * ow;
    let s = stride as i64;
    for ci in 0..dx.channels {
        let dst = dx.channel_mut(ci);
        for kz in 0..3i64 {
            for ky in 0..3i64 {
                for kx in 0..3i64 {
                    let row = ((ci * 27) + (kz * 9 + ky * 3 + kx) as usize) * n;
                    let src = &col[row..row + n];
                    let mut j = 0;
                    for oz in slab.z0..slab.z1 {
                        let iz = oz as i64 * s + kz - 1;
                        for oy in 0..oh {
                            let iy = oy as i64 * s + ky - 1;
                            let line = &src[j..j + ow];
                            j += ow;
                            if iz < 0 || iz >= id || iy < 0 || iy >= ih {
                                continue;
                            }
                            let base = ((iz * ih + iy) * iw) as usize;
                            for (ox, &v) in line.iter().enumerate() {
                                let ix = ox as i64 * s + kx - 1;
                                if ix >= 0 && ix < iw {
                                    dst[base + ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3×3×3 convolution, padding 1, no bias. `weight` is `[cout][cin][27]`.
pub fn conv3d(x: &Tensor, weight: &[f32], cout: usize, stride: usize) -> Tensor {
    let k = x.channels * 27;
    assert_eq!(weight.len(), cout * k, "conv3d weight size");
    let out_shape = conv_out_shape(x.shape, stride);
    let total = out_shape.len();
    let mut y = Tensor::zeros(cout, out_shape);
    let plane = out_shape.w() * out_shape.h();
    let mut col = Vec::new();
    for slab in slabs(out_shape, k) {
        let n = (slab.z1 - slab.z0) * plane;
        col.resize(k * n, 0.0);
        im2col(x, out_shape, stride, &slab, &mut col);
        let off = slab.z0 * plane;
        gemm(
            cout,
            k,
            n,
            weight,
            Layout::row_major(k),
            &col,
            Layout::row_major(n),
            0.0,
            &mut y.data[off..],
            Layout { rs: total, cs: 1 },
        );
    }
    y
}

/// Backward of [`conv3d`]: accumulates into `dweight`, returns `dx` when
/// `want_dx`.
pub fn conv3d_backward(
    x: &Tensor,
    weight: &[f32],
    stride: usize,
    dy: &Tensor,
    dweight: &mut [f32],
    want_dx: bool,
) -> Option<Tensor> {
    let cout = dy.channels;
    let k = x.channels * 27;
    let out_shape = dy.shape;
    let total = out_shape.len();
    let plane = out_shape.w() * out_shape.h();
    let mut dx = want_dx.then(|| Tensor::zeros(x.channels, x.shape));
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    for slab in slabs(out_shape, k) {
        let n = (slab.z1 - slab.z0) * plane;
        let off = slab.z0 * plane;
        col.resize(k * n, 0.0);
        im2col(x, out_shape, stride, &slab, &mut col);
        // dW[cout×k] += dY[cout×n] · col^T[n×k]
        gemm(
            cout,
            n,
            k,
            &dy.data[off..],
            Layout { rs: total, cs: 1 },
            &col,
            Layout::transposed(n),
            1.0,
            dweight,
            Layout::row_major(k),
        );
        if let Some(dx) = dx.as_mut() {
            dcol.resize(k * n, 0.0);
            // dcol[k×n] = W^T[k×cout] · dY[cout×n]
            gemm(
                k,
                cout,
                n,
                weight,
                Layout::transposed(k),
                &dy.data[off..],
                Layout { rs: total, cs: 1 },
                0.0,
                &mut dcol,
                Layout::row_major(n),
            );
            col2im(dx, out_shape, stride, &slab, &dcol);
        }
    }
    dx
}

/// 2×2×2 stride-2 transposed convolution, no bias. `weight` is `[cin][cout][8]`.
pub fn upconv(x: &Tensor, weight: &[f32], cout: usize) -> Tensor {
    let cin = x.channels;
    let m = cout * 8;
    assert_eq!(weight.len(), cin * m, "upconv weight size");
    let n = x.spatial();
    let mut cols = vec![0.0; m * n];
    // cols[(co,k)×n] = W^T[(co,k)×cin] · X[cin×n]
    gemm(m, cin, n, weight, Layout::transposed(m), &x.data, Layout::row_major(n), 0.0, &mut cols, Layout::row_major(n));
    let out_shape = Shape3(x.shape.0.map(|v| v * 2));
    let mut y = Tensor::zeros(cout, out_shape);
    scatter_upconv(&cols, x.shape, out_shape, cout, |dst, v| *dst = v, &mut y);
    y
}

fn scatter_upconv(
    cols: &[f32],
    in_shape: Shape3,
    out_shape: Shape3,
    cout: usize,
    op: impl Fn(&mut f32, f32),
    y: &mut Tensor,
) {
    let n = in_shape.len();
    for co in 0..cout {
        let dst = y.channel_mut(co);
        for k in 0..8 {
            let (dz, dy, dx) = (k / 4, (k / 2) % 2, k % 2);
            let src = &cols[(co * 8 + k) * n..(co * 8 + k + 1) * n];
            for z in 0..in_shape.d() {
                for yy in 0..in_shape.h() {
                    let row = (z * in_shape.h() + yy) * in_shape.w();
                    let orow = out_shape.index(0, 2 * yy + dy, 2 * z + dz);
                    for x in 0..in_shape.w() {
                        op(&mut dst[orow + 2 * x + dx], src[row + x]);
                    }
                }
            }
        }
    }
}

/// Backward of [`upconv`].
pub fn upconv_backward(
    x: &Tensor,
    weight: &[f32],
    dy: &Tensor,
    dweight: &mut [f32],
    want_dx: bool,
) -> Option<Tensor> {
    let cin = x.channels;
    let cout = dy.channels;
    let m = cout * 8;
    let n = x.spatial();
    let mut dcols = vec![0.0; m * n];
    for co in 0..cout {
        let src = dy.channel(co);
        for k in 0..8 {
            let (dz, ddy, ddx) = (k / 4, (k / 2) % 2, k % 2);
            let dst = &mut dcols[(co * 8 + k) * n..(co * 8 + k + 1) * n];
            for z in 0..x.shape.d() {
                for yy in 0..x.shape.h() {
                    let row = (z * x.shape.h() + yy) * x.shape.w();
                    let orow = dy.shape.index(0, 2 * yy + ddy, 2 * z + dz);
                    for xx in 0..x.shape.w() {
                        dst[row + xx] = src[orow + 2 * xx + ddx];
                    }
                }
            }
        }
    }
    // dW[cin×m] += X[cin×n] · dcols^T[n×m]
    gemm(cin, n, m, &x.data, Layout::row_major(n), &dcols, Layout::transposed(n), 1.0, dweight, Layout::row_major(m));
    want_dx.then(|| {
        let mut dx = Tensor::zeros(cin, x.shape);
        // dX[cin×n] = W[cin×m] · dcols[m×n]
        gemm(cin, m, n, weight, Layout::row_major(m), &dcols, Layout::row_major(n), 0.0, &mut dx.data, Layout::row_major(n));
        dx
    })
}

/// Per-channel normalized activations saved for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
}

/// Affine instance normalization over the spatial extent of each channel.
pub fn instance_norm(x: &Tensor, gamma: &[f32], beta: &[f32]) -> (Tensor, NormCache) {
    let n = x.spatial() as f64;
    let mut xhat = Tensor::zeros(x.channels, x.shape);
    let mut y = Tensor::zeros(x.channels, x.shape);
    let mut inv_std = Vec::with_capacity(x.channels);
    for c in 0..x.channels {
        let src = x.channel(c);
        let mean = src.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let istd = 1.0 / (var + NORM_EPS as f64).sqrt();
        inv_std.push(istd as f32);
        let (g, b) = (gamma[c], beta[c]);
        let xh = xhat.channel_mut(c);
        for (h, &v) in xh.iter_mut().zip(src) {
            *h = ((v as f64 - mean) * istd) as f32;
        }
        for (o, &h) in y.channel_mut(c).iter_mut().zip(xhat.channel(c)) {
            *o = g * h + b;
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// Backward of [`instance_norm`]; accumulates parameter gradients.
pub fn instance_norm_backward(
    cache: &NormCache,
    gamma: &[f32],
    dy: &Tensor,
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) -> Tensor {
    let n = dy.spatial() as f64;
    let mut dx = Tensor::zeros(dy.channels, dy.shape);
    for c in 0..dy.channels {
        let g = dy.channel(c);
        let xh = cache.xhat.channel(c);
        let sum_g: f64 = g.iter().map(|&v| v as f64).sum();
        let sum_gx: f64 = g.iter().zip(xh).map(|(&a, &b)| a as f64 * b as f64).sum();
        dgamma[c] += sum_gx as f32;
        dbeta[c] += sum_g as f32;
        let scale = gamma[c] as f64 * cache.inv_std[c] as f64 / n;
        for ((o, &gv), &h) in dx.channel_mut(c).iter_mut().zip(g).zip(xh) {
            *o = (scale * (n * gv as f64 - sum_g - h as f64 * sum_gx)) as f32;
        }
    }
    dx
}

pub fn leaky_relu_inplace(x: &mut Tensor) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Backward of leaky ReLU given the activation *output* (sign-preserving).
pub fn leaky_relu_backward_inplace(out: &Tensor, dy: &mut Tensor) {
    for (g, &o) in dy.data.iter_mut().zip(&out.data) {
        if o < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

/// 1×1×1 convolution with bias: `weight` is `[cout][cin]`.
pub fn pointwise(x: &Tensor, weight: &[f32], bias: &[f32]) -> Tensor {
    let cout = bias.len();
    let n = x.spatial();
    let mut y = Tensor::zeros(cout, x.shape);
    for (c, &b) in bias.iter().enumerate() {
        y.channel_mut(c).fill(b);
    }
    gemm(cout, x.channels, n, weight, Layout::row_major(x.channels), &x.data, Layout::row_major(n), 1.0, &mut y.data, Layout::row_major(n));
    y
}

pub fn pointwise_backward(
    x: &Tensor,
    weight: &[f32],
    dy: &Tensor,
    dweight: &mut [f32],
    dbias: &mut [f32],
) -> Tensor {
    let cout = dy.channels;
    let cin = x.channels;
    let n = x.spatial();
    for (c, db) in dbias.iter_mut().enumerate() {
        *db += dy.channel(c).iter().map(|&v| v as f64).sum::<f64>() as f32;
    }
    gemm(cout, n, cin, &dy.data, Layout::row_major(n), &x.data, Layout::transposed(n), 1.0, dweight, Layout::row_major(cin));
    let mut dx = Tensor::zeros(cin, x.shape);
    gemm(cin, cout, n, weight, Layout::transposed(cin), &dy.data, Layout::row_major(n), 0.0, &mut dx.data, Layout::row_major(n));
    dx
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
        (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    /// Direct-summation convolution used as a reference.
    fn conv_naive(x: &Tensor, w: &[f32], cout: usize, stride: usize) -> Tensor {
        let os = conv_out_shape(x.shape, stride);
        let mut y = Tensor::zeros(cout, os);
        for co in 0..cout {
            for oz in 0..os.d() {
                for oy in 0..os.h() {
                    for ox in 0..os.w() {
                        let mut acc = 0.0f64;
                        for ci in 0..x.channels {
                            for k in 0..27 {
                                let (kz, ky, kx) = (k / 9, (k / 3) % 3, k % 3);
                                let p = [
                                    (ox * stride + kx) as i64 - 1,
                                    (oy * stride + ky) as i64 - 1,
                                    (oz * stride + kz) as i64 - 1,
                                ];
                                if x.shape.contains(p) {
                                    let v = x.channel(ci)
                                        [x.shape.index(p[0] as usize, p[1] as usize, p[2] as usize)];
                                    acc += v as f64 * w[(co * x.channels + ci) * 27 + k] as f64;
                                }
                            }
                        }
                        y.channel_mut(co)[os.index(ox, oy, oz)] = acc as f32;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(shape, stride) in &[(Shape3::new(5, 4, 3), 1), (Shape3::new(6, 4, 8), 2), (Shape3::new(7, 5, 3), 2)] {
            let x = Tensor::from_vec(3, shape, random(&mut rng, 3 * shape.len()));
            let w = random(&mut rng, 2 * 3 * 27);
            let a = conv3d(&x, &w, 2, stride);
            let b = conv_naive(&x, &w, 2, stride);
            assert_eq!(a.shape, b.shape);
            for (p, q) in a.data.iter().zip(&b.data) {
                assert!((p - q).abs() < 1e-5, "{p} vs {q}");
            }
        }
    }

    /// Adjoint identity <conv(x), g> = <x, conv^T(g)> and <W-grad, W> checks.
    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for stride in [1, 2] {
            let shape = Shape3::new(6, 5, 4);
            let x = Tensor::from_vec(2, shape, random(&mut rng, 2 * shape.len()));
            let w = random(&mut rng, 3 * 2 * 27);
            let y = conv3d(&x, &w, 3, stride);
            let g = Tensor::from_vec(3, y.shape, random(&mut rng, y.data.len()));
            let mut dw = vec![0.0; w.len()];
            let dx = conv3d_backward(&x, &w, stride, &g, &mut dw, true).unwrap();
            let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| (a * b) as f64).sum();
            let rhs_x: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| (a * b) as f64).sum();
            let rhs_w: f64 = w.iter().zip(&dw).map(|(a, b)| (a * b) as f64).sum();
            // conv is bilinear: <y, g> equals both contractions.
            assert!((lhs - rhs_x).abs() < 1e-3 * lhs.abs().max(1.0));
            assert!((lhs - rhs_w).abs() < 1e-3 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn upconv_places_each_input_in_its_octant() {
        let x = Tensor::from_vec(1, Shape3::new(2, 1, 1), vec![1.0, 2.0]);
        let w: Vec<f32> = (0..8).map(|k| k as f32).collect();
        let y = upconv(&x, &w, 1);
        assert_eq!(y.shape, Shape3::new(4, 2, 2));
        // input (1,0,0) with offset (dx=1, dy=1, dz=1) -> k = 7
        assert_eq!(y.data[y.shape.index(3, 1, 1)], 2.0 * 7.0);
        assert_eq!(y.data[y.shape.index(0, 0, 0)], 0.0);
        assert_eq!(y.data[y.shape.index(1, 0, 0)], 1.0);
    }

    #[test]
    fn upconv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = Shape3::new(3, 2, 2);
        let x = Tensor::from_vec(3, shape, random(&mut rng, 3 * shape.len()));
        let w = random(&mut rng, 3 * 2 * 8);
        let y = upconv(&x, &w, 2);
        let g = Tensor::from_vec(2, y.shape, random(&mut rng, y.data.len()));
        let mut dw = vec![0.0; w.len()];
        let dx = upconv_backward(&x, &w, &g, &mut dw, true).unwrap();
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| (a * b) as f64).sum();
        let rx: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| (a * b) as f64).sum();
        let rw: f64 = w.iter().zip(&dw).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rx).abs() < 1e-4 * lhs.abs().max(1.0));
        assert!((lhs - rw).abs() < 1e-4 * lhs.abs().max(1.0));
    }

    #[test]
    fn instance_norm_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_vec(2, Shape3::cube(4), random(&mut rng, 128));
        let (y, _) = instance_norm(&x, &[1.0, 2.0], &[0.0, 1.0]);
        let c0 = y.channel(0);
        let mean: f32 = c0.iter().sum::<f32>() / 64.0;
        let var: f32 = c0.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 64.0;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-3);
        let mean1: f32 = y.channel(1).iter().sum::<f32>() / 64.0;
        assert!((mean1 - 1.0).abs() < 1e-5);
    }

    #[test]
    fn instance_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = Shape3::new(3, 2, 2);
        let x = Tensor::from_vec(2, shape, random(&mut rng, 24));
        let gamma = [1.3f32, -0.7];
        let beta = [0.1f32, 0.2];
        let g = Tensor::from_vec(2, shape, random(&mut rng, 24));
        let loss = |x: &Tensor| -> f64 {
            let (y, _) = instance_norm(x, &gamma, &beta);
            y.data.iter().zip(&g.data).map(|(a, b)| (a * b) as f64).sum()
        };
        let (_, cache) = instance_norm(&x, &gamma, &beta);
        let (mut dg, mut db) = ([0.0; 2], [0.0; 2]);
        let dx = instance_norm_backward(&cache, &gamma, &g, &mut dg, &mut db);
        let h = 1e-2f32;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h as f64);
            assert!((fd - dx.data[i] as f64).abs() < 2e-3, "{i}: {fd} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn pointwise_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::from_vec(4, Shape3::cube(2), random(&mut rng, 32));
        let w = random(&mut rng, 4);
        let y = pointwise(&x, &w, &[0.5]);
        assert!((y.data[0] - (0.5 + (0..4).map(|c| w[c] * x.data[c * 8]).sum::<f32>())).abs() < 1e-6);
        let g = Tensor::from_vec(1, Shape3::cube(2), random(&mut rng, 8));
        let (mut dw, mut db) = (vec![0.0; 4], vec![0.0]);
        let dx = pointwise_backward(&x, &w, &g, &mut dw, &mut db);
        let sum_g: f32 = g.data.iter().sum();
        assert!((db[0] - sum_g).abs() < 1e-5);
        for c in 0..4 {
            let want: f32 = (0..8).map(|i| g.data[i] * x.data[c * 8 + i]).sum();
            assert!((dw[c] - want).abs() < 1e-5);
            assert!((dx.data[c * 8 + 3] - w[c] * g.data[3]).abs() < 1e-6);
        }
    }
}
