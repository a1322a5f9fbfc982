//! Dense multi-channel 3D feature maps and a safe GEMM wrapper.

use crate::volume::Shape3;

/// Channel-major feature map: `data[c * N + index(x, y, z)]`, `N = shape.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub shape: Shape3,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, shape: Shape3) -> Self {
        Tensor {
            channels,
            shape,
            data: vec![0.0; channels * shape.len()],
        }
    }

    pub fn from_vec(channels: usize, shape: Shape3, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * shape.len(), "tensor payload size");
        Tensor {
            channels,
            shape,
            data,
        }
    }

    /// Spatial voxel count.
    pub fn spatial(&self) -> usize {
        self.shape.len()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.spatial();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.spatial();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Stack `a` then `b` along the channel axis.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape, b.shape, "concat spatial shapes");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor {
            channels: a.channels + b.channels,
            shape: a.shape,
            data,
        }
    }

    /// Inverse of [`Tensor::concat`]: split after `first` channels.
    pub fn split(self, first: usize) -> (Tensor, Tensor) {
        let n = self.spatial();
        let mut data = self.data;
        let tail = data.split_off(first * n);
        (
            Tensor {
                channels: first,
                shape: self.shape,
                data,
            },
            Tensor {
                channels: self.channels - first,
                shape: self.shape,
                data: tail,
            },
        )
    }
}

/// Row/column strides of a matrix operand.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    /// Row-major with `cols` columns.
    pub const fn row_major(cols: usize) -> Self {
        Layout { rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub const fn transposed(cols: usize) -> Self {
        Layout { rs: 1, cs: cols }
    }

    fn max_index(self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `C = A·B + beta·C` for `A: m×k`, `B: k×n`, `C: m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    beta: f32,
    c: &mut [f32],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[i * lc.rs + j * lc.cs];
                *v *= beta;
            }
        }
        return;
    }
    assert!(la.max_index(m, k) < a.len(), "gemm: A out of bounds");
    assert!(lb.max_index(k, n) < b.len(), "gemm: B out of bounds");
    assert!(lc.max_index(m, n) < c.len(), "gemm: C out of bounds");
    // SAFETY: every index touched by sgemm is bounded by the asserts above,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i % 7) as f32 - 3.0).collect();
        let mut c = vec![1.0; m * n];
        gemm(m, k, n, &a, Layout::row_major(k), &b, Layout::row_major(n), 1.0, &mut c, Layout::row_major(n));
        for i in 0..m {
            for j in 0..n {
                let want: f32 = 1.0 + (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum::<f32>();
                assert!((c[i * n + j] - want).abs() < 1e-5);
            }
        }
        // A^T stored as k×m row-major.
        let at: Vec<f32> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, Layout::transposed(m), &b, Layout::row_major(n), 0.0, &mut c2, Layout::row_major(n));
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - 1.0 - y).abs() < 1e-5);
        }
    }

    #[test]
    fn concat_then_split_is_identity() {
        let s = Shape3::cube(2);
        let a = Tensor::from_vec(2, s, (0..16).map(|i| i as f32).collect());
        let b = Tensor::from_vec(1, s, vec![9.0; 8]);
        let c = Tensor::concat(&a, &b);
        assert_eq!(c.channels, 3);
        let (a2, b2) = c.split(2);
        assert_eq!((a2, b2), (a, b));
    }
}
