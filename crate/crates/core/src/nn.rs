//! Dense building blocks for the toy model: GEMM, im2col convolution with
//! edge-replicated padding, SiLU, nearest-neighbour 2× upsampling.
//! Tensors are channel-major (`C×H×W`) `f64` slices.

/// `c = a·b (+ c)` for logical shapes `a: m×k`, `b: k×n`, `c: m×n` (row-major).
/// `*_t` marks an operand stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 3×3 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h.div_ceil(self.stride)
    }

    pub fn out_w(&self) -> usize {
        self.w.div_ceil(self.stride)
    }

    pub fn out_len(&self) -> usize {
        self.out_h() * self.out_w()
    }

    #[cfg(test)]
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * 9
    }

    fn src_index(&self, o: usize, k: usize, len: usize) -> usize {
        (o * self.stride + k).saturating_sub(1).min(len - 1)
    }

    /// `(cin·9) × (out_h·out_w)` patch matrix.
    pub fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let p = oh * ow;
        let mut cols = vec![0.0; self.cin * 9 * p];
        let xs: Vec<[usize; 3]> = (0..ow)
            .map(|ox| std::array::from_fn(|kx| self.src_index(ox, kx, self.w)))
            .collect();
        for ci in 0..self.cin {
            let plane = &input[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                    for oy in 0..oh {
                        let src = &plane[self.src_index(oy, ky, self.h) * self.w..][..self.w];
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        for (d, xi) in dst.iter_mut().zip(&xs) {
                            *d = src[xi[kx]];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-adds a patch-matrix gradient back onto the input gradient.
    pub fn col2im_add(&self, dcols: &[f64], dinput: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let p = oh * ow;
        let xs: Vec<[usize; 3]> = (0..ow)
            .map(|ox| std::array::from_fn(|kx| self.src_index(ox, kx, self.w)))
            .collect();
        for ci in 0..self.cin {
            let plane = &mut dinput[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &dcols[((ci * 9) + ky * 3 + kx) * p..][..p];
                    for oy in 0..oh {
                        let dst = &mut plane[self.src_index(oy, ky, self.h) * self.w..][..self.w];
                        for (g, xi) in row[oy * ow..(oy + 1) * ow].iter().zip(&xs) {
                            dst[xi[kx]] += g;
                        }
                    }
                }
            }
        }
    }

    /// `out = W·cols + b`, `W: cout × cin·9`.
    pub fn forward(&self, weights: &[f64], bias: &[f64], cols: &[f64]) -> Vec<f64> {
        let p = self.out_len();
        let mut out = vec![0.0; self.cout * p];
        for (co, row) in out.chunks_exact_mut(p).enumerate() {
            row.fill(bias[co]);
        }
        gemm(self.cout, self.cin * 9, p, weights, false, cols, false, &mut out, true);
        out
    }

    /// Accumulates `dW`, `db` and returns `dcols` for an output gradient `dout`.
    pub fn backward(
        &self,
        weights: &[f64],
        cols: &[f64],
        dout: &[f64],
        dweights: &mut [f64],
        dbias: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let p = self.out_len();
        let kdim = self.cin * 9;
        gemm(self.cout, p, kdim, dout, false, cols, true, dweights, true);
        for (co, row) in dout.chunks_exact(p).enumerate() {
            dbias[co] += row.iter().sum::<f64>();
        }
        want_input_grad.then(|| {
            let mut dcols = vec![0.0; kdim * p];
            gemm(kdim, self.cout, p, weights, true, dout, false, &mut dcols, false);
            dcols
        })
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Nearest-neighbour 2× upsampling of a `c×h×w` tensor.
pub(crate) fn upsample2(src: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            let s = &src[(ch * h + y / 2) * w..][..w];
            let d = &mut out[(ch * h2 + y) * w2..][..w2];
            for (x, v) in d.iter_mut().enumerate() {
                *v = s[x / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2×2 block.
pub(crate) fn upsample2_backward(grad: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h2 {
            let g = &grad[(ch * h2 + y) * w2..][..w2];
            let d = &mut out[(ch * h + y / 2) * w..][..w];
            for (x, v) in g.iter().enumerate() {
                d[x / 2] += v;
            }
        }
    }
    out
}
