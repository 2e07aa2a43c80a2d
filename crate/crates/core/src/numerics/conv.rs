//! im2col convolution kernels over raw buffers. Shape checking happens in the tape.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// C (m×n) = alpha·A·B + beta·C with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers whose extents cover the described
    // m×k, k×n and m×n layouts; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(g: &ConvGeometry, image: &[f64], cols: &mut [f64]) {
    let ncol = g.col_cols();
    for ch in 0..g.c {
        let plane = &image[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ki) as isize - g.padding as isize;
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + kj) as isize - g.padding as isize;
                        dst[oy * g.ow + ox] =
                            if y >= 0 && x >= 0 && (y as usize) < g.h && (x as usize) < g.w {
                                plane[y as usize * g.w + x as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, cols: &[f64], image: &mut [f64]) {
    let ncol = g.col_cols();
    for ch in 0..g.c {
        let plane = &mut image[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ki) as isize - g.padding as isize;
                    if y < 0 || y as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + kj) as isize - g.padding as isize;
                        if x >= 0 && (x as usize) < g.w {
                            plane[y as usize * g.w + x as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let in_stride = g.c * g.h * g.w;
    let out_stride = g.f * ncol;
    let mut out = vec![0.0; g.n * out_stride];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * ncol]
    };
    for n in 0..g.n {
        let image = &input[n * in_stride..(n + 1) * in_stride];
        let b: &[f64] = if g.is_pointwise() {
            image
        } else {
            im2col(g, image, &mut cols);
            &cols
        };
        gemm(
            g.f,
            rows,
            ncol,
            kernel,
            rows,
            1,
            b,
            ncol,
            1,
            0.0,
            &mut out[n * out_stride..(n + 1) * out_stride],
        );
    }
    out
}

/// Returns (d_input, d_kernel); either is skipped when not wanted.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    d_out: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let in_stride = g.c * g.h * g.w;
    let out_stride = g.f * ncol;
    let mut d_input = want_input.then(|| vec![0.0; input.len()]);
    let mut d_kernel = want_kernel.then(|| vec![0.0; kernel.len()]);
    let mut cols = vec![0.0; rows * ncol];
    let mut d_cols = vec![0.0; rows * ncol];
    for n in 0..g.n {
        let image = &input[n * in_stride..(n + 1) * in_stride];
        let dy = &d_out[n * out_stride..(n + 1) * out_stride];
        if let Some(dk) = d_kernel.as_mut() {
            let b: &[f64] = if g.is_pointwise() {
                image
            } else {
                im2col(g, image, &mut cols);
                &cols
            };
            // dK (F×rows) += dY (F×ncol) · colsᵀ (ncol×rows)
            gemm(g.f, ncol, rows, dy, ncol, 1, b, 1, ncol, 1.0, dk);
        }
        if let Some(dx) = d_input.as_mut() {
            let dx_n = &mut dx[n * in_stride..(n + 1) * in_stride];
            if g.is_pointwise() {
                // dX (C×ncol) = Kᵀ (C×F) · dY (F×ncol)
                gemm(rows, g.f, ncol, kernel, 1, rows, dy, ncol, 1, 1.0, dx_n);
            } else {
                gemm(
                    rows,
                    g.f,
                    ncol,
                    kernel,
                    1,
                    rows,
                    dy,
                    ncol,
                    1,
                    0.0,
                    &mut d_cols,
                );
                col2im_add(g, &d_cols, dx_n);
            }
        }
    }
    (d_input, d_kernel)
}
