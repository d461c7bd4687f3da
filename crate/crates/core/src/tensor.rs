//! Dense row-major tensors with channels-last (H, W, C) image layout, plus the
//! raw numeric kernels the autodiff graph builds on.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err!("dimensions must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("full: invalid shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(&[n], data).expect("from_vec: empty data")
    }

    /// Gaussian samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor::new(shape, data).expect("randn: invalid shape")
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(shape, data).expect("uniform: invalid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Interpret as an image `(H, W, C)`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            [h, w] => Ok((h, w, 1)),
            _ => Err(shape_err!("expected an (H, W, C) tensor, got {:?}", self.shape)),
        }
    }

    pub fn at3(&self, y: usize, x: usize, c: usize) -> f64 {
        let (_, w, ch) = self.dims3().expect("at3 on non-image tensor");
        self.data[(y * w + x) * ch + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} contains non-finite values")))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Copy of channels `start..start + len` of an image tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let (h, w, c) = self.dims3()?;
        if len == 0 || start + len > c {
            return Err(shape_err!("channel slice {start}+{len} out of range for {c} channels"));
        }
        let mut out = Vec::with_capacity(h * w * len);
        for px in self.data.chunks_exact(c) {
            out.extend_from_slice(&px[start..start + len]);
        }
        Tensor::new(&[h, w, len], out)
    }

    /// Horizontal mirror of an image tensor.
    pub fn flip_horizontal(&self) -> Tensor {
        let (h, w, c) = self.dims3().expect("flip on non-image tensor");
        let mut out = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + x) * c;
                let dst = (y * w + (w - 1 - x)) * c;
                out[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        Tensor { shape: self.shape.clone(), data: out }
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: bounds on every accessed element are asserted above; c is row-major m x n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Geometry of one 2-D convolution in channels-last layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (h, w, cin) = input.dims3()?;
        let (kh, kw, kcin, cout) = match kernel.shape() {
            &[a, b, c, d] => (a, b, c, d),
            s => return Err(shape_err!("conv kernel must be 4-D (kh, kw, cin, cout), got {s:?}")),
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err!("conv kernel sides must be odd, got {kh}x{kw}"));
        }
        if kcin != cin {
            return Err(shape_err!("kernel expects {kcin} input channels, input has {cin}"));
        }
        if bias.shape() != [cout] {
            return Err(shape_err!("bias shape {:?} does not match {cout} outputs", bias.shape()));
        }
        if stride == 0 {
            return Err(shape_err!("stride must be >= 1"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(shape_err!("kernel {kh}x{kw} larger than padded input {h}x{w}"));
        }
        let out_h = (h + 2 * padding - kh) / stride + 1;
        let out_w = (w + 2 * padding - kw) / stride + 1;
        Ok(ConvGeom { h, w, cin, kh, kw, cout, stride, padding, out_h, out_w })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold input patches into a (out_pixels x kh*kw*cin) matrix.
fn im2col(g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let plen = g.patch_len();
    let mut col = vec![0.0; g.pixels() * plen];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut col[(oy * g.out_w + ox) * plen..][..plen];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.kw + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&input[src..src + g.cin]);
                }
            }
        }
    }
    col
}

fn col2im(g: &ConvGeom, col: &[f64]) -> Vec<f64> {
    let plen = g.patch_len();
    let mut out = vec![0.0; g.h * g.w * g.cin];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &col[(oy * g.out_w + ox) * plen..][..plen];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (ky * g.kw + kx) * g.cin;
                    for (o, v) in out[dst..dst + g.cin].iter_mut().zip(&row[src..src + g.cin]) {
                        *o += v;
                    }
                }
            }
        }
    }
    out
}

/// Cross-correlation forward. Returns the output and the unfolded input for reuse in backward.
pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let col = im2col(g, input);
    let (m, k, n) = (g.pixels(), g.patch_len(), g.cout);
    let mut out = Vec::with_capacity(m * n);
    for _ in 0..m {
        out.extend_from_slice(bias);
    }
    gemm(m, k, n, 1.0, &col, k, 1, kernel, n, 1, 1.0, &mut out);
    (out, col)
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    col: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let (m, k, n) = (g.pixels(), g.patch_len(), g.cout);
    let input = need[0].then(|| {
        let mut dcol = vec![0.0; m * k];
        // dcol = dY (m x n) * K^T (n x k)
        gemm(m, n, k, 1.0, grad_out, n, 1, kernel, 1, n, 0.0, &mut dcol);
        col2im(g, &dcol)
    });
    let kernel_grad = need[1].then(|| {
        let mut dk = vec![0.0; k * n];
        // dK = col^T (k x m) * dY (m x n)
        gemm(k, m, n, 1.0, col, 1, k, grad_out, n, 1, 0.0, &mut dk);
        dk
    });
    let bias = need[2].then(|| {
        let mut db = vec![0.0; n];
        for row in grad_out.chunks_exact(n) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        db
    });
    ConvGrads { input, kernel: kernel_grad, bias }
}

/// Convenience wrapper that checks shapes and finiteness.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input, kernel, bias, stride, padding)?;
    input.check_finite("conv2d input")?;
    let (out, _) = conv2d_forward(&g, input.data(), kernel.data(), bias.data());
    Tensor::new(&[g.out_h, g.out_w, g.cout], out)
}

/// Per-pixel softmax over the channel axis with max subtraction.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let (h, w, c) = logits.dims3()?;
    let mut out = logits.data().to_vec();
    for px in out.chunks_exact_mut(c) {
        let max = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in px.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in px.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(&[h, w, c], out)
}

/// Bilinear resize with half-pixel centres; source coordinates clamp at the borders.
pub fn resize_bilinear(image: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    let (h, w, c) = image.dims3()?;
    if new_h == 0 || new_w == 0 {
        return Err(shape_err!("resize target must be positive, got {new_h}x{new_w}"));
    }
    let taps = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
            .clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let cols: Vec<_> = (0..new_w).map(|x| taps(x, w, new_w)).collect();
    let src = image.data();
    let mut out = Vec::with_capacity(new_h * new_w * c);
    for y in 0..new_h {
        let (y0, y1, fy) = taps(y, h, new_h);
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    let shape: Vec<usize> = if image.shape().len() == 2 { vec![new_h, new_w] } else { vec![new_h, new_w, c] };
    Tensor::new(&shape, out)
}
