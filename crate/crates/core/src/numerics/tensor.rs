use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of bounds for extent {d}");
            acc * d + i
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a[m,k] · b[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    Tensor::new(&[m, n], matmul_raw(a.data(), b.data(), m, k, n))
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::dim(format!("matmul of {a:?} and {b:?}")));
    }
    Ok((a[0], a[1], b[1]))
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m,k] · b[n,k]ᵀ`.
pub(crate) fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[k,m]ᵀ · b[k,n]`.
pub(crate) fn matmul_at_b(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Geometry of a 2-D convolution over a `[C,H,W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects input [C,H,W] and kernel [O,C,P,P], got {input:?} and {kernel:?}"
            )));
        }
        let (c, h, w) = (input[0], input[1], input[2]);
        let (kc, kh, kw) = (kernel[1], kernel[2], kernel[3]);
        if kc != c || kh != kw {
            return Err(Error::dim(format!(
                "kernel {kernel:?} incompatible with input {input:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            kernel: kh,
            stride,
            pad,
            out_height: (h + 2 * pad - kh) / stride + 1,
            out_width: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Unfolds the input into `[positions, C·P·P]`.
    pub(crate) fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let plen = self.patch_len();
        let mut cols = vec![0.0; self.positions() * plen];
        self.for_each_tap(|pos, col, src| {
            if let Some(s) = src {
                cols[pos * plen + col] = x[s];
            }
        });
        cols
    }

    /// Folds `[positions, C·P·P]` back onto the input, summing overlaps.
    pub(crate) fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let plen = self.patch_len();
        let mut x = vec![0.0; self.channels * self.height * self.width];
        self.for_each_tap(|pos, col, src| {
            if let Some(s) = src {
                x[s] += cols[pos * plen + col];
            }
        });
        x
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, Option<usize>)) {
        let k = self.kernel;
        for oy in 0..self.out_height {
            for ox in 0..self.out_width {
                let pos = oy * self.out_width + ox;
                for c in 0..self.channels {
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            let col = (c * k + ky) * k + kx;
                            let inside = iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.height
                                && (ix as usize) < self.width;
                            let src = inside.then(|| {
                                (c * self.height + iy as usize) * self.width + ix as usize
                            });
                            f(pos, col, src);
                        }
                    }
                }
            }
        }
    }
}

/// Convolution without padding: `input[C,H,W] * kernel[O,C,P,P]` → `[O,H',W']`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    conv2d_padded(input, kernel, stride, 0)
}

pub fn conv2d_padded(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let geo = ConvGeometry::new(input.shape(), kernel.shape(), stride, pad)?;
    let o = kernel.shape()[0];
    let cols = geo.im2col(input.data());
    let out = matmul_a_bt(kernel.data(), &cols, o, geo.patch_len(), geo.positions());
    Tensor::new(&[o, geo.out_height, geo.out_width], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Sigmoid,
    Tanh,
    Relu,
}

impl Pointwise {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Pointwise::Sigmoid => sigmoid(x),
            Pointwise::Tanh => x.tanh(),
            Pointwise::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the forward output `y`.
    pub(crate) fn derivative(self, y: f64) -> f64 {
        match self {
            Pointwise::Sigmoid => y * (1.0 - y),
            Pointwise::Tanh => 1.0 - y * y,
            Pointwise::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn pointwise(op: Pointwise, x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| op.apply(x.data()[i]))
}

pub(crate) fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let n = last_dim(x.shape());
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row normalization over the last dimension followed by `gain ⊙ x̂ + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = last_dim(x.shape());
    if gain.numel() != n || bias.numel() != n {
        return Err(Error::dim(format!(
            "layer_norm affine params must have {n} values"
        )));
    }
    let (normed, _) = layer_norm_rows(x.data(), n);
    let out = normed
        .chunks(n)
        .flat_map(|row| {
            row.iter()
                .zip(gain.data())
                .zip(bias.data())
                .map(|((v, g), b)| v * g + b)
        })
        .collect();
    Tensor::new(x.shape(), out)
}

/// Returns the normalized rows and each row's reciprocal standard deviation.
pub(crate) fn layer_norm_rows(x: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut normed = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / n);
    for row in x.chunks(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        normed.extend(row.iter().map(|v| (v - mean) * r));
        rstd.push(r);
    }
    (normed, rstd)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_product() {
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap().data(), b.data());
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_patch_sum() {
        let x = Tensor::ones(&[1, 4, 4]);
        let k = Tensor::ones(&[1, 1, 4, 4]);
        let y = conv2d(&x, &k, 4).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.item(), 16.0);

        let z = conv2d(&x, &Tensor::zeros(&[1, 1, 4, 4]), 4).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_kernel_too_large() {
        let x = Tensor::ones(&[1, 2, 2]);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_output_extent() {
        let x = Tensor::ones(&[2, 9, 9]);
        let k = Tensor::ones(&[3, 2, 3, 3]);
        assert_eq!(conv2d(&x, &k, 2).unwrap().shape(), &[3, 4, 4]);
        assert_eq!(conv2d_padded(&x, &k, 1, 1).unwrap().shape(), &[3, 9, 9]);
    }

    #[test]
    fn pointwise_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(0.0f64.tanh(), 0.0);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert_eq!(Pointwise::Relu.apply(-2.0), 0.0);
    }

    #[test]
    fn softmax_rows() {
        let x = Tensor::new(&[2, 2], vec![0.0, 0.0, 1f64.ln(), 3f64.ln()]).unwrap();
        let y = softmax_lastdim(&x);
        assert_eq!(&y.data()[..2], &[0.5, 0.5]);
        assert!((y.data()[2] - 0.25).abs() < 1e-15);
        assert!((y.data()[3] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_row() {
        let x = Tensor::full(&[1, 4], 3.0);
        let y = layer_norm(&x, &Tensor::ones(&[4]), &Tensor::zeros(&[4])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_standardizes() {
        let x = Tensor::new(&[1, 4], vec![1.0, 2.0, 3.0, 10.0]).unwrap();
        let y = layer_norm(&x, &Tensor::ones(&[4]), &Tensor::zeros(&[4])).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(&[2, 2], vec![1.0]).is_err());
    }
}
