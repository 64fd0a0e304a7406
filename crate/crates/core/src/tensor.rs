//! Dense containers: a shape-tagged [`Tensor`] used inside computation graphs,
//! plus the typed views the rest of the crate talks in ([`FeatureMap`],
//! [`Matrix`], [`ConvWeights`]).

use rand::Rng;

use crate::error::{Error, Result};

/// Row-major dense array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", "data length", numel, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn random_uniform(shape: Vec<usize>, scale: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-scale..=scale)).collect();
        Self { shape, data }
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

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Equality on the IEEE bit patterns, so `-0.0 != 0.0` and NaNs compare by payload.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// A `channels × height × width` map of reals stored in `(c, y, x)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(
                "feature map",
                format!("dimensions must be positive, got {channels}x{height}x{width}"),
            ));
        }
        let numel = channels * height * width;
        if data.len() != numel {
            return Err(Error::shape("feature map", "data length", numel, data.len()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "feature map dims must be positive");
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut out = Self::zeros(channels, height, width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    out.set(c, y, x, f(c, y, x));
                }
            }
        }
        out
    }

    pub fn random_uniform(
        channels: usize,
        height: usize,
        width: usize,
        lo: f64,
        hi: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self::from_fn(channels, height, width, |_, _, _| rng.random_range(lo..hi))
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Number of spatial positions, `H·W`.
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
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

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.positions();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn bitwise_eq(&self, other: &FeatureMap) -> bool {
        self.dims() == other.dims()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl From<FeatureMap> for Tensor {
    fn from(f: FeatureMap) -> Self {
        Tensor {
            shape: vec![f.channels, f.height, f.width],
            data: f.data,
        }
    }
}

impl TryFrom<Tensor> for FeatureMap {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => FeatureMap::new(c, h, w, t.data),
            _ => Err(Error::shape("feature map", "rank", 3, t.shape.len())),
        }
    }
}

/// Row-major `rows × cols` matrix. Zero-sized matrices are representable so
/// that consumers can reject them with a proper diagnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("matrix", "data length", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("matrix", "row length", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn random_uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

impl From<Matrix> for Tensor {
    fn from(m: Matrix) -> Self {
        Tensor {
            shape: vec![m.rows, m.cols],
            data: m.data,
        }
    }
}

impl TryFrom<Tensor> for Matrix {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        match *t.shape() {
            [r, c] => Matrix::new(r, c, t.data),
            _ => Err(Error::shape("matrix", "rank", 2, t.shape.len())),
        }
    }
}

/// Convolution kernel bank, weights laid out `(out, in, ky, kx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    out_channels: usize,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvWeights {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(Error::invalid("conv weights", "all dimensions must be positive"));
        }
        let n = out_channels * in_channels * kernel_h * kernel_w;
        if weights.len() != n {
            return Err(Error::shape("conv weights", "weight length", n, weights.len()));
        }
        if bias.len() != out_channels {
            return Err(Error::shape("conv weights", "bias length", out_channels, bias.len()));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            weights,
            bias,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            weights: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// 1×1 identity across `channels`.
    pub fn identity(channels: usize) -> Self {
        let mut w = Self::zeros(channels, channels, 1);
        for c in 0..channels {
            w.weights[c * channels + c] = 1.0;
        }
        w
    }

    /// Uniform in `±1/√fan_in`, zero bias.
    pub fn uniform_fan_in(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        let mut w = Self::zeros(out_channels, in_channels, kernel);
        for v in &mut w.weights {
            *v = rng.random_range(-bound..=bound);
        }
        w
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_h(&self) -> usize {
        self.kernel_h
    }

    pub fn kernel_w(&self) -> usize {
        self.kernel_w
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_channels + i) * self.kernel_h + ky) * self.kernel_w + kx]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn weight_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.out_channels, self.in_channels, self.kernel_h, self.kernel_w],
            data: self.weights.clone(),
        }
    }

    pub fn bias_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.out_channels],
            data: self.bias.clone(),
        }
    }

    pub fn from_tensors(weight: &Tensor, bias: &Tensor) -> Result<Self> {
        match *weight.shape() {
            [o, i, kh, kw] => Self::new(o, i, kh, kw, weight.data().to_vec(), bias.data().to_vec()),
            _ => Err(Error::shape("conv weights", "rank", 4, weight.shape().len())),
        }
    }
}
