//! Eager (non-recording) forward operations on feature maps and matrices.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{ConvWeights, FeatureMap, Matrix};

pub fn conv2d(x: &FeatureMap, w: &ConvWeights, stride: usize, padding: usize) -> Result<FeatureMap> {
    let geom = ConvGeom::new(
        x.dims(),
        (w.out_channels(), w.in_channels(), w.kernel_h(), w.kernel_w()),
        stride,
        padding,
    )?;
    let out = kernels::conv_forward(x.data(), w.weights(), w.bias(), &geom);
    FeatureMap::new(geom.out_channels, geom.out_height, geom.out_width, out)
}

/// Stacks the per-position channel max (channel 0) and mean (channel 1).
pub fn channel_pool_concat(x: &FeatureMap) -> FeatureMap {
    let (out, _) = kernels::channel_pool(x.data(), x.channels(), x.positions());
    FeatureMap::new(2, x.height(), x.width(), out).expect("pool output shape")
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let out = kernels::softmax_rows(m.data(), m.rows(), m.cols());
    Matrix::new(m.rows(), m.cols(), out).expect("softmax output shape")
}

pub fn sigmoid_map(x: &FeatureMap) -> FeatureMap {
    let data = x.data().iter().map(|&v| kernels::sigmoid(v)).collect();
    FeatureMap::new(x.channels(), x.height(), x.width(), data).expect("sigmoid output shape")
}

pub fn relu_map(x: &FeatureMap) -> FeatureMap {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    FeatureMap::new(x.channels(), x.height(), x.width(), data).expect("relu output shape")
}

pub fn nearest_upsample(x: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    if factor == 0 {
        return Err(Error::invalid("nearest_upsample", "factor must be at least 1"));
    }
    let (c, h, w) = x.dims();
    let out = kernels::upsample_nearest(x.data(), c, h, w, factor);
    FeatureMap::new(c, h * factor, w * factor, out)
}

/// Keeps the top-left `height × width` window.
pub fn crop(x: &FeatureMap, height: usize, width: usize) -> Result<FeatureMap> {
    if height == 0 || height > x.height() || width == 0 || width > x.width() {
        return Err(Error::invalid(
            "crop",
            format!("window {height}x{width} outside map {}x{}", x.height(), x.width()),
        ));
    }
    Ok(FeatureMap::from_fn(x.channels(), height, width, |c, y, xx| x.get(c, y, xx)))
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::shape("matmul", "inner dimension", a.cols(), b.rows()));
    }
    let out = kernels::matmul(a.data(), b.data(), a.rows(), a.cols(), b.cols());
    Matrix::new(a.rows(), b.cols(), out)
}

/// `(C, H, W)` feature map → `(H·W) × C` token matrix.
pub fn to_tokens(x: &FeatureMap) -> Matrix {
    let out = kernels::transpose(x.data(), x.channels(), x.positions());
    Matrix::new(x.positions(), x.channels(), out).expect("token shape")
}

pub fn from_tokens(m: &Matrix, height: usize, width: usize) -> Result<FeatureMap> {
    if m.rows() != height * width {
        return Err(Error::shape("from_tokens", "rows", height * width, m.rows()));
    }
    let out = kernels::transpose(m.data(), m.rows(), m.cols());
    FeatureMap::new(m.cols(), height, width, out)
}
