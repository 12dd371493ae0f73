//! Dense tensors, binary masks and the elementary kernels built on them.
//!
//! Feature maps are channel-first (`c x h x w`), row-major, width innermost.
//! Attention maps are rank 2 (`rows x cols`).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extents of a tensor. Every extent is at least one.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Shape("rank must be at least 1".into()));
        }
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(Error::Shape(format!("extent {axis} of {dims:?} is zero")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Shape(format!("element count of {dims:?} overflows")))?;
        Ok(Self {
            dims: dims.to_vec(),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join("x"))
    }
}

/// Dense row-major `f32` tensor.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(dims: &[usize], value: f32) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.numel()];
        Ok(Self { shape, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::filled(dims, 0.0)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Self::new(dims, self.data)
    }

    /// `(c, h, w)` of a rank-3 feature map.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match *self.dims() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected a c x h x w feature map, got {:?}",
                self.shape
            ))),
        }
    }

    /// `(rows, cols)` of a rank-2 matrix.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match *self.dims() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!(
                "expected a matrix, got {:?}",
                self.shape
            ))),
        }
    }

    /// Spatial `(h, w)` of a rank-2 grid or the trailing two axes of a rank-3 map.
    pub fn spatial(&self) -> Result<(usize, usize)> {
        match *self.dims() {
            [h, w] | [_, h, w] => Ok((h, w)),
            _ => Err(Error::Shape(format!(
                "tensor {:?} has no spatial grid",
                self.shape
            ))),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let cols = *self.dims().last().unwrap();
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Feature vector at pixel `(y, x)` of a `c x h x w` map.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f32> {
        let (c, h, w) = self.chw().expect("pixel() needs a feature map");
        (0..c).map(|ch| self.data[ch * h * w + y * w + x]).collect()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| if a == b { 0.0 } else { (a - b).abs() })
            .fold(0.0, f32::max))
    }
}

/// Two-dimensional {0,1} grid.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BinaryMask({}x{}, {} set)", self.height, self.width, self.count())
    }
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        Shape::new(&[height, width])?;
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        if let Some(i) = bits.iter().position(|&b| b > 1) {
            return Err(Error::Shape(format!(
                "mask element {i} is {}, expected 0 or 1",
                bits[i]
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![1; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x) as u8);
            }
        }
        Self::new(height, width, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Flattened row-major bits.
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    fn check_same(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::dim(op, self.dims(), other.dims()));
        }
        Ok(())
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other, "mask and")?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| a & b).collect();
        Ok(self.with_bits(bits))
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other, "mask or")?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| a | b).collect();
        Ok(self.with_bits(bits))
    }

    pub fn complement(&self) -> BinaryMask {
        self.with_bits(self.bits.iter().map(|b| 1 - b).collect())
    }

    pub fn intersects(&self, other: &BinaryMask) -> Result<bool> {
        self.check_same(other, "mask intersects")?;
        Ok(self.bits.iter().zip(&other.bits).any(|(a, b)| a & b == 1))
    }

    /// Mask as a `1 x h x w` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[1, self.height, self.width],
            self.bits.iter().map(|&b| b as f32).collect(),
        )
        .expect("mask extents are valid")
    }

    fn with_bits(&self, bits: Vec<u8>) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits,
        }
    }
}

/// Checks that a feature map and a mask share a spatial grid.
pub(crate) fn check_grid(op: &'static str, t: &Tensor, mask: &BinaryMask) -> Result<()> {
    let grid = t.spatial()?;
    if grid != mask.dims() {
        return Err(Error::dim(op, t.shape(), mask.dims()));
    }
    Ok(())
}

/// Dot product with eight independent accumulators. The fixed lane split keeps
/// the result deterministic while letting the compiler vectorise the loop.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for k in 0..chunks {
        let (xa, xb) = (&a[k * 8..k * 8 + 8], &b[k * 8..k * 8 + 8]);
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Multiplies a feature map by a same-shaped tensor, or by a `1 x h x w`
/// (or `h x w`) tensor broadcast over channels.
pub fn elementwise_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        return Tensor::new(a.dims(), data);
    }
    let (c, h, w) = a.chw()?;
    let plane = match *b.dims() {
        [1, bh, bw] | [bh, bw] if (bh, bw) == (h, w) => b.data(),
        _ => return Err(Error::dim("elementwise_mul", a.shape(), b.shape())),
    };
    let mut out = a.data().to_vec();
    for ch in 0..c {
        for (o, m) in out[ch * h * w..(ch + 1) * h * w].iter_mut().zip(plane) {
            *o *= m;
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Multiplies every channel of a feature map by a binary mask.
pub fn mask_mul(a: &Tensor, mask: &BinaryMask) -> Result<Tensor> {
    let (c, h, w) = a.chw()?;
    check_grid("mask_mul", a, mask)?;
    let mut out = a.data().to_vec();
    for ch in 0..c {
        for (o, &m) in out[ch * h * w..(ch + 1) * h * w].iter_mut().zip(mask.bits()) {
            if m == 0 {
                *o = 0.0;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Concatenates feature maps along the channel axis, preserving order.
pub fn channel_concat(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Config("channel_concat needs at least one part".into()))?;
    let (_, h, w) = first.chw()?;
    let mut channels = 0;
    for part in parts {
        let (c, ph, pw) = part.chw()?;
        if (ph, pw) != (h, w) {
            return Err(Error::dim("channel_concat", first.shape(), part.shape()));
        }
        channels += c;
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for part in parts {
        data.extend_from_slice(part.data());
    }
    Tensor::new(&[channels, h, w], data)
}

/// 1x1 convolution: `out[o,y,x] = sum_i weights[o,i] * x[i,y,x] + bias[o]`.
pub fn conv1x1(x: &Tensor, weights: &Tensor, bias: &[f32]) -> Result<Tensor> {
    let (c_in, h, w) = x.chw()?;
    let (c_out, w_in) = weights.matrix_dims()?;
    if w_in != c_in {
        return Err(Error::dim("conv1x1", weights.shape(), x.shape()));
    }
    if bias.len() != c_out {
        return Err(Error::dim("conv1x1 bias", bias.len(), c_out));
    }
    let plane = h * w;
    let mut out = vec![0.0f32; c_out * plane];
    for o in 0..c_out {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.fill(bias[o]);
        for (i, &wt) in weights.row(o).iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            let src = &x.data()[i * plane..(i + 1) * plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wt * s;
            }
        }
    }
    Tensor::new(&[c_out, h, w], out)
}

/// Row-wise softmax of a rank-2 map. Entries equal to negative infinity
/// receive exactly zero weight; a row with no finite entry is an error.
pub fn row_softmax(a: &Tensor) -> Result<Tensor> {
    let (rows, cols) = a.matrix_dims()?;
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        let src = a.row(r);
        let max = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if max == f32::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: r });
        }
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0f64;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = if s == f32::NEG_INFINITY {
                0.0
            } else {
                (s - max).exp()
            };
            sum += *d as f64;
        }
        let inv = (1.0 / sum) as f32;
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    Tensor::new(&[rows, cols], out)
}

fn source_coord(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f32) {
    let scale = in_len as f32 / out_len as f32;
    let src = ((dst as f32 + 0.5) * scale - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f32)
}

/// Bilinear resize with half-pixel centres (corner alignment off). Accepts
/// `h x w` grids and `c x h x w` maps; same-size input is returned unchanged.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    Shape::new(&[height, width])?;
    let (in_h, in_w) = x.spatial()?;
    if (in_h, in_w) == (height, width) {
        return Ok(x.clone());
    }
    let channels = if x.shape().rank() == 3 { x.dims()[0] } else { 1 };
    let rows: Vec<_> = (0..height).map(|y| source_coord(y, in_h, height)).collect();
    let cols: Vec<_> = (0..width).map(|x| source_coord(x, in_w, width)).collect();
    let mut out = Vec::with_capacity(channels * height * width);
    for ch in 0..channels {
        let src = &x.data()[ch * in_h * in_w..(ch + 1) * in_h * in_w];
        for &(y0, y1, ly) in &rows {
            for &(x0, x1, lx) in &cols {
                let top = src[y0 * in_w + x0] * (1.0 - lx) + src[y0 * in_w + x1] * lx;
                let bottom = src[y1 * in_w + x0] * (1.0 - lx) + src[y1 * in_w + x1] * lx;
                out.push(top * (1.0 - ly) + bottom * ly);
            }
        }
    }
    let mut dims = x.dims().to_vec();
    let rank = dims.len();
    dims[rank - 2] = height;
    dims[rank - 1] = width;
    Tensor::new(&dims, out)
}

/// Value written on a region whose values are all equal.
pub const DEGENERATE_REGION_VALUE: f32 = 0.5;

/// Min-max normalises a `1 x h x w` map over the active pixels of `region`.
/// Inactive pixels become 0; a constant region maps to
/// [`DEGENERATE_REGION_VALUE`]; an empty region yields all zeros.
pub fn masked_minmax_normalize(values: &Tensor, region: &BinaryMask) -> Result<Tensor> {
    let (c, h, w) = values.chw()?;
    if c != 1 {
        return Err(Error::Shape(format!(
            "masked_minmax_normalize expects one channel, got {c}"
        )));
    }
    check_grid("masked_minmax_normalize", values, region)?;
    let active = || {
        values
            .data()
            .iter()
            .zip(region.bits())
            .filter(|(_, &m)| m == 1)
            .map(|(&v, _)| v)
    };
    let min = active().fold(f32::INFINITY, f32::min);
    let max = active().fold(f32::NEG_INFINITY, f32::max);
    let out = values
        .data()
        .iter()
        .zip(region.bits())
        .map(|(&v, &m)| {
            if m == 0 {
                0.0
            } else if max > min {
                (v - min) / (max - min)
            } else {
                DEGENERATE_REGION_VALUE
            }
        })
        .collect();
    Tensor::new(&[1, h, w], out)
}
