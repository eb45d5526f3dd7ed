//! Dense 2D grids and the sampling, filtering, and differencing kernels
//! shared by every other module.
//!
//! Conventions used throughout the crate:
//! * `x` indexes columns, `y` indexes rows, origin at the top-left pixel
//!   center, row-major storage.
//! * A displacement field `u` is in pixel units and is applied by pull-back:
//!   `warp(img, u)(x) = img(x + u(x))` with bilinear interpolation and
//!   clamp-to-edge behavior outside the grid.
//! * Filters use half-sample symmetric reflection at borders, so constant
//!   inputs are preserved exactly.

mod io;

pub use io::{
    load_image, read_flow, save_image, write_flow, BitDepth,
};

use crate::{Error, Result};

/// Single-channel 2D image, row-major `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image2D {
    /// Validates that `data` has `width * height` finite entries.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation("image dimensions must be nonzero"));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                context: "Image2D::new",
                left: format!("{}x{}", width, height),
                right: format!("{} samples", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Image2D::new".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    /// Internal constructor for op outputs whose inputs were already checked.
    pub(crate) fn from_vec_unchecked(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Image2D) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Dense displacement field; `dx`/`dy` are the column/row components.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField2D {
    width: usize,
    height: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl VectorField2D {
    pub fn new(width: usize, height: usize, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation("field dimensions must be nonzero"));
        }
        if dx.len() != width * height || dy.len() != width * height {
            return Err(Error::DimensionMismatch {
                context: "VectorField2D::new",
                left: format!("{}x{}", width, height),
                right: format!("dx {} / dy {} samples", dx.len(), dy.len()),
            });
        }
        if !dx.iter().chain(dy.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("VectorField2D::new".into()));
        }
        Ok(Self { width, height, dx, dy })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            dx: vec![0.0; width * height],
            dy: vec![0.0; width * height],
        }
    }

    pub(crate) fn from_vecs_unchecked(width: usize, height: usize, dx: Vec<f64>, dy: Vec<f64>) -> Self {
        debug_assert_eq!(dx.len(), width * height);
        debug_assert_eq!(dy.len(), width * height);
        Self { width, height, dx, dy }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, dx: f64, dy: f64) {
        let i = y * self.width + x;
        self.dx[i] = dx;
        self.dy[i] = dy;
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    pub fn dx_mut(&mut self) -> &mut [f64] {
        &mut self.dx
    }

    pub fn dy_mut(&mut self) -> &mut [f64] {
        &mut self.dy
    }

    pub fn dx_image(&self) -> Image2D {
        Image2D::from_vec_unchecked(self.width, self.height, self.dx.clone())
    }

    pub fn dy_image(&self) -> Image2D {
        Image2D::from_vec_unchecked(self.width, self.height, self.dy.clone())
    }

    pub fn from_channels(dx: &Image2D, dy: &Image2D) -> Result<Self> {
        if !dx.same_shape(dy) {
            return Err(Error::DimensionMismatch {
                context: "VectorField2D::from_channels",
                left: format!("{}x{}", dx.width(), dx.height()),
                right: format!("{}x{}", dy.width(), dy.height()),
            });
        }
        Ok(Self {
            width: dx.width(),
            height: dx.height(),
            dx: dx.data().to_vec(),
            dy: dy.data().to_vec(),
        })
    }

    pub fn same_shape(&self, other: &VectorField2D) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Mean Euclidean magnitude over all pixels.
    pub fn mean_magnitude(&self) -> f64 {
        let n = self.dx.len();
        let sum: f64 = (0..n).map(|i| self.dx[i].hypot(self.dy[i])).sum();
        sum / n as f64
    }

    pub fn max_magnitude(&self) -> f64 {
        (0..self.dx.len())
            .map(|i| self.dx[i].hypot(self.dy[i]))
            .fold(0.0, f64::max)
    }
}

/// Per-pixel coefficient vectors over a displacement basis: `m` values per
/// pixel, stored pixel-major (`[(y * width + x) * m + i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    width: usize,
    height: usize,
    m: usize,
    data: Vec<f64>,
}

impl CoefficientField {
    /// Signed coefficients (solver outputs).
    pub fn new(width: usize, height: usize, m: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || m == 0 {
            return Err(Error::validation("coefficient field dimensions must be nonzero"));
        }
        if data.len() != width * height * m {
            return Err(Error::DimensionMismatch {
                context: "CoefficientField::new",
                left: format!("{}x{}x{}", width, height, m),
                right: format!("{} samples", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("CoefficientField::new".into()));
        }
        Ok(Self { width, height, m, data })
    }

    /// Nonnegative coefficients: negatives are clamped to zero at creation.
    /// Use this for optimization variables that must stay in the positive
    /// orthant.
    pub fn nonneg(width: usize, height: usize, m: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Self::new(width, height, m, data)
    }

    pub fn zeros(width: usize, height: usize, m: usize) -> Self {
        Self { width, height, m, data: vec![0.0; width * height * m] }
    }

    pub(crate) fn from_vec_unchecked(width: usize, height: usize, m: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height * m);
        Self { width, height, m, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let base = (y * self.width + x) * self.m;
        &self.data[base..base + self.m]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let base = (y * self.width + x) * self.m;
        &mut self.data[base..base + self.m]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &CoefficientField) -> bool {
        self.width == other.width && self.height == other.height && self.m == other.m
    }
}

/// Normalized 1D Gaussian taps; radius is `ceil(3 sigma)` so the truncated
/// mass is renormalized away.
#[derive(Debug, Clone)]
pub struct GaussianKernel1D {
    sigma: f64,
    radius: usize,
    weights: Vec<f64>,
}

impl GaussianKernel1D {
    pub fn new(sigma: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::validation(format!(
                "gaussian sigma must be finite and positive, got {sigma}"
            )));
        }
        let radius = (3.0 * sigma).ceil() as usize;
        let radius = radius.max(1);
        let mut weights = Vec::with_capacity(2 * radius + 1);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for k in -(radius as isize)..=(radius as isize) {
            let k = k as f64;
            weights.push((-k * k * inv).exp());
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Ok(Self { sigma, radius, weights })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Taps for offsets `-radius..=radius`; symmetric, sums to 1.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Half-sample symmetric reflection of `i` into `[0, n)`.
#[inline]
pub(crate) fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Bilinear sample at continuous coordinates, clamp-to-edge outside the grid.
#[inline]
pub fn bilinear_sample(img: &Image2D, x: f64, y: f64) -> f64 {
    let w = img.width();
    let h = img.height();
    let cx = x.clamp(0.0, (w - 1) as f64);
    let cy = y.clamp(0.0, (h - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    let top = img.get(x0, y0) * (1.0 - fx) + img.get(x1, y0) * fx;
    let bot = img.get(x0, y1) * (1.0 - fx) + img.get(x1, y1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Bilinear sample of a vector field, clamp-to-edge.
#[inline]
pub fn bilinear_sample_field(u: &VectorField2D, x: f64, y: f64) -> (f64, f64) {
    let w = u.width();
    let h = u.height();
    let cx = x.clamp(0.0, (w - 1) as f64);
    let cy = y.clamp(0.0, (h - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    let w00 = (1.0 - fx) * (1.0 - fy);
    let w10 = fx * (1.0 - fy);
    let w01 = (1.0 - fx) * fy;
    let w11 = fx * fy;
    let (a, b) = u.get(x0, y0);
    let (c, d) = u.get(x1, y0);
    let (e, f) = u.get(x0, y1);
    let (g, hh) = u.get(x1, y1);
    (
        a * w00 + c * w10 + e * w01 + g * w11,
        b * w00 + d * w10 + f * w01 + hh * w11,
    )
}

/// Pull-back warp: `out(x) = img(x + u(x))`.
pub fn warp(img: &Image2D, u: &VectorField2D) -> Result<Image2D> {
    if img.width() != u.width() || img.height() != u.height() {
        return Err(Error::DimensionMismatch {
            context: "warp",
            left: format!("{}x{}", img.width(), img.height()),
            right: format!("{}x{}", u.width(), u.height()),
        });
    }
    let mut out = Vec::with_capacity(img.data().len());
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (ux, uy) = u.get(x, y);
            out.push(bilinear_sample(img, x as f64 + ux, y as f64 + uy));
        }
    }
    Ok(Image2D::from_vec_unchecked(img.width(), img.height(), out))
}

/// Central-difference gradient, one-sided at the borders.
/// Requires both dimensions to be at least 2.
pub fn spatial_gradient(img: &Image2D) -> Result<(Image2D, Image2D)> {
    let w = img.width();
    let h = img.height();
    if w < 2 || h < 2 {
        return Err(Error::validation(
            "spatial_gradient requires width and height >= 2",
        ));
    }
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            gx[i] = if x == 0 {
                img.get(1, y) - img.get(0, y)
            } else if x == w - 1 {
                img.get(w - 1, y) - img.get(w - 2, y)
            } else {
                0.5 * (img.get(x + 1, y) - img.get(x - 1, y))
            };
            gy[i] = if y == 0 {
                img.get(x, 1) - img.get(x, 0)
            } else if y == h - 1 {
                img.get(x, h - 1) - img.get(x, h - 2)
            } else {
                0.5 * (img.get(x, y + 1) - img.get(x, y - 1))
            };
        }
    }
    Ok((
        Image2D::from_vec_unchecked(w, h, gx),
        Image2D::from_vec_unchecked(w, h, gy),
    ))
}

fn convolve_separable(
    width: usize,
    height: usize,
    data: &[f64],
    weights: &[f64],
    radius: usize,
) -> Vec<f64> {
    let r = radius as isize;
    // Horizontal pass.
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        let row = &data[y * width..(y + 1) * width];
        let out = &mut tmp[y * width..(y + 1) * width];
        for (x, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (wi, &wv) in weights.iter().enumerate() {
                let xi = reflect(x as isize + wi as isize - r, width);
                acc += wv * row[xi];
            }
            *o = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for (wi, &wv) in weights.iter().enumerate() {
            let yi = reflect(y as isize + wi as isize - r, height);
            let src = &tmp[yi * width..(yi + 1) * width];
            let dst = &mut out[y * width..(y + 1) * width];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wv * s;
            }
        }
    }
    out
}

/// Separable Gaussian blur with half-sample symmetric borders.
/// `sigma == 0` returns the input unchanged.
pub fn gaussian_blur(img: &Image2D, sigma: f64) -> Result<Image2D> {
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let kernel = GaussianKernel1D::new(sigma)?;
    let data = convolve_separable(
        img.width(),
        img.height(),
        img.data(),
        kernel.weights(),
        kernel.radius(),
    );
    Ok(Image2D::from_vec_unchecked(img.width(), img.height(), data))
}

/// Per-channel Gaussian blur of a displacement field.
pub fn gaussian_blur_field(u: &VectorField2D, sigma: f64) -> Result<VectorField2D> {
    if sigma == 0.0 {
        return Ok(u.clone());
    }
    let kernel = GaussianKernel1D::new(sigma)?;
    let dx = convolve_separable(u.width(), u.height(), u.dx(), kernel.weights(), kernel.radius());
    let dy = convolve_separable(u.width(), u.height(), u.dy(), kernel.weights(), kernel.radius());
    Ok(VectorField2D::from_vecs_unchecked(u.width(), u.height(), dx, dy))
}

/// Windowed mean over an odd square window, reflect borders.
pub fn box_filter(img: &Image2D, window: usize) -> Result<Image2D> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::validation(format!(
            "box_filter window must be odd and positive, got {window}"
        )));
    }
    let radius = window / 2;
    let weights = vec![1.0 / window as f64; window];
    let data = convolve_separable(img.width(), img.height(), img.data(), &weights, radius);
    Ok(Image2D::from_vec_unchecked(img.width(), img.height(), data))
}
