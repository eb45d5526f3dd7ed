//! Reverse-mode differentiation over a fixed set of image and field
//! primitives.
//!
//! The registration driver needs exact gradients of a scalar loss with
//! respect to coefficient fields (and optionally the displacement basis)
//! through the unrolled coefficient-smoothing layer, the velocity
//! integrator, warping, and the similarity loss. Rather than a
//! general-purpose autodiff system, this module records a [`Tape`] of
//! typed operations — each op validates its operands, computes its
//! forward value eagerly, and knows its own adjoint rule — and
//! [`Tape::backward`] replays the record in reverse, accumulating
//! cotangents.
//!
//! Everything is double precision and deterministic: identical tapes
//! produce bit-identical gradients. [`grad_check`] compares the adjoint
//! against central finite differences on a random subsample of input
//! coordinates and is used throughout the test suite (and by the CLI's
//! gradient-check report).

use crate::diffeo;
use crate::grid::{
    box_filter, gaussian_blur, gaussian_blur_field, spatial_gradient, warp as warp_image,
    CoefficientField, Image2D, VectorField2D,
};
use crate::smoothproper::{
    coeff_to_flow, q_update, AlphaSchedule, BasisMatrix, QSolveContext, SPConfig, VSolver,
};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A value carried on the tape: scalar, image, displacement field,
/// per-pixel coefficient stack, or basis atom bank.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Scalar(f64),
    Image(Image2D),
    Vector(VectorField2D),
    Coeff(CoefficientField),
    Basis(BasisMatrix),
}

impl From<f64> for Payload {
    fn from(v: f64) -> Self {
        Payload::Scalar(v)
    }
}
impl From<Image2D> for Payload {
    fn from(v: Image2D) -> Self {
        Payload::Image(v)
    }
}
impl From<VectorField2D> for Payload {
    fn from(v: VectorField2D) -> Self {
        Payload::Vector(v)
    }
}
impl From<CoefficientField> for Payload {
    fn from(v: CoefficientField) -> Self {
        Payload::Coeff(v)
    }
}
impl From<BasisMatrix> for Payload {
    fn from(v: BasisMatrix) -> Self {
        Payload::Basis(v)
    }
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Scalar(_) => "scalar",
            Payload::Image(_) => "image",
            Payload::Vector(_) => "vector",
            Payload::Coeff(_) => "coeff",
            Payload::Basis(_) => "basis",
        }
    }

    fn zeros_like(&self) -> Payload {
        match self {
            Payload::Scalar(_) => Payload::Scalar(0.0),
            Payload::Image(i) => Payload::Image(Image2D::zeros(i.width(), i.height())),
            Payload::Vector(v) => Payload::Vector(VectorField2D::zeros(v.width(), v.height())),
            Payload::Coeff(c) => {
                Payload::Coeff(CoefficientField::zeros(c.width(), c.height(), c.m()))
            }
            Payload::Basis(b) => Payload::Basis(
                BasisMatrix::new(vec![[0.0, 0.0]; b.m()]).expect("zero basis gradient"),
            ),
        }
    }

    /// Elementwise accumulation; kinds and shapes always match by
    /// construction (both sides derive from the same tape node).
    fn add_assign(&mut self, other: &Payload) {
        match (self, other) {
            (Payload::Scalar(a), Payload::Scalar(b)) => *a += b,
            (Payload::Image(a), Payload::Image(b)) => add_slice(a.data_mut(), b.data()),
            (Payload::Vector(a), Payload::Vector(b)) => {
                add_slice(a.dx_mut(), b.dx());
                add_slice(a.dy_mut(), b.dy());
            }
            (Payload::Coeff(a), Payload::Coeff(b)) => add_slice(a.data_mut(), b.data()),
            (Payload::Basis(a), Payload::Basis(b)) => {
                let sum: Vec<[f64; 2]> = a
                    .vectors()
                    .iter()
                    .zip(b.vectors())
                    .map(|(x, y)| [x[0] + y[0], x[1] + y[1]])
                    .collect();
                *a = BasisMatrix::new(sum).expect("finite gradient accumulation");
            }
            (a, b) => unreachable!("gradient kind mismatch: {} vs {}", a.kind(), b.kind()),
        }
    }

    /// Number of scalar coordinates (used by the finite-difference check).
    pub fn flat_len(&self) -> usize {
        match self {
            Payload::Scalar(_) => 1,
            Payload::Image(i) => i.data().len(),
            Payload::Vector(v) => 2 * v.dx().len(),
            Payload::Coeff(c) => c.data().len(),
            Payload::Basis(b) => 2 * b.m(),
        }
    }

    /// Reads one flat coordinate. Vectors order all dx before all dy;
    /// the basis interleaves (x, y) per atom.
    pub fn flat_get(&self, i: usize) -> f64 {
        match self {
            Payload::Scalar(v) => *v,
            Payload::Image(img) => img.data()[i],
            Payload::Vector(v) => {
                let n = v.dx().len();
                if i < n {
                    v.dx()[i]
                } else {
                    v.dy()[i - n]
                }
            }
            Payload::Coeff(c) => c.data()[i],
            Payload::Basis(b) => b.vectors()[i / 2][i % 2],
        }
    }

    /// Adds `delta` to one flat coordinate.
    pub fn flat_add(&mut self, i: usize, delta: f64) {
        match self {
            Payload::Scalar(v) => *v += delta,
            Payload::Image(img) => img.data_mut()[i] += delta,
            Payload::Vector(v) => {
                let n = v.dx().len();
                if i < n {
                    v.dx_mut()[i] += delta;
                } else {
                    v.dy_mut()[i - n] += delta;
                }
            }
            Payload::Coeff(c) => c.data_mut()[i] += delta,
            Payload::Basis(b) => {
                let mut vs = b.vectors().to_vec();
                vs[i / 2][i % 2] += delta;
                *b = BasisMatrix::new(vs).expect("finite perturbation");
            }
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Payload::Scalar(v) => Some(*v),
            _ => None,
        }
    }
    pub fn as_image(&self) -> Option<&Image2D> {
        match self {
            Payload::Image(v) => Some(v),
            _ => None,
        }
    }
    pub fn as_vector(&self) -> Option<&VectorField2D> {
        match self {
            Payload::Vector(v) => Some(v),
            _ => None,
        }
    }
    pub fn as_coeff(&self) -> Option<&CoefficientField> {
        match self {
            Payload::Coeff(v) => Some(v),
            _ => None,
        }
    }
    pub fn as_basis(&self) -> Option<&BasisMatrix> {
        match self {
            Payload::Basis(v) => Some(v),
            _ => None,
        }
    }
}

fn add_slice(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The registered primitive set. Each variant stores the node ids of its
/// operands plus whatever configuration the adjoint rule needs; saved
/// forward state lives in the node's payload.
#[derive(Debug, Clone)]
enum Op {
    Input,
    Constant,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, f64),
    Square(ValueId),
    Sqrt(ValueId),
    Div(ValueId, ValueId),
    MaxConst(ValueId, f64),
    ClampNonneg(ValueId),
    BoxFilter(ValueId, usize),
    GaussianBlur(ValueId, f64),
    GradX(ValueId),
    GradY(ValueId),
    ChannelX(ValueId),
    ChannelY(ValueId),
    PackVector(ValueId, ValueId),
    Warp { image: ValueId, flow: ValueId },
    Compose { inner: ValueId, outer: ValueId },
    CoeffToFlow { q: ValueId, basis: ValueId },
    QSolve { p: ValueId, v: ValueId, basis: ValueId, alpha: f64 },
    Sum(ValueId),
    Mean(ValueId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Payload,
}

/// An eagerly-evaluated record of primitive operations, in topological
/// order by construction. All building methods validate operand kinds
/// and shapes and return the id of the freshly computed node.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Declares a differentiable input.
    pub fn input(&mut self, value: impl Into<Payload>) -> ValueId {
        self.push(Op::Input, value.into())
    }

    /// Declares a non-differentiable constant (its gradient is never
    /// reported).
    pub fn constant(&mut self, value: impl Into<Payload>) -> ValueId {
        self.push(Op::Constant, value.into())
    }

    pub fn value(&self, id: ValueId) -> &Payload {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: ValueId) -> Result<f64> {
        self.value(id)
            .as_scalar()
            .ok_or_else(|| Error::validation("expected a scalar tape value"))
    }

    fn push(&mut self, op: Op, value: Payload) -> ValueId {
        self.nodes.push(Node { op, value });
        ValueId(self.nodes.len() - 1)
    }

    fn check(&self, id: ValueId, context: &'static str) -> Result<&Payload> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::validation(format!("{context}: unknown tape value")))
    }

    fn binary_same_kind(
        &mut self,
        a: ValueId,
        b: ValueId,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Payload> {
        let pa = self.check(a, context)?;
        let pb = self.check(b, context)?;
        match (pa, pb) {
            (Payload::Scalar(x), Payload::Scalar(y)) => Ok(Payload::Scalar(f(*x, *y))),
            (Payload::Image(x), Payload::Image(y)) if x.same_shape(y) => {
                let data = x.data().iter().zip(y.data()).map(|(u, v)| f(*u, *v)).collect();
                Ok(Payload::Image(Image2D::from_vec_unchecked(
                    x.width(),
                    x.height(),
                    data,
                )))
            }
            (Payload::Vector(x), Payload::Vector(y)) if x.same_shape(y) => {
                let dx = x.dx().iter().zip(y.dx()).map(|(u, v)| f(*u, *v)).collect();
                let dy = x.dy().iter().zip(y.dy()).map(|(u, v)| f(*u, *v)).collect();
                Ok(Payload::Vector(VectorField2D::from_vecs_unchecked(
                    x.width(),
                    x.height(),
                    dx,
                    dy,
                )))
            }
            (Payload::Coeff(x), Payload::Coeff(y)) if x.same_shape(y) => {
                let data = x.data().iter().zip(y.data()).map(|(u, v)| f(*u, *v)).collect();
                Ok(Payload::Coeff(CoefficientField::from_vec_unchecked(
                    x.width(),
                    x.height(),
                    x.m(),
                    data,
                )))
            }
            _ => Err(Error::validation(format!(
                "{context} requires operands of the same kind and shape, got {} and {}",
                pa.kind(),
                pb.kind()
            ))),
        }
    }

    fn unary_elementwise(
        &mut self,
        a: ValueId,
        context: &'static str,
        allow_coeff: bool,
        allow_vector: bool,
        f: impl Fn(f64) -> f64,
    ) -> Result<Payload> {
        let pa = self.check(a, context)?;
        match pa {
            Payload::Scalar(x) => Ok(Payload::Scalar(f(*x))),
            Payload::Image(x) => Ok(Payload::Image(Image2D::from_vec_unchecked(
                x.width(),
                x.height(),
                x.data().iter().map(|v| f(*v)).collect(),
            ))),
            Payload::Vector(x) if allow_vector => {
                Ok(Payload::Vector(VectorField2D::from_vecs_unchecked(
                    x.width(),
                    x.height(),
                    x.dx().iter().map(|v| f(*v)).collect(),
                    x.dy().iter().map(|v| f(*v)).collect(),
                )))
            }
            Payload::Coeff(x) if allow_coeff => {
                Ok(Payload::Coeff(CoefficientField::from_vec_unchecked(
                    x.width(),
                    x.height(),
                    x.m(),
                    x.data().iter().map(|v| f(*v)).collect(),
                )))
            }
            _ => Err(Error::validation(format!(
                "{context} does not support {} operands",
                pa.kind()
            ))),
        }
    }

    /// Elementwise sum of two values of identical kind and shape.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = self.binary_same_kind(a, b, "traced add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    /// Elementwise difference.
    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = self.binary_same_kind(a, b, "traced sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = self.binary_same_kind(a, b, "traced mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    /// Multiplication by a compile-time constant factor.
    pub fn scale(&mut self, a: ValueId, factor: f64) -> Result<ValueId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite("traced scale factor".into()));
        }
        let out = self.unary_elementwise(a, "traced scale", true, true, |x| x * factor)?;
        Ok(self.push(Op::Scale(a, factor), out))
    }

    /// Elementwise square.
    pub fn square(&mut self, a: ValueId) -> Result<ValueId> {
        let out = self.unary_elementwise(a, "traced square", true, true, |x| x * x)?;
        Ok(self.push(Op::Square(a), out))
    }

    /// Elementwise square root. The operand must be nonnegative; the
    /// derivative is unbounded at zero, so keep inputs bounded away from
    /// it (e.g. via [`Tape::max_const`]).
    pub fn sqrt(&mut self, a: ValueId) -> Result<ValueId> {
        {
            let pa = self.check(a, "traced sqrt")?;
            let neg = match pa {
                Payload::Scalar(x) => *x < 0.0,
                Payload::Image(x) => x.data().iter().any(|v| *v < 0.0),
                other => {
                    return Err(Error::validation(format!(
                        "traced sqrt does not support {} operands",
                        other.kind()
                    )))
                }
            };
            if neg {
                return Err(Error::validation(
                    "traced sqrt requires a nonnegative operand",
                ));
            }
        }
        let out = self.unary_elementwise(a, "traced sqrt", false, false, f64::sqrt)?;
        Ok(self.push(Op::Sqrt(a), out))
    }

    /// Elementwise quotient; every divisor entry must be nonzero.
    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        {
            let pb = self.check(b, "traced div")?;
            let zero = match pb {
                Payload::Scalar(x) => *x == 0.0,
                Payload::Image(x) => x.data().iter().any(|v| *v == 0.0),
                other => {
                    return Err(Error::validation(format!(
                        "traced div does not support {} divisors",
                        other.kind()
                    )))
                }
            };
            if zero {
                return Err(Error::validation("traced div by zero"));
            }
        }
        let pa = self.check(a, "traced div")?;
        if !matches!(pa, Payload::Scalar(_) | Payload::Image(_)) {
            return Err(Error::validation(format!(
                "traced div does not support {} operands",
                pa.kind()
            )));
        }
        let out = self.binary_same_kind(a, b, "traced div", |x, y| x / y)?;
        Ok(self.push(Op::Div(a, b), out))
    }

    /// Elementwise maximum with a constant; the subgradient at the tie
    /// is zero.
    pub fn max_const(&mut self, a: ValueId, floor: f64) -> Result<ValueId> {
        if !floor.is_finite() {
            return Err(Error::NonFinite("traced max floor".into()));
        }
        let pa = self.check(a, "traced max")?;
        if !matches!(pa, Payload::Scalar(_) | Payload::Image(_)) {
            return Err(Error::validation(format!(
                "traced max does not support {} operands",
                pa.kind()
            )));
        }
        let out = self.unary_elementwise(a, "traced max", false, false, |x| x.max(floor))?;
        Ok(self.push(Op::MaxConst(a, floor), out))
    }

    /// Elementwise clamp at zero from below; the subgradient at the
    /// kink is zero.
    pub fn clamp_nonneg(&mut self, a: ValueId) -> Result<ValueId> {
        let out =
            self.unary_elementwise(a, "traced clamp", true, false, |x| if x > 0.0 { x } else { 0.0 })?;
        Ok(self.push(Op::ClampNonneg(a), out))
    }

    /// Windowed mean with reflected borders (odd window).
    pub fn box_filter(&mut self, a: ValueId, window: usize) -> Result<ValueId> {
        let img = self
            .check(a, "traced box filter")?
            .as_image()
            .ok_or_else(|| Error::validation("traced box filter requires an image"))?;
        let out = box_filter(img, window)?;
        Ok(self.push(Op::BoxFilter(a, window), Payload::Image(out)))
    }

    /// Gaussian blur of an image or displacement field.
    pub fn gaussian_blur(&mut self, a: ValueId, sigma: f64) -> Result<ValueId> {
        let pa = self.check(a, "traced blur")?;
        let out = match pa {
            Payload::Image(img) => Payload::Image(gaussian_blur(img, sigma)?),
            Payload::Vector(v) => Payload::Vector(gaussian_blur_field(v, sigma)?),
            other => {
                return Err(Error::validation(format!(
                    "traced blur does not support {} operands",
                    other.kind()
                )))
            }
        };
        Ok(self.push(Op::GaussianBlur(a, sigma), out))
    }

    /// Horizontal derivative (central differences, one-sided at borders).
    pub fn grad_x(&mut self, a: ValueId) -> Result<ValueId> {
        let img = self
            .check(a, "traced gradient")?
            .as_image()
            .ok_or_else(|| Error::validation("traced gradient requires an image"))?;
        let (gx, _) = spatial_gradient(img)?;
        Ok(self.push(Op::GradX(a), Payload::Image(gx)))
    }

    /// Vertical derivative (central differences, one-sided at borders).
    pub fn grad_y(&mut self, a: ValueId) -> Result<ValueId> {
        let img = self
            .check(a, "traced gradient")?
            .as_image()
            .ok_or_else(|| Error::validation("traced gradient requires an image"))?;
        let (_, gy) = spatial_gradient(img)?;
        Ok(self.push(Op::GradY(a), Payload::Image(gy)))
    }

    /// Extracts the horizontal component of a displacement field.
    pub fn channel_x(&mut self, a: ValueId) -> Result<ValueId> {
        let v = self
            .check(a, "traced channel")?
            .as_vector()
            .ok_or_else(|| Error::validation("traced channel requires a vector field"))?;
        let out = v.dx_image();
        Ok(self.push(Op::ChannelX(a), Payload::Image(out)))
    }

    /// Extracts the vertical component of a displacement field.
    pub fn channel_y(&mut self, a: ValueId) -> Result<ValueId> {
        let v = self
            .check(a, "traced channel")?
            .as_vector()
            .ok_or_else(|| Error::validation("traced channel requires a vector field"))?;
        let out = v.dy_image();
        Ok(self.push(Op::ChannelY(a), Payload::Image(out)))
    }

    /// Packs two images into a displacement field (dx, dy).
    pub fn pack_vector(&mut self, x: ValueId, y: ValueId) -> Result<ValueId> {
        let ix = self
            .check(x, "traced pack")?
            .as_image()
            .ok_or_else(|| Error::validation("traced pack requires images"))?;
        let iy = self
            .check(y, "traced pack")?
            .as_image()
            .ok_or_else(|| Error::validation("traced pack requires images"))?;
        let out = VectorField2D::from_channels(ix, iy)?;
        Ok(self.push(Op::PackVector(x, y), Payload::Vector(out)))
    }

    /// Pull-back warp `out(x) = image(x + flow(x))`, bilinear,
    /// clamp-to-edge.
    pub fn warp(&mut self, image: ValueId, flow: ValueId) -> Result<ValueId> {
        let img = self
            .check(image, "traced warp")?
            .as_image()
            .ok_or_else(|| Error::validation("traced warp requires an image"))?;
        let u = self
            .check(flow, "traced warp")?
            .as_vector()
            .ok_or_else(|| Error::validation("traced warp requires a vector flow"))?;
        let out = warp_image(img, u)?;
        Ok(self.push(Op::Warp { image, flow }, Payload::Image(out)))
    }

    /// Displacement-field composition
    /// `out(x) = inner(x) + outer(x + inner(x))`.
    pub fn compose(&mut self, inner: ValueId, outer: ValueId) -> Result<ValueId> {
        let vi = self
            .check(inner, "traced compose")?
            .as_vector()
            .ok_or_else(|| Error::validation("traced compose requires vector fields"))?;
        let vo = self
            .check(outer, "traced compose")?
            .as_vector()
            .ok_or_else(|| Error::validation("traced compose requires vector fields"))?;
        let out = diffeo::compose(vi, vo)?;
        Ok(self.push(Op::Compose { inner, outer }, Payload::Vector(out)))
    }

    /// Per-pixel basis expansion `u(x) = Σ_i q_i(x)·b_i`.
    pub fn coeff_to_flow(&mut self, q: ValueId, basis: ValueId) -> Result<ValueId> {
        let qc = self
            .check(q, "traced basis expansion")?
            .as_coeff()
            .ok_or_else(|| Error::validation("traced basis expansion requires coefficients"))?;
        let b = self
            .check(basis, "traced basis expansion")?
            .as_basis()
            .ok_or_else(|| Error::validation("traced basis expansion requires a basis"))?;
        let out = coeff_to_flow(qc, b)?;
        Ok(self.push(Op::CoeffToFlow { q, basis }, Payload::Vector(out)))
    }

    /// The pointwise coefficient solve of the smoothing layer
    /// (unconstrained; follow with [`Tape::clamp_nonneg`] for the
    /// nonnegative variant).
    pub fn q_solve(
        &mut self,
        p: ValueId,
        v: ValueId,
        basis: ValueId,
        alpha: f64,
    ) -> Result<ValueId> {
        let pc = self
            .check(p, "traced coefficient solve")?
            .as_coeff()
            .ok_or_else(|| Error::validation("traced coefficient solve requires coefficients"))?;
        let vf = self
            .check(v, "traced coefficient solve")?
            .as_vector()
            .ok_or_else(|| Error::validation("traced coefficient solve requires a vector field"))?;
        let b = self
            .check(basis, "traced coefficient solve")?
            .as_basis()
            .ok_or_else(|| Error::validation("traced coefficient solve requires a basis"))?;
        let out = q_update(pc, vf, b, alpha, false)?;
        Ok(self.push(Op::QSolve { p, v, basis, alpha }, Payload::Coeff(out)))
    }

    /// Sum of all entries, yielding a scalar.
    pub fn sum(&mut self, a: ValueId) -> Result<ValueId> {
        let total = self.reduce_total(a, "traced sum")?;
        Ok(self.push(Op::Sum(a), Payload::Scalar(total)))
    }

    /// Mean of all entries, yielding a scalar.
    pub fn mean(&mut self, a: ValueId) -> Result<ValueId> {
        let total = self.reduce_total(a, "traced mean")?;
        let n = self.value(a).flat_len().max(1) as f64;
        Ok(self.push(Op::Mean(a), Payload::Scalar(total / n)))
    }

    fn reduce_total(&self, a: ValueId, context: &'static str) -> Result<f64> {
        let pa = self.check(a, context)?;
        Ok(match pa {
            Payload::Scalar(x) => *x,
            Payload::Image(x) => x.data().iter().sum(),
            Payload::Vector(x) => x.dx().iter().sum::<f64>() + x.dy().iter().sum::<f64>(),
            Payload::Coeff(x) => x.data().iter().sum(),
            Payload::Basis(_) => {
                return Err(Error::validation(format!(
                    "{context} does not support basis operands"
                )))
            }
        })
    }

    /// Reverse sweep from a scalar loss node. Returns one cotangent per
    /// node; inputs that the loss does not depend on get explicit zero
    /// gradients.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::validation("backward: unknown loss node"));
        }
        if self.nodes[loss.0].value.as_scalar().is_none() {
            return Err(Error::validation(format!(
                "backward requires a scalar loss, got {}",
                self.nodes[loss.0].value.kind()
            )));
        }
        let mut grads: Vec<Option<Payload>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Payload::Scalar(1.0));

        for i in (0..=loss.0).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Input | Op::Constant => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, negate(&g));
                }
                Op::Mul(a, b) => {
                    let ga = elementwise_product(&g, &self.nodes[b.0].value);
                    let gb = elementwise_product(&g, &self.nodes[a.0].value);
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => {
                    self.accumulate(&mut grads, *a, scale_payload(&g, *c));
                }
                Op::Square(a) => {
                    let two_x = scale_payload(&self.nodes[a.0].value, 2.0);
                    self.accumulate(&mut grads, *a, elementwise_product(&g, &two_x));
                }
                Op::Sqrt(a) => {
                    // d(sqrt x) = g / (2·sqrt x); the stored value is sqrt x.
                    let gi = zip_payload(&g, &self.nodes[i].value, |gv, y| gv / (2.0 * y));
                    self.accumulate(&mut grads, *a, gi);
                }
                Op::Div(a, b) => {
                    let pb = &self.nodes[b.0].value;
                    let out = &self.nodes[i].value;
                    let ga = zip_payload(&g, pb, |gv, bv| gv / bv);
                    let g_out = elementwise_product(&g, out);
                    let gb = zip_payload(&g_out, pb, |gv, bv| -gv / bv);
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::MaxConst(a, floor) => {
                    let gi = zip_payload(&g, &self.nodes[a.0].value, |gv, x| {
                        if x > *floor {
                            gv
                        } else {
                            0.0
                        }
                    });
                    self.accumulate(&mut grads, *a, gi);
                }
                Op::ClampNonneg(a) => {
                    let gi = zip_payload(&g, &self.nodes[a.0].value, |gv, x| {
                        if x > 0.0 {
                            gv
                        } else {
                            0.0
                        }
                    });
                    self.accumulate(&mut grads, *a, gi);
                }
                Op::BoxFilter(a, window) => {
                    // The windowed mean with reflected borders is
                    // self-adjoint (symmetric separable kernel).
                    let gi = g.as_image().expect("box filter cotangent");
                    let back = box_filter(gi, *window)?;
                    self.accumulate(&mut grads, *a, Payload::Image(back));
                }
                Op::GaussianBlur(a, sigma) => {
                    // Symmetric kernel + reflect borders: self-adjoint.
                    let back = match &g {
                        Payload::Image(img) => Payload::Image(gaussian_blur(img, *sigma)?),
                        Payload::Vector(v) => Payload::Vector(gaussian_blur_field(v, *sigma)?),
                        other => unreachable!("blur cotangent kind {}", other.kind()),
                    };
                    self.accumulate(&mut grads, *a, back);
                }
                Op::GradX(a) => {
                    let gi = g.as_image().expect("gradient cotangent");
                    self.accumulate(&mut grads, *a, Payload::Image(adjoint_grad_x(gi)));
                }
                Op::GradY(a) => {
                    let gi = g.as_image().expect("gradient cotangent");
                    self.accumulate(&mut grads, *a, Payload::Image(adjoint_grad_y(gi)));
                }
                Op::ChannelX(a) => {
                    let gi = g.as_image().expect("channel cotangent");
                    let zero = Image2D::zeros(gi.width(), gi.height());
                    let gv = VectorField2D::from_channels(gi, &zero)?;
                    self.accumulate(&mut grads, *a, Payload::Vector(gv));
                }
                Op::ChannelY(a) => {
                    let gi = g.as_image().expect("channel cotangent");
                    let zero = Image2D::zeros(gi.width(), gi.height());
                    let gv = VectorField2D::from_channels(&zero, gi)?;
                    self.accumulate(&mut grads, *a, Payload::Vector(gv));
                }
                Op::PackVector(x, y) => {
                    let gv = g.as_vector().expect("pack cotangent");
                    self.accumulate(&mut grads, *x, Payload::Image(gv.dx_image()));
                    self.accumulate(&mut grads, *y, Payload::Image(gv.dy_image()));
                }
                Op::Warp { image, flow } => {
                    let img = self.nodes[image.0].value.as_image().expect("warp image");
                    let u = self.nodes[flow.0].value.as_vector().expect("warp flow");
                    let gi = g.as_image().expect("warp cotangent");
                    let (g_img, g_flow) = warp_vjp(img, u, gi);
                    self.accumulate(&mut grads, *image, Payload::Image(g_img));
                    self.accumulate(&mut grads, *flow, Payload::Vector(g_flow));
                }
                Op::Compose { inner, outer } => {
                    let vi = self.nodes[inner.0].value.as_vector().expect("compose inner");
                    let vo = self.nodes[outer.0].value.as_vector().expect("compose outer");
                    let gv = g.as_vector().expect("compose cotangent");
                    let (g_inner, g_outer) = compose_vjp(vi, vo, gv);
                    self.accumulate(&mut grads, *inner, Payload::Vector(g_inner));
                    self.accumulate(&mut grads, *outer, Payload::Vector(g_outer));
                }
                Op::CoeffToFlow { q, basis } => {
                    let qc = self.nodes[q.0].value.as_coeff().expect("expansion coeff");
                    let b = self.nodes[basis.0].value.as_basis().expect("expansion basis");
                    let gv = g.as_vector().expect("expansion cotangent");
                    let want_basis = !matches!(self.nodes[basis.0].op, Op::Constant);
                    let (g_q, g_b) = coeff_to_flow_vjp(qc, b, gv, want_basis);
                    self.accumulate(&mut grads, *q, Payload::Coeff(g_q));
                    if let Some(g_b) = g_b {
                        self.accumulate(&mut grads, *basis, Payload::Basis(g_b));
                    }
                }
                Op::QSolve { p, v, basis, alpha } => {
                    let vf = self.nodes[v.0].value.as_vector().expect("solve v");
                    let b = self.nodes[basis.0].value.as_basis().expect("solve basis");
                    let q_out = self.nodes[i].value.as_coeff().expect("solve output");
                    let gc = g.as_coeff().expect("solve cotangent");
                    let want_basis = !matches!(self.nodes[basis.0].op, Op::Constant);
                    let (g_p, g_v, g_b) = q_solve_vjp(q_out, vf, b, *alpha, gc, want_basis)?;
                    self.accumulate(&mut grads, *p, Payload::Coeff(g_p));
                    self.accumulate(&mut grads, *v, Payload::Vector(g_v));
                    if let Some(g_b) = g_b {
                        self.accumulate(&mut grads, *basis, Payload::Basis(g_b));
                    }
                }
                Op::Sum(a) => {
                    let gs = g.as_scalar().expect("sum cotangent");
                    let mut gi = self.nodes[a.0].value.zeros_like();
                    broadcast_add(&mut gi, gs);
                    self.accumulate(&mut grads, *a, gi);
                }
                Op::Mean(a) => {
                    let gs = g.as_scalar().expect("mean cotangent");
                    let n = self.nodes[a.0].value.flat_len().max(1) as f64;
                    let mut gi = self.nodes[a.0].value.zeros_like();
                    broadcast_add(&mut gi, gs / n);
                    self.accumulate(&mut grads, *a, gi);
                }
            }
        }

        // Inputs untouched by the loss get explicit zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Input) && grads[i].is_none() {
                grads[i] = Some(node.value.zeros_like());
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Payload>], id: ValueId, delta: Payload) {
        // Constants never feed a VJP and are not reported, so their
        // cotangents are dead weight.
        if matches!(self.nodes[id.0].op, Op::Constant) {
            return;
        }
        match &mut grads[id.0] {
            Some(slot) => slot.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }
}

fn negate(p: &Payload) -> Payload {
    scale_payload(p, -1.0)
}

fn scale_payload(p: &Payload, c: f64) -> Payload {
    map_payload(p, |x| c * x)
}

fn map_payload(p: &Payload, f: impl Fn(f64) -> f64) -> Payload {
    match p {
        Payload::Scalar(x) => Payload::Scalar(f(*x)),
        Payload::Image(x) => Payload::Image(Image2D::from_vec_unchecked(
            x.width(),
            x.height(),
            x.data().iter().map(|v| f(*v)).collect(),
        )),
        Payload::Vector(x) => Payload::Vector(VectorField2D::from_vecs_unchecked(
            x.width(),
            x.height(),
            x.dx().iter().map(|v| f(*v)).collect(),
            x.dy().iter().map(|v| f(*v)).collect(),
        )),
        Payload::Coeff(x) => Payload::Coeff(CoefficientField::from_vec_unchecked(
            x.width(),
            x.height(),
            x.m(),
            x.data().iter().map(|v| f(*v)).collect(),
        )),
        Payload::Basis(x) => Payload::Basis(
            BasisMatrix::new(x.vectors().iter().map(|b| [f(b[0]), f(b[1])]).collect())
                .expect("finite basis map"),
        ),
    }
}

/// Elementwise product of same-shaped payloads.
fn elementwise_product(a: &Payload, b: &Payload) -> Payload {
    zip_payload(a, b, |x, y| x * y)
}

fn zip_payload(a: &Payload, b: &Payload, f: impl Fn(f64, f64) -> f64) -> Payload {
    match (a, b) {
        (Payload::Scalar(x), Payload::Scalar(y)) => Payload::Scalar(f(*x, *y)),
        (Payload::Image(x), Payload::Image(y)) => Payload::Image(Image2D::from_vec_unchecked(
            x.width(),
            x.height(),
            x.data().iter().zip(y.data()).map(|(u, v)| f(*u, *v)).collect(),
        )),
        (Payload::Vector(x), Payload::Vector(y)) => {
            Payload::Vector(VectorField2D::from_vecs_unchecked(
                x.width(),
                x.height(),
                x.dx().iter().zip(y.dx()).map(|(u, v)| f(*u, *v)).collect(),
                x.dy().iter().zip(y.dy()).map(|(u, v)| f(*u, *v)).collect(),
            ))
        }
        (Payload::Coeff(x), Payload::Coeff(y)) => {
            Payload::Coeff(CoefficientField::from_vec_unchecked(
                x.width(),
                x.height(),
                x.m(),
                x.data().iter().zip(y.data()).map(|(u, v)| f(*u, *v)).collect(),
            ))
        }
        (x, y) => unreachable!("payload zip mismatch: {} vs {}", x.kind(), y.kind()),
    }
}

fn broadcast_add(p: &mut Payload, v: f64) {
    match p {
        Payload::Scalar(x) => *x += v,
        Payload::Image(x) => x.data_mut().iter_mut().for_each(|e| *e += v),
        Payload::Vector(x) => {
            x.dx_mut().iter_mut().for_each(|e| *e += v);
            x.dy_mut().iter_mut().for_each(|e| *e += v);
        }
        Payload::Coeff(x) => x.data_mut().iter_mut().for_each(|e| *e += v),
        Payload::Basis(_) => unreachable!("no broadcast into basis"),
    }
}

/// Transpose of the horizontal-derivative stencil: scatters each output
/// cotangent back onto the pixels that produced it.
fn adjoint_grad_x(cot: &Image2D) -> Image2D {
    let w = cot.width();
    let h = cot.height();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let g = cot.get(x, y);
            if x == 0 {
                out[y * w + 1] += g;
                out[y * w] -= g;
            } else if x == w - 1 {
                out[y * w + (w - 1)] += g;
                out[y * w + (w - 2)] -= g;
            } else {
                out[y * w + (x + 1)] += 0.5 * g;
                out[y * w + (x - 1)] -= 0.5 * g;
            }
        }
    }
    Image2D::from_vec_unchecked(w, h, out)
}

/// Transpose of the vertical-derivative stencil.
fn adjoint_grad_y(cot: &Image2D) -> Image2D {
    let w = cot.width();
    let h = cot.height();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let g = cot.get(x, y);
            if y == 0 {
                out[w + x] += g;
                out[x] -= g;
            } else if y == h - 1 {
                out[(h - 1) * w + x] += g;
                out[(h - 2) * w + x] -= g;
            } else {
                out[(y + 1) * w + x] += 0.5 * g;
                out[(y - 1) * w + x] -= 0.5 * g;
            }
        }
    }
    Image2D::from_vec_unchecked(w, h, out)
}

/// Adjoint of the pull-back warp: splats the cotangent onto the sampled
/// image corners (transpose of bilinear interpolation) and projects it
/// onto the interpolant's spatial derivative for the flow gradient.
/// Where the sample position is clamped to the edge, the flow gradient
/// in the clamped dimension is zero, matching the forward's flat
/// extrapolation.
fn warp_vjp(img: &Image2D, flow: &VectorField2D, cot: &Image2D) -> (Image2D, VectorField2D) {
    let w = img.width();
    let h = img.height();
    let mut g_img = vec![0.0; w * h];
    let mut g_dx = vec![0.0; w * h];
    let mut g_dy = vec![0.0; w * h];
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let g = cot.get(x, y);
            let (ux, uy) = flow.get(x, y);
            let sx = x as f64 + ux;
            let sy = y as f64 + uy;
            let cx = sx.clamp(0.0, max_x);
            let cy = sy.clamp(0.0, max_y);
            let x0 = cx.floor() as usize;
            let y0 = cy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = cx - x0 as f64;
            let fy = cy - y0 as f64;

            g_img[y0 * w + x0] += g * (1.0 - fx) * (1.0 - fy);
            g_img[y0 * w + x1] += g * fx * (1.0 - fy);
            g_img[y1 * w + x0] += g * (1.0 - fx) * fy;
            g_img[y1 * w + x1] += g * fx * fy;

            let i00 = img.get(x0, y0);
            let i10 = img.get(x1, y0);
            let i01 = img.get(x0, y1);
            let i11 = img.get(x1, y1);
            if sx > 0.0 && sx < max_x {
                g_dx[i] = g * ((i10 - i00) * (1.0 - fy) + (i11 - i01) * fy);
            }
            if sy > 0.0 && sy < max_y {
                g_dy[i] = g * ((i01 - i00) * (1.0 - fx) + (i11 - i10) * fx);
            }
        }
    }
    (
        Image2D::from_vec_unchecked(w, h, g_img),
        VectorField2D::from_vecs_unchecked(w, h, g_dx, g_dy),
    )
}

/// Adjoint of displacement composition. The identity part passes the
/// cotangent straight to `inner`; the sampling part contributes the
/// sampled field's spatial derivative to `inner` and a bilinear splat
/// to `outer`.
fn compose_vjp(
    inner: &VectorField2D,
    outer: &VectorField2D,
    cot: &VectorField2D,
) -> (VectorField2D, VectorField2D) {
    let w = inner.width();
    let h = inner.height();
    let mut gi_dx = vec![0.0; w * h];
    let mut gi_dy = vec![0.0; w * h];
    let mut go_dx = vec![0.0; w * h];
    let mut go_dy = vec![0.0; w * h];
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (gx, gy) = cot.get(x, y);
            let (ix, iy) = inner.get(x, y);
            let sx = x as f64 + ix;
            let sy = y as f64 + iy;
            let cx = sx.clamp(0.0, max_x);
            let cy = sy.clamp(0.0, max_y);
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

            go_dx[y0 * w + x0] += gx * w00;
            go_dx[y0 * w + x1] += gx * w10;
            go_dx[y1 * w + x0] += gx * w01;
            go_dx[y1 * w + x1] += gx * w11;
            go_dy[y0 * w + x0] += gy * w00;
            go_dy[y0 * w + x1] += gy * w10;
            go_dy[y1 * w + x0] += gy * w01;
            go_dy[y1 * w + x1] += gy * w11;

            let (o00x, o00y) = outer.get(x0, y0);
            let (o10x, o10y) = outer.get(x1, y0);
            let (o01x, o01y) = outer.get(x0, y1);
            let (o11x, o11y) = outer.get(x1, y1);
            let mut jxx = 0.0; // d(sampled outer dx)/d sx
            let mut jyx = 0.0; // d(sampled outer dy)/d sx
            if sx > 0.0 && sx < max_x {
                jxx = (o10x - o00x) * (1.0 - fy) + (o11x - o01x) * fy;
                jyx = (o10y - o00y) * (1.0 - fy) + (o11y - o01y) * fy;
            }
            let mut jxy = 0.0; // d(sampled outer dx)/d sy
            let mut jyy = 0.0; // d(sampled outer dy)/d sy
            if sy > 0.0 && sy < max_y {
                jxy = (o01x - o00x) * (1.0 - fx) + (o11x - o10x) * fx;
                jyy = (o01y - o00y) * (1.0 - fx) + (o11y - o10y) * fx;
            }
            gi_dx[i] = gx + gx * jxx + gy * jyx;
            gi_dy[i] = gy + gx * jxy + gy * jyy;
        }
    }
    (
        VectorField2D::from_vecs_unchecked(w, h, gi_dx, gi_dy),
        VectorField2D::from_vecs_unchecked(w, h, go_dx, go_dy),
    )
}

/// Adjoint of the basis expansion `u = Σ q_i b_i`. The basis gradient
/// is computed only when requested (it is dead work for a constant
/// basis).
fn coeff_to_flow_vjp(
    q: &CoefficientField,
    basis: &BasisMatrix,
    cot: &VectorField2D,
    want_basis: bool,
) -> (CoefficientField, Option<BasisMatrix>) {
    let w = q.width();
    let h = q.height();
    let m = q.m();
    let mut g_q = vec![0.0; w * h * m];
    let mut g_b = vec![[0.0f64; 2]; m];
    let qd = q.data();
    for pix in 0..w * h {
        let gx = cot.dx()[pix];
        let gy = cot.dy()[pix];
        let base = pix * m;
        for i in 0..m {
            let b = basis.vector(i);
            g_q[base + i] = b[0] * gx + b[1] * gy;
        }
        if want_basis {
            for i in 0..m {
                let qi = qd[base + i];
                g_b[i][0] += qi * gx;
                g_b[i][1] += qi * gy;
            }
        }
    }
    (
        CoefficientField::from_vec_unchecked(w, h, m, g_q),
        want_basis.then(|| BasisMatrix::new(g_b).expect("finite basis gradient")),
    )
}

/// Adjoint of the pointwise coefficient solve `q = A⁻¹ r(p, v, B)` with
/// `A = 2I + (1/α)BBᵀ`. The cotangent solve `s = A⁻¹ĝ` reuses the same
/// normal matrix (A is symmetric); the basis gradient combines the
/// right-hand side's direct dependence with the sensitivity of A itself.
fn q_solve_vjp(
    q: &CoefficientField,
    v: &VectorField2D,
    basis: &BasisMatrix,
    alpha: f64,
    cot: &CoefficientField,
    want_basis: bool,
) -> Result<(CoefficientField, VectorField2D, Option<BasisMatrix>)> {
    let ctx = QSolveContext::new(basis, alpha)?;
    let w = q.width();
    let h = q.height();
    let m = q.m();
    let inv_a = 1.0 / alpha;
    let mut g_p = vec![0.0; w * h * m];
    let mut g_dx = vec![0.0; w * h];
    let mut g_dy = vec![0.0; w * h];
    let mut g_b = vec![[0.0f64; 2]; m];
    let mut s = vec![0.0; m];
    let qd = q.data();
    for pix in 0..w * h {
        let base = pix * m;
        s.copy_from_slice(&cot.data()[base..base + m]);
        ctx.solve_in_place(&mut s);
        let (vx, vy) = (v.dx()[pix], v.dy()[pix]);

        // u_s = Σ s_j b_j at this pixel (u_q likewise, for the basis
        // gradient only).
        let mut us = [0.0f64; 2];
        let mut sum_s = 0.0;
        for (j, &sj) in s.iter().enumerate() {
            let b = basis.vector(j);
            us[0] += sj * b[0];
            us[1] += sj * b[1];
            sum_s += sj;
        }

        // r_i = 2p_i + (2/α)(b_i·v) − (1/2α)(‖v‖² + ‖b_i‖²):
        //   ∂r/∂p   = 2I                → g_p = 2s
        //   ∂r_i/∂v = (2/α)b_i − (1/α)v → g_v = (1/α)(2·Bᵀs − (Σs)·v)
        for i in 0..m {
            g_p[base + i] = 2.0 * s[i];
        }
        g_dx[pix] = inv_a * (2.0 * us[0] - sum_s * vx);
        g_dy[pix] = inv_a * (2.0 * us[1] - sum_s * vy);

        // Basis gradient: ∂r_i/∂b_i = (2/α)v − (1/α)b_i, plus the
        // A-sensitivity −(1/α)(s_i·u_q + q_i·u_s) from q = A⁻¹r.
        if want_basis {
            let mut uq = [0.0f64; 2];
            for j in 0..m {
                let b = basis.vector(j);
                let qj = qd[base + j];
                uq[0] += qj * b[0];
                uq[1] += qj * b[1];
            }
            for i in 0..m {
                let b = basis.vector(i);
                let qi = qd[base + i];
                g_b[i][0] += s[i] * (2.0 * inv_a * vx - inv_a * b[0])
                    - inv_a * (s[i] * uq[0] + qi * us[0]);
                g_b[i][1] += s[i] * (2.0 * inv_a * vy - inv_a * b[1])
                    - inv_a * (s[i] * uq[1] + qi * us[1]);
            }
        }
    }
    Ok((
        CoefficientField::from_vec_unchecked(w, h, m, g_p),
        VectorField2D::from_vecs_unchecked(w, h, g_dx, g_dy),
        want_basis.then(|| BasisMatrix::new(g_b).expect("finite basis gradient")),
    ))
}

/// Cotangents produced by [`Tape::backward`], indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Payload>>,
}

impl Gradients {
    /// The cotangent of a node, if the loss depends on it (declared
    /// inputs always have one, possibly zero).
    pub fn get(&self, id: ValueId) -> Option<&Payload> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn scalar(&self, id: ValueId) -> Option<f64> {
        self.get(id).and_then(|p| p.as_scalar())
    }
    pub fn image(&self, id: ValueId) -> Option<&Image2D> {
        self.get(id).and_then(|p| p.as_image())
    }
    pub fn vector(&self, id: ValueId) -> Option<&VectorField2D> {
        self.get(id).and_then(|p| p.as_vector())
    }
    pub fn coeff(&self, id: ValueId) -> Option<&CoefficientField> {
        self.get(id).and_then(|p| p.as_coeff())
    }
    pub fn basis(&self, id: ValueId) -> Option<&BasisMatrix> {
        self.get(id).and_then(|p| p.as_basis())
    }
}

/// Traced twin of the smoothing layer's forward pass: same kernels,
/// recorded on the tape so gradients flow back to `p` (and the basis).
/// Only the blur v-step is differentiable; the exact solver is rejected.
pub struct TracedLayer {
    pub q: ValueId,
    pub u: ValueId,
}

pub fn trace_sp_forward(
    tape: &mut Tape,
    p: ValueId,
    basis: ValueId,
    schedule: &AlphaSchedule,
    cfg: &SPConfig,
) -> Result<TracedLayer> {
    cfg.validate()?;
    if schedule.len() != cfg.k {
        return Err(Error::validation(format!(
            "schedule length {} does not match configured iteration count {}",
            schedule.len(),
            cfg.k
        )));
    }
    if cfg.v_solver == VSolver::Exact {
        return Err(Error::validation(
            "the exact v-solver is not differentiable here; use the blur solver for optimization",
        ));
    }
    if cfg.k == 0 {
        let u = tape.coeff_to_flow(p, basis)?;
        return Ok(TracedLayer { q: p, u });
    }
    // v⁰ from q⁰ = p; thereafter alternate coefficient solves and
    // blurred re-expansions. The final iteration's v-step cannot affect
    // the output, so it is not recorded.
    let u0 = tape.coeff_to_flow(p, basis)?;
    let mut v = tape.gaussian_blur(u0, cfg.sigma_v)?;
    let mut q = p;
    let alphas = schedule.values();
    for (idx, &alpha) in alphas.iter().enumerate() {
        q = tape.q_solve(p, v, basis, alpha)?;
        if cfg.nonneg_q {
            q = tape.clamp_nonneg(q)?;
        }
        if idx + 1 < alphas.len() {
            let uq = tape.coeff_to_flow(q, basis)?;
            v = tape.gaussian_blur(uq, cfg.sigma_v)?;
        }
    }
    let u = tape.coeff_to_flow(q, basis)?;
    Ok(TracedLayer { q, u })
}

/// Measured adjoint consistency of one traced op.
#[derive(Debug, Clone)]
pub struct DotCheckReport {
    /// `|forward − reverse| / max(|forward|, |reverse|, 1e-8)`.
    pub rel_error: f64,
    /// ⟨J·dx, dy⟩ via Richardson-extrapolated central differences.
    pub forward: f64,
    /// ⟨dx, Jᵀ·dy⟩ via the tape's reverse sweep.
    pub reverse: f64,
}

/// Adjoint-consistency audit `⟨J·dx, dy⟩ = ⟨dx, Jᵀ·dy⟩` for the op built
/// by `build`, over random directions dx, dy drawn from `seed`. The
/// reverse side comes exactly from [`Tape::backward`]; the forward
/// directional derivative uses central differences at two step sizes
/// combined by Richardson extrapolation, which pushes truncation error
/// for smooth ops at unit scale to ~1e-12, so curved and linear
/// primitives alike can be held to tight tolerances. `build` must
/// construct the same computation every time it is called; it may
/// return any payload kind.
pub fn dot_product_check<F>(build: F, inputs: &[Payload], seed: u64) -> Result<DotCheckReport>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    if inputs.is_empty() {
        return Err(Error::validation(
            "dot_product_check requires at least one input",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random_like = |p: &Payload| -> Payload {
        let mut z = p.zeros_like();
        for i in 0..z.flat_len() {
            z.flat_add(i, rng.random_range(-1.0..1.0));
        }
        z
    };

    // Base forward pass to learn the output shape, then the exact
    // reverse-mode side of the identity.
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|p| tape.input(p.clone())).collect();
    let out = build(&mut tape, &ids)?;
    let dy = random_like(tape.value(out));
    let dxs: Vec<Payload> = inputs.iter().map(&mut random_like).collect();

    let loss = {
        let c = tape.constant(dy.clone());
        let prod = tape.mul(out, c)?;
        tape.sum(prod)?
    };
    let grads = tape.backward(loss)?;
    let mut reverse = 0.0;
    for (id, dx) in ids.iter().zip(&dxs) {
        if let Some(g) = grads.get(*id) {
            for i in 0..dx.flat_len() {
                reverse += dx.flat_get(i) * g.flat_get(i);
            }
        }
    }

    // ⟨J·dx, dy⟩ by differencing t ↦ ⟨out(x + t·dx), dy⟩ around t = 0.
    let eval = |t: f64| -> Result<f64> {
        let mut tape = Tape::new();
        let mut ids = Vec::with_capacity(inputs.len());
        for (p, dx) in inputs.iter().zip(&dxs) {
            let mut shifted = p.clone();
            for i in 0..shifted.flat_len() {
                shifted.flat_add(i, t * dx.flat_get(i));
            }
            ids.push(tape.input(shifted));
        }
        let out = build(&mut tape, &ids)?;
        let c = tape.constant(dy.clone());
        let prod = tape.mul(out, c)?;
        let l = tape.sum(prod)?;
        tape.scalar_value(l)
    };
    let eps = 1e-4;
    let coarse = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
    let fine = (eval(eps / 2.0)? - eval(-eps / 2.0)?) / eps;
    let forward = (4.0 * fine - coarse) / 3.0;

    let rel_error = (forward - reverse).abs() / forward.abs().max(reverse.abs()).max(1e-8);
    Ok(DotCheckReport {
        rel_error,
        forward,
        reverse,
    })
}

/// Result of a finite-difference gradient audit.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative disagreement across all sampled coordinates.
    pub max_rel_error: f64,
    /// Number of coordinates compared.
    pub coords_checked: usize,
    /// Input index and flat coordinate of the worst disagreement.
    pub worst_input: usize,
    pub worst_coord: usize,
    /// Adjoint and central-difference values at that coordinate.
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares [`Tape::backward`] gradients against central finite
/// differences on a random subsample of at least 64 input coordinates
/// (all of them when the inputs are smaller). The relative error uses
/// a `max(|a|, |b|, 1e-8)` denominator. `build` must construct the
/// same scalar-valued computation every time it is called.
pub fn grad_check<F>(
    build: F,
    inputs: &[Payload],
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::validation(format!(
            "finite-difference step must lie in [1e-6, 1e-3], got {epsilon}"
        )));
    }
    if inputs.is_empty() {
        return Err(Error::validation("grad_check requires at least one input"));
    }

    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|p| tape.input(p.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    tape.scalar_value(loss)?;
    let grads = tape.backward(loss)?;

    let lens: Vec<usize> = inputs.iter().map(|p| p.flat_len()).collect();
    let total: usize = lens.iter().sum();
    let n_coords = total.min(64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, total, n_coords);

    let eval = |perturbed: &[Payload]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<ValueId> = perturbed.iter().map(|p| t.input(p.clone())).collect();
        let l = build(&mut t, &ids)?;
        t.scalar_value(l)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: n_coords,
        worst_input: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for flat in picks.iter() {
        // Locate the owning input.
        let mut which = 0;
        let mut coord = flat;
        while coord >= lens[which] {
            coord -= lens[which];
            which += 1;
        }

        let mut plus: Vec<Payload> = inputs.to_vec();
        plus[which].flat_add(coord, epsilon);
        let mut minus: Vec<Payload> = inputs.to_vec();
        minus[which].flat_add(coord, -epsilon);
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * epsilon);

        let ad = grads
            .get(ids[which])
            .map(|g| g.flat_get(coord))
            .unwrap_or(0.0);
        let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_input = which;
            report.worst_coord = coord;
            report.analytic = ad;
            report.numeric = fd;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smoothproper::{init_basis, sp_forward};
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_image(r: &mut ChaCha8Rng, w: usize, h: usize) -> Image2D {
        Image2D::from_fn(w, h, |_, _| r.random_range(0.0..1.0))
    }

    fn random_field(r: &mut ChaCha8Rng, w: usize, h: usize, mag: f64) -> VectorField2D {
        let mut u = VectorField2D::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                u.set(x, y, r.random_range(-mag..mag), r.random_range(-mag..mag));
            }
        }
        u
    }

    fn random_coeffs(r: &mut ChaCha8Rng, w: usize, h: usize, m: usize) -> CoefficientField {
        let data = (0..w * h * m).map(|_| r.random_range(0.8..1.1)).collect();
        CoefficientField::new(w, h, m, data).unwrap()
    }

    /// Asserts [`dot_product_check`] passes under `tol` for the op built
    /// by `build`.
    fn dot_product_test<F>(inputs: &[Payload], build: F, seed: u64, tol: f64)
    where
        F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
    {
        let report = dot_product_check(build, inputs, seed).unwrap();
        assert!(
            report.rel_error < tol,
            "dot-product test failed: forward={} reverse={} rel={}",
            report.forward,
            report.reverse,
            report.rel_error
        );
    }

    #[test]
    fn square_of_scalar_has_gradient_two_x() {
        let mut tape = Tape::new();
        let x = tape.input(3.0);
        let y = tape.square(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.scalar(x), Some(6.0));
    }

    #[test]
    fn sum_of_field_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Image2D::zeros(4, 3));
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        let g = grads.image(x).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn multiplying_by_zero_zeroes_the_gradient() {
        let mut r = rng(2);
        let mut tape = Tape::new();
        let x = tape.input(random_image(&mut r, 5, 4));
        let scaled = tape.scale(x, 0.0).unwrap();
        let loss = tape.sum(scaled).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.image(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unreachable_input_gets_zero_gradient() {
        let mut r = rng(3);
        let mut tape = Tape::new();
        let x = tape.input(random_image(&mut r, 4, 4));
        let unused = tape.input(random_image(&mut r, 3, 3));
        let loss = tape.mean(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.image(unused).unwrap();
        assert_eq!(g.width(), 3);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.input(Image2D::zeros(3, 3));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn blur_adjoint_is_the_same_blur() {
        // Symmetric kernel + reflected borders: blowing the cotangent
        // back through the blur is the blur itself.
        let mut r = rng(4);
        let img = random_image(&mut r, 9, 7);
        let cot = random_image(&mut r, 9, 7);
        let mut tape = Tape::new();
        let x = tape.input(img);
        let b = tape.gaussian_blur(x, 1.3).unwrap();
        let c = tape.constant(cot.clone());
        let prod = tape.mul(b, c).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        let expect = gaussian_blur(&cot, 1.3).unwrap();
        for (a, e) in grads.image(x).unwrap().data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn clamp_kink_uses_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.input(0.0);
        let y = tape.clamp_nonneg(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.scalar(x), Some(0.0));
        let mut tape = Tape::new();
        let x = tape.input(Image2D::from_fn(2, 1, |x, _| x as f64 - 0.5));
        let y = tape.clamp_nonneg(x).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.image(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut r = rng(5);
        let img = random_image(&mut r, 12, 10);
        let flow = random_field(&mut r, 12, 10, 1.5);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.input(img.clone());
            let u = tape.input(flow.clone());
            let warped = tape.warp(x, u).unwrap();
            let sq = tape.square(warped).unwrap();
            let loss = tape.mean(sq).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                grads.image(x).unwrap().data().to_vec(),
                grads.vector(u).unwrap().dx().to_vec(),
                grads.vector(u).unwrap().dy().to_vec(),
            )
        };
        let a = run();
        let b = run();
        // Bit-identical, not merely close.
        assert!(a.0.iter().zip(&b.0).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.2.iter().zip(&b.2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    // ------------------------------------------------------------------
    // Dot-product tests, one per primitive. Linear ops get the tight
    // round-off tolerance; curved ops allow for the O(ε²) truncation of
    // the central difference.
    const LINEAR_TOL: f64 = 1e-8;
    const CURVED_TOL: f64 = 1e-8;

    #[test]
    fn dot_product_elementwise_ops() {
        let mut r = rng(10);
        let a = Payload::Image(random_image(&mut r, 7, 6));
        let b = Payload::Image(random_image(&mut r, 7, 6));
        dot_product_test(&[a.clone(), b.clone()], |t, ids| t.add(ids[0], ids[1]), 11, LINEAR_TOL);
        dot_product_test(&[a.clone(), b.clone()], |t, ids| t.sub(ids[0], ids[1]), 12, LINEAR_TOL);
        dot_product_test(&[a.clone(), b.clone()], |t, ids| t.mul(ids[0], ids[1]), 13, CURVED_TOL);
        dot_product_test(&[a.clone()], |t, ids| t.scale(ids[0], -2.5), 14, LINEAR_TOL);
        dot_product_test(&[a.clone()], |t, ids| t.square(ids[0]), 15, CURVED_TOL);
        // Keep sqrt/div arguments away from zero.
        let pos = Payload::Image(Image2D::from_fn(7, 6, |x, y| 1.0 + ((x * 7 + y) % 5) as f64 * 0.3));
        dot_product_test(&[pos.clone()], |t, ids| t.sqrt(ids[0]), 16, CURVED_TOL);
        dot_product_test(&[a.clone(), pos.clone()], |t, ids| t.div(ids[0], ids[1]), 17, CURVED_TOL);
        // Perturbation-safe distance from the clamp/max kinks.
        let off = Payload::Image(Image2D::from_fn(7, 6, |x, y| {
            if (x + y) % 2 == 0 { 0.8 + x as f64 * 0.1 } else { -0.7 - y as f64 * 0.1 }
        }));
        dot_product_test(&[off.clone()], |t, ids| t.max_const(ids[0], 0.1), 18, LINEAR_TOL);
        dot_product_test(&[off], |t, ids| t.clamp_nonneg(ids[0]), 19, LINEAR_TOL);
    }

    #[test]
    fn dot_product_filters_and_stencils() {
        let mut r = rng(20);
        let a = Payload::Image(random_image(&mut r, 9, 8));
        dot_product_test(&[a.clone()], |t, ids| t.box_filter(ids[0], 3), 21, LINEAR_TOL);
        dot_product_test(&[a.clone()], |t, ids| t.gaussian_blur(ids[0], 1.7), 22, LINEAR_TOL);
        dot_product_test(&[a.clone()], |t, ids| t.grad_x(ids[0]), 23, LINEAR_TOL);
        dot_product_test(&[a.clone()], |t, ids| t.grad_y(ids[0]), 24, LINEAR_TOL);
        let v = Payload::Vector(random_field(&mut r, 9, 8, 2.0));
        dot_product_test(&[v.clone()], |t, ids| t.gaussian_blur(ids[0], 1.1), 25, LINEAR_TOL);
        dot_product_test(&[v.clone()], |t, ids| t.channel_x(ids[0]), 26, LINEAR_TOL);
        dot_product_test(&[v], |t, ids| t.channel_y(ids[0]), 27, LINEAR_TOL);
        let b = Payload::Image(random_image(&mut r, 9, 8));
        dot_product_test(&[a, b], |t, ids| t.pack_vector(ids[0], ids[1]), 28, LINEAR_TOL);
    }

    #[test]
    fn dot_product_reductions() {
        let mut r = rng(30);
        let a = Payload::Image(random_image(&mut r, 6, 5));
        dot_product_test(&[a.clone()], |t, ids| t.sum(ids[0]), 31, LINEAR_TOL);
        dot_product_test(&[a], |t, ids| t.mean(ids[0]), 32, LINEAR_TOL);
        let c = Payload::Coeff(random_coeffs(&mut r, 4, 4, 5));
        dot_product_test(&[c], |t, ids| t.sum(ids[0]), 33, LINEAR_TOL);
    }

    #[test]
    fn dot_product_warp() {
        let mut r = rng(40);
        // Flow magnitude keeps every perturbed sample strictly interior,
        // away from the clamped-edge kinks.
        let img = Payload::Image(random_image(&mut r, 10, 9));
        let flow = Payload::Vector(random_field(&mut r, 10, 9, 1.2));
        dot_product_test(
            &[img, flow],
            |t, ids| t.warp(ids[0], ids[1]),
            41,
            CURVED_TOL,
        );
    }

    #[test]
    fn dot_product_compose() {
        let mut r = rng(42);
        let inner = Payload::Vector(random_field(&mut r, 10, 9, 1.0));
        let outer = Payload::Vector(random_field(&mut r, 10, 9, 1.0));
        dot_product_test(
            &[inner, outer],
            |t, ids| t.compose(ids[0], ids[1]),
            43,
            CURVED_TOL,
        );
    }

    #[test]
    fn dot_product_basis_expansion() {
        let mut r = rng(50);
        let q = Payload::Coeff(random_coeffs(&mut r, 6, 5, 9));
        let basis = Payload::Basis(init_basis(9, &[1.0]).unwrap());
        dot_product_test(
            &[q, basis],
            |t, ids| t.coeff_to_flow(ids[0], ids[1]),
            51,
            CURVED_TOL,
        );
    }

    #[test]
    fn dot_product_coefficient_solve() {
        let mut r = rng(60);
        let p = Payload::Coeff(random_coeffs(&mut r, 5, 4, 9));
        let v = Payload::Vector(random_field(&mut r, 5, 4, 1.0));
        let basis = Payload::Basis(init_basis(9, &[1.0]).unwrap());
        for alpha in [5.0, 0.7] {
            dot_product_test(
                &[p.clone(), v.clone(), basis.clone()],
                move |t, ids| t.q_solve(ids[0], ids[1], ids[2], alpha),
                61,
                CURVED_TOL,
            );
        }
    }

    #[test]
    fn warp_gradient_is_zero_in_clamped_dimensions() {
        // A flow pushing samples far off the left edge: d(out)/d(flow.x)
        // must vanish there while the image gradient still splats onto
        // the edge pixels.
        let mut r = rng(70);
        let img = random_image(&mut r, 8, 8);
        let mut flow = VectorField2D::zeros(8, 8);
        for y in 0..8 {
            flow.set(0, y, -3.0, 0.0);
        }
        let mut tape = Tape::new();
        let xi = tape.input(img);
        let ui = tape.input(flow);
        let warped = tape.warp(xi, ui).unwrap();
        let loss = tape.sum(warped).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gu = grads.vector(ui).unwrap();
        for y in 0..8 {
            assert_eq!(gu.get(0, y).0, 0.0, "clamped x-gradient at row {y}");
        }
        let gi = grads.image(xi).unwrap();
        assert!(gi.get(0, 0) > 0.0);
    }

    // ------------------------------------------------------------------
    // Finite-difference audits of composite computations.

    #[test]
    fn grad_check_rejects_out_of_range_epsilon() {
        let inputs = [Payload::Scalar(1.0)];
        let build = |t: &mut Tape, ids: &[ValueId]| t.square(ids[0]);
        assert!(grad_check(build, &inputs, 1e-8, 0).is_err());
        assert!(grad_check(build, &inputs, 1e-2, 0).is_err());
    }

    #[test]
    fn grad_check_linear_function_is_exact() {
        let mut r = rng(80);
        let inputs = [Payload::Image(random_image(&mut r, 8, 8))];
        let report = grad_check(
            |t, ids| {
                let b = t.gaussian_blur(ids[0], 1.5)?;
                let s = t.scale(b, 3.0)?;
                t.sum(s)
            },
            &inputs,
            1e-4,
            81,
        )
        .unwrap();
        assert!(
            report.max_rel_error < 1e-9,
            "linear map should differentiate exactly, got {}",
            report.max_rel_error
        );
    }

    #[test]
    fn grad_check_warped_similarity() {
        let mut r = rng(82);
        let img = random_image(&mut r, 10, 10);
        let smooth = gaussian_blur(&img, 1.0).unwrap();
        let inputs = [
            Payload::Image(smooth),
            Payload::Vector(random_field(&mut r, 10, 10, 1.0)),
        ];
        let report = grad_check(
            |t, ids| {
                let warped = t.warp(ids[0], ids[1])?;
                let sq = t.square(warped)?;
                t.mean(sq)
            },
            &inputs,
            1e-4,
            83,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "max rel {}", report.max_rel_error);
    }

    #[test]
    fn grad_check_coefficient_solve_wrt_inputs() {
        let mut r = rng(84);
        let inputs = [
            Payload::Coeff(random_coeffs(&mut r, 6, 5, 9)),
            Payload::Vector(random_field(&mut r, 6, 5, 1.0)),
            Payload::Basis(init_basis(9, &[1.0]).unwrap()),
        ];
        let report = grad_check(
            |t, ids| {
                let q = t.q_solve(ids[0], ids[1], ids[2], 1.5)?;
                let sq = t.square(q)?;
                t.mean(sq)
            },
            &inputs,
            1e-4,
            85,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "max rel {}", report.max_rel_error);
    }

    #[test]
    fn traced_layer_matches_untraced_forward() {
        let mut r = rng(90);
        for nonneg in [false, true] {
            let p = random_coeffs(&mut r, 7, 6, 9);
            let basis = init_basis(9, &[1.0]).unwrap();
            let cfg = SPConfig {
                m: 9,
                k: 3,
                basis_scales: vec![1.0],
                nonneg_q: nonneg,
                ..SPConfig::default()
            };
            let schedule = AlphaSchedule::for_iterations(3);
            let plain = sp_forward(&p, &basis, &schedule, &cfg, false).unwrap();

            let mut tape = Tape::new();
            let pid = tape.input(p.clone());
            let bid = tape.constant(basis.clone());
            let traced = trace_sp_forward(&mut tape, pid, bid, &schedule, &cfg).unwrap();
            let q = tape.value(traced.q).as_coeff().unwrap();
            let u = tape.value(traced.u).as_vector().unwrap();
            assert_eq!(q, &plain.q, "traced q diverges (nonneg={nonneg})");
            assert_eq!(u, &plain.u, "traced u diverges (nonneg={nonneg})");
        }
    }

    #[test]
    fn traced_layer_rejects_exact_solver() {
        let mut tape = Tape::new();
        let p = tape.input(CoefficientField::zeros(4, 4, 9));
        let b = tape.constant(init_basis(9, &[1.0]).unwrap());
        let cfg = SPConfig {
            m: 9,
            k: 2,
            basis_scales: vec![1.0],
            v_solver: VSolver::Exact,
            ..SPConfig::default()
        };
        let schedule = AlphaSchedule::for_iterations(2);
        assert!(trace_sp_forward(&mut tape, p, b, &schedule, &cfg).is_err());
    }

    /// Gradient of a short unrolled layer (2 iterations, 6×6) against
    /// central differences, with the basis held constant.
    #[test]
    fn grad_check_short_unrolled_layer() {
        let mut r = rng(92);
        let basis = init_basis(9, &[1.0]).unwrap();
        let p = random_coeffs(&mut r, 6, 6, 9);
        let cfg = SPConfig { m: 9, k: 2, basis_scales: vec![1.0], ..SPConfig::default() };
        let schedule = AlphaSchedule::new(vec![5.0, 1.0]).unwrap();
        let report = grad_check(
            move |t, ids| {
                let b = t.constant(basis.clone());
                let layer = trace_sp_forward(t, ids[0], b, &schedule, &cfg)?;
                let sq = t.square(layer.u)?;
                t.mean(sq)
            },
            &[Payload::Coeff(p)],
            1e-4,
            93,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "max rel {}", report.max_rel_error);
    }

    /// Gradient through the full six-iteration anneal with the standard
    /// nine-atom basis, including the basis input itself.
    #[test]
    fn grad_check_full_unrolled_layer() {
        let mut r = rng(94);
        let p = random_coeffs(&mut r, 8, 8, 9);
        let basis = init_basis(9, &[1.0]).unwrap();
        let cfg = SPConfig { m: 9, k: 6, basis_scales: vec![1.0], ..SPConfig::default() };
        let schedule = AlphaSchedule::for_iterations(6);
        let report = grad_check(
            move |t, ids| {
                let layer = trace_sp_forward(t, ids[0], ids[1], &schedule, &cfg)?;
                let sq = t.square(layer.u)?;
                t.mean(sq)
            },
            &[Payload::Coeff(p), Payload::Basis(basis)],
            1e-4,
            95,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "max rel {}", report.max_rel_error);
    }
}
