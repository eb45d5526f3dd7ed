//! The structured smoothing layer: per-pixel displacement coefficients over a
//! small bank of displacement atoms, refined by alternating a closed-form
//! per-pixel solve with a spatial smoothing step under an annealed coupling
//! schedule.
//!
//! The layer minimizes, over a coefficient field `q` and an auxiliary
//! displacement field `v` (sums over pixels `x`, atoms `i`, and grid edges):
//!
//! ```text
//! E(q, v) = Σ_x ‖p(x) − q(x)‖²
//!         + (1/2α) Σ_x Σ_i q_i(x)·‖v(x) − b_i‖²
//!         + (1/2α) Σ_x ‖(qᵀB)(x) − v(x)‖²
//!         + β Σ_edges ‖v(x) − v(y)‖²
//! ```
//!
//! The q-step minimizes E in `q` exactly: the pointwise normal matrix
//! `2I + (1/α)·BBᵀ` is shared by every pixel, so one small solve context
//! serves the whole image. The v-step either solves the stationarity system
//! of E in `v` (damped Jacobi; the reference path) or approximates the
//! smoothing with a Gaussian blur of `qᵀB` (the fast path). Annealing α
//! downward tightens the coupling, which is what propagates displacement
//! evidence from textured pixels into flat neighborhoods.

use serde::{Deserialize, Serialize};

use crate::grid::{gaussian_blur_field, CoefficientField, VectorField2D};
use crate::{Error, Result};

/// Coupling schedule used when six refinement iterations are requested.
pub const DEFAULT_ALPHA_SCHEDULE: [f64; 6] = [150.0, 50.0, 15.0, 5.0, 1.5, 0.5];

/// Default diffusion weight of the exact v-solver, calibrated once as the
/// argmin of the L2 difference between the exact solve and `v_update_blur`
/// at the default `sigma_v` of 1.5 on a canonical unit-impulse instance
/// (unit coefficient mass at every pixel, alpha = 1). The two smoothing
/// families have different kernel shapes, so the best achievable agreement
/// on a pure impulse is about 39% relative L2; the scan lives in
/// `calibrate_beta_scan` in the test suite.
pub const DEFAULT_BETA: f64 = 3.5;

/// Bank of m displacement atoms, each a 2D offset in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    vectors: Vec<[f64; 2]>,
}

impl BasisMatrix {
    pub fn new(vectors: Vec<[f64; 2]>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::validation("basis must contain at least one atom"));
        }
        if !vectors.iter().all(|b| b[0].is_finite() && b[1].is_finite()) {
            return Err(Error::NonFinite("BasisMatrix::new".into()));
        }
        Ok(Self { vectors })
    }

    pub fn m(&self) -> usize {
        self.vectors.len()
    }

    #[inline]
    pub fn vector(&self, i: usize) -> [f64; 2] {
        self.vectors[i]
    }

    pub fn vectors(&self) -> &[[f64; 2]] {
        &self.vectors
    }

    /// Largest atom norm; init_basis bounds this by max scale times sqrt(2).
    pub fn max_norm(&self) -> f64 {
        self.vectors
            .iter()
            .map(|b| b[0].hypot(b[1]))
            .fold(0.0, f64::max)
    }
}

/// The nine integer offsets of a 3x3 neighborhood at each requested scale,
/// scales outer, offsets row-major inner. `m` must equal `9 * scales.len()`.
pub fn init_basis(m: usize, scales: &[f64]) -> Result<BasisMatrix> {
    if scales.is_empty() {
        return Err(Error::validation("init_basis requires at least one scale"));
    }
    if !scales.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(Error::validation("basis scales must be positive and finite"));
    }
    if m != 9 * scales.len() {
        return Err(Error::validation(format!(
            "basis size {m} must equal 9 x {} scales",
            scales.len()
        )));
    }
    let mut vectors = Vec::with_capacity(m);
    for &s in scales {
        for dy in [-1.0, 0.0, 1.0] {
            for dx in [-1.0, 0.0, 1.0] {
                vectors.push([dx * s, dy * s]);
            }
        }
    }
    BasisMatrix::new(vectors)
}

/// Squared distances from a displacement to every atom.
pub fn distance_vector(v: [f64; 2], basis: &BasisMatrix) -> Vec<f64> {
    basis
        .vectors()
        .iter()
        .map(|b| {
            let dx = v[0] - b[0];
            let dy = v[1] - b[1];
            dx * dx + dy * dy
        })
        .collect()
}

/// Strictly decreasing positive coupling weights, one per refinement
/// iteration. An empty schedule is the disabled-layer configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSchedule {
    values: Vec<f64>,
}

impl AlphaSchedule {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for (i, &a) in values.iter().enumerate() {
            if !a.is_finite() || a <= 0.0 {
                return Err(Error::validation(format!(
                    "alpha schedule entries must be positive, got {a} at index {i}"
                )));
            }
            if i > 0 && values[i - 1] <= a {
                return Err(Error::validation(
                    "alpha schedule must be strictly decreasing",
                ));
            }
        }
        Ok(Self { values })
    }

    /// Default schedule for `k` iterations: the standard six-value annealing
    /// for k = 6, otherwise a geometric sweep over the same range.
    pub fn for_iterations(k: usize) -> Self {
        let values = match k {
            0 => Vec::new(),
            1 => vec![*DEFAULT_ALPHA_SCHEDULE.last().unwrap()],
            6 => DEFAULT_ALPHA_SCHEDULE.to_vec(),
            _ => {
                let hi: f64 = DEFAULT_ALPHA_SCHEDULE[0];
                let lo: f64 = *DEFAULT_ALPHA_SCHEDULE.last().unwrap();
                let ratio = (lo / hi).powf(1.0 / (k - 1) as f64);
                (0..k).map(|i| hi * ratio.powi(i as i32)).collect()
            }
        };
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Which v-step implementation the layer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VSolver {
    /// Gaussian blur of qᵀB; fast, differentiable, used in optimization.
    Blur,
    /// Damped-Jacobi solve of the energy's v-stationarity; the reference
    /// path used by energy-monotonicity validation.
    Exact,
}

/// Layer configuration. `k = 0` disables refinement entirely: the layer
/// output degenerates to u = pᵀB, which is the ablation arm of the
/// benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SPConfig {
    /// Number of atoms; must equal 9 times the number of basis scales.
    pub m: usize,
    /// Refinement iterations.
    #[serde(rename = "K")]
    pub k: usize,
    /// Explicit coupling schedule; derived from `k` when absent.
    pub alpha_schedule: Option<Vec<f64>>,
    /// Blur std (px) of the fast v-step.
    pub sigma_v: f64,
    /// Diffusion weight of the exact v-step and the energy's edge term.
    pub beta: f64,
    /// Clamp q at zero after each solve.
    pub nonneg_q: bool,
    pub v_solver: VSolver,
    /// Atom scales; the bank is the 3x3 offsets at each scale.
    pub basis_scales: Vec<f64>,
}

impl Default for SPConfig {
    fn default() -> Self {
        Self {
            m: 36,
            k: 6,
            alpha_schedule: None,
            sigma_v: 1.5,
            beta: DEFAULT_BETA,
            nonneg_q: false,
            v_solver: VSolver::Blur,
            basis_scales: vec![1.0, 2.0, 4.0, 8.0],
        }
    }
}

impl SPConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::validation("smoothproper.m must be >= 1"));
        }
        if self.m != 9 * self.basis_scales.len() {
            return Err(Error::validation(format!(
                "smoothproper.m = {} must equal 9 x {} basis_scales",
                self.m,
                self.basis_scales.len()
            )));
        }
        if !self.basis_scales.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::validation(
                "smoothproper.basis_scales must be positive and finite",
            ));
        }
        if !self.sigma_v.is_finite() || self.sigma_v < 0.0 {
            return Err(Error::validation("smoothproper.sigma_v must be >= 0"));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::validation("smoothproper.beta must be >= 0"));
        }
        if let Some(values) = &self.alpha_schedule {
            if values.len() != self.k {
                return Err(Error::validation(format!(
                    "smoothproper.alpha_schedule has {} entries but K = {}",
                    values.len(),
                    self.k
                )));
            }
            AlphaSchedule::new(values.clone())?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<AlphaSchedule> {
        match &self.alpha_schedule {
            Some(values) => {
                if values.len() != self.k {
                    return Err(Error::validation(format!(
                        "smoothproper.alpha_schedule has {} entries but K = {}",
                        values.len(),
                        self.k
                    )));
                }
                AlphaSchedule::new(values.clone())
            }
            None => Ok(AlphaSchedule::for_iterations(self.k)),
        }
    }

    pub fn build_basis(&self) -> Result<BasisMatrix> {
        init_basis(self.m, &self.basis_scales)
    }
}

/// Alternation state: current coefficients, current auxiliary field, and the
/// number of completed refinement iterations.
#[derive(Debug, Clone)]
pub struct SPState {
    pub q: CoefficientField,
    pub v: VectorField2D,
    pub iteration: usize,
}

/// Precomputed per-(basis, alpha) data for the pointwise q-solve.
///
/// The normal matrix `A = 2I + (1/alpha)·BBᵀ` is identity plus a rank-2
/// term, so `A⁻¹r = r/2 − (1/4)·B·M⁻¹·(Bᵀr)` with the 2x2 matrix
/// `M = alpha·I + BᵀB/2`. That makes each pixel O(m) instead of O(m²).
pub(crate) struct QSolveContext<'a> {
    basis: &'a BasisMatrix,
    alpha: f64,
    m_inv: [f64; 4],
    sq_norms: Vec<f64>,
}

impl<'a> QSolveContext<'a> {
    pub(crate) fn new(basis: &'a BasisMatrix, alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::validation(format!(
                "coupling weight alpha must be positive, got {alpha}"
            )));
        }
        let mut btb = [0.0f64; 4];
        for b in basis.vectors() {
            btb[0] += b[0] * b[0];
            btb[1] += b[0] * b[1];
            btb[2] += b[1] * b[0];
            btb[3] += b[1] * b[1];
        }
        let m00 = alpha + 0.5 * btb[0];
        let m01 = 0.5 * btb[1];
        let m10 = 0.5 * btb[2];
        let m11 = alpha + 0.5 * btb[3];
        let det = m00 * m11 - m01 * m10;
        // M is alpha·I plus a positive semidefinite matrix, so det >= alpha².
        if !(det > 0.0) {
            return Err(Error::NonFinite("q-solve normal matrix".into()));
        }
        let m_inv = [m11 / det, -m01 / det, -m10 / det, m00 / det];
        let sq_norms = basis
            .vectors()
            .iter()
            .map(|b| b[0] * b[0] + b[1] * b[1])
            .collect();
        Ok(Self { basis, alpha, m_inv, sq_norms })
    }

    /// Right-hand side of the pointwise system for one pixel:
    /// `r_i = 2·p_i + (2/alpha)·(b_i·v) − (1/2alpha)·(‖v‖² + ‖b_i‖²)`,
    /// which is `2p + (1/alpha)(Bv) − (1/2alpha)d` with the distance terms
    /// expanded.
    #[inline]
    pub(crate) fn rhs_into(&self, p: &[f64], v: (f64, f64), out: &mut [f64]) {
        let inv_a = 1.0 / self.alpha;
        let half_inv_a = 0.5 * inv_a;
        let v_sq = v.0 * v.0 + v.1 * v.1;
        for (i, o) in out.iter_mut().enumerate() {
            let b = self.basis.vector(i);
            let bv = b[0] * v.0 + b[1] * v.1;
            *o = 2.0 * p[i] + 2.0 * inv_a * bv - half_inv_a * (v_sq + self.sq_norms[i]);
        }
    }

    /// Applies `A⁻¹` to `r` in place.
    #[inline]
    pub(crate) fn solve_in_place(&self, r: &mut [f64]) {
        let mut s0 = 0.0;
        let mut s1 = 0.0;
        for (i, &ri) in r.iter().enumerate() {
            let b = self.basis.vector(i);
            s0 += b[0] * ri;
            s1 += b[1] * ri;
        }
        let w0 = self.m_inv[0] * s0 + self.m_inv[1] * s1;
        let w1 = self.m_inv[2] * s0 + self.m_inv[3] * s1;
        for (i, ri) in r.iter_mut().enumerate() {
            let b = self.basis.vector(i);
            *ri = 0.5 * *ri - 0.25 * (b[0] * w0 + b[1] * w1);
        }
    }
}

fn check_layer_dims(
    context: &'static str,
    q: &CoefficientField,
    basis: &BasisMatrix,
    v: Option<&VectorField2D>,
) -> Result<()> {
    if q.m() != basis.m() {
        return Err(Error::DimensionMismatch {
            context,
            left: format!("{} coefficients per pixel", q.m()),
            right: format!("{} basis atoms", basis.m()),
        });
    }
    if let Some(v) = v {
        if v.width() != q.width() || v.height() != q.height() {
            return Err(Error::DimensionMismatch {
                context,
                left: format!("{}x{}", q.width(), q.height()),
                right: format!("{}x{}", v.width(), v.height()),
            });
        }
    }
    Ok(())
}

/// Exact pointwise minimizer of the layer energy in q given v:
/// solves `(2I + (1/alpha)BBᵀ)·q = 2p + (1/alpha)Bv − (1/2alpha)d` at every
/// pixel. With `nonneg` set, the result is clamped at zero afterwards.
pub fn q_update(
    p: &CoefficientField,
    v: &VectorField2D,
    basis: &BasisMatrix,
    alpha: f64,
    nonneg: bool,
) -> Result<CoefficientField> {
    check_layer_dims("q_update", p, basis, Some(v))?;
    let ctx = QSolveContext::new(basis, alpha)?;
    let m = p.m();
    let mut out = vec![0.0; p.data().len()];
    for y in 0..p.height() {
        for x in 0..p.width() {
            let base = (y * p.width() + x) * m;
            let chunk = &mut out[base..base + m];
            ctx.rhs_into(p.at(x, y), v.get(x, y), chunk);
            ctx.solve_in_place(chunk);
            if nonneg {
                for c in chunk {
                    if *c < 0.0 {
                        *c = 0.0;
                    }
                }
            }
        }
    }
    Ok(CoefficientField::from_vec_unchecked(
        p.width(),
        p.height(),
        m,
        out,
    ))
}

/// Per-pixel displacement expansion `u(x) = Σ_i q_i(x)·b_i`.
pub fn coeff_to_flow(q: &CoefficientField, basis: &BasisMatrix) -> Result<VectorField2D> {
    check_layer_dims("coeff_to_flow", q, basis, None)?;
    let n = q.width() * q.height();
    let m = q.m();
    let data = q.data();
    let mut dx = vec![0.0; n];
    let mut dy = vec![0.0; n];
    for pix in 0..n {
        let base = pix * m;
        let mut ax = 0.0;
        let mut ay = 0.0;
        for i in 0..m {
            let b = basis.vector(i);
            let qi = data[base + i];
            ax += qi * b[0];
            ay += qi * b[1];
        }
        dx[pix] = ax;
        dy[pix] = ay;
    }
    Ok(VectorField2D::from_vecs_unchecked(q.width(), q.height(), dx, dy))
}

/// Fast v-step: Gaussian blur of qᵀB with std `sigma_v` per component.
pub fn v_update_blur(
    q: &CoefficientField,
    basis: &BasisMatrix,
    sigma_v: f64,
) -> Result<VectorField2D> {
    if !sigma_v.is_finite() || sigma_v < 0.0 {
        return Err(Error::validation(format!(
            "sigma_v must be >= 0, got {sigma_v}"
        )));
    }
    let u = coeff_to_flow(q, basis)?;
    gaussian_blur_field(&u, sigma_v)
}

/// Exact v-step: solves the stationarity of the layer energy in v,
///
/// ```text
/// ((Σ_i q_i(x) + 1)/alpha)·v(x) + 2β·(Lv)(x) = (2/alpha)·(qᵀB)(x)
/// ```
///
/// with L the 5-point graph Laplacian (border edges dropped), by damped
/// Jacobi iteration until the residual max-norm falls below `tol`.
/// Requires `Σ_i q_i(x) + 1 > 0` everywhere, otherwise the energy has no
/// minimizer in v.
pub fn v_update_exact(
    q: &CoefficientField,
    basis: &BasisMatrix,
    alpha: f64,
    beta: f64,
    tol: f64,
    max_iters: usize,
) -> Result<VectorField2D> {
    check_layer_dims("v_update_exact", q, basis, None)?;
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::validation(format!("alpha must be positive, got {alpha}")));
    }
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::validation(format!("beta must be >= 0, got {beta}")));
    }
    if !tol.is_finite() || tol <= 0.0 {
        return Err(Error::validation(format!("tol must be positive, got {tol}")));
    }
    let w = q.width();
    let h = q.height();
    let n = w * h;
    let u = coeff_to_flow(q, basis)?;
    let inv_a = 1.0 / alpha;

    // Per-pixel data weight c(x) = Σ_i q_i(x) + 1 and neighbor degree.
    let mut weight = vec![0.0; n];
    for pix in 0..n {
        let base = pix * q.m();
        let s: f64 = q.data()[base..base + q.m()].iter().sum();
        let c = s + 1.0;
        if c <= 0.0 {
            return Err(Error::validation(
                "v_update_exact requires coefficient sums > -1 at every pixel",
            ));
        }
        weight[pix] = c * inv_a;
    }

    let mut v = vec![0.0; 2 * n];
    let mut next = vec![0.0; 2 * n];
    let rhs: Vec<f64> = (0..2 * n)
        .map(|i| {
            if i < n {
                2.0 * inv_a * u.dx()[i]
            } else {
                2.0 * inv_a * u.dy()[i - n]
            }
        })
        .collect();

    const OMEGA: f64 = 0.8;
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        residual = 0.0;
        for ch in 0..2 {
            let off = ch * n;
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let mut nb = 0.0;
                    let mut deg = 0.0;
                    if x > 0 {
                        nb += v[off + i - 1];
                        deg += 1.0;
                    }
                    if x + 1 < w {
                        nb += v[off + i + 1];
                        deg += 1.0;
                    }
                    if y > 0 {
                        nb += v[off + i - w];
                        deg += 1.0;
                    }
                    if y + 1 < h {
                        nb += v[off + i + w];
                        deg += 1.0;
                    }
                    let diag = weight[i] + 2.0 * beta * deg;
                    let r = rhs[off + i] + 2.0 * beta * nb - diag * v[off + i];
                    let res = r.abs();
                    if res > residual {
                        residual = res;
                    }
                    next[off + i] = v[off + i] + OMEGA * r / diag;
                }
            }
        }
        std::mem::swap(&mut v, &mut next);
        if residual < tol {
            let dy_part = v.split_off(n);
            return Ok(VectorField2D::from_vecs_unchecked(w, h, v, dy_part));
        }
    }
    Err(Error::NoConvergence {
        context: "v_update_exact",
        residual,
        iterations: max_iters,
    })
}

/// The layer energy E(q, v); see the module docs for the expression. The
/// edge term sums each undirected 4-neighbor edge once, matching the exact
/// v-solver's discretization.
pub fn layer_energy(
    p: &CoefficientField,
    q: &CoefficientField,
    v: &VectorField2D,
    basis: &BasisMatrix,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    if !p.same_shape(q) {
        return Err(Error::DimensionMismatch {
            context: "layer_energy",
            left: format!("{}x{}x{}", p.width(), p.height(), p.m()),
            right: format!("{}x{}x{}", q.width(), q.height(), q.m()),
        });
    }
    check_layer_dims("layer_energy", q, basis, Some(v))?;
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::validation(format!("alpha must be positive, got {alpha}")));
    }
    let w = q.width();
    let h = q.height();
    let m = q.m();
    let half_inv_a = 0.5 / alpha;
    let mut fidelity = 0.0;
    let mut assignment = 0.0;
    let mut coupling = 0.0;
    for y in 0..h {
        for x in 0..w {
            let pv = p.at(x, y);
            let qv = q.at(x, y);
            let (vx, vy) = v.get(x, y);
            let mut ux = 0.0;
            let mut uy = 0.0;
            for i in 0..m {
                let d = pv[i] - qv[i];
                fidelity += d * d;
                let b = basis.vector(i);
                let ex = vx - b[0];
                let ey = vy - b[1];
                assignment += qv[i] * (ex * ex + ey * ey);
                ux += qv[i] * b[0];
                uy += qv[i] * b[1];
            }
            let cx = ux - vx;
            let cy = uy - vy;
            coupling += cx * cx + cy * cy;
        }
    }
    let mut smooth = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (vx, vy) = v.get(x, y);
            if x + 1 < w {
                let (nx, ny) = v.get(x + 1, y);
                smooth += (vx - nx) * (vx - nx) + (vy - ny) * (vy - ny);
            }
            if y + 1 < h {
                let (nx, ny) = v.get(x, y + 1);
                smooth += (vx - nx) * (vx - nx) + (vy - ny) * (vy - ny);
            }
        }
    }
    Ok(fidelity + half_inv_a * assignment + half_inv_a * coupling + beta * smooth)
}

/// Which half-step an energy sample was taken after.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HalfStep {
    QUpdate,
    VUpdate,
}

/// One energy measurement inside the alternation.
#[derive(Debug, Clone, Copy)]
pub struct EnergySample {
    /// Refinement iteration, 1-based; 0 is the v-initialization.
    pub iteration: usize,
    pub after: HalfStep,
    pub alpha: f64,
    pub energy: f64,
}

/// Full layer output.
#[derive(Debug, Clone)]
pub struct SpForward {
    pub q: CoefficientField,
    pub u: VectorField2D,
    /// Energy after every half-step, empty when `record_energy` was off or
    /// the layer is disabled.
    pub trace: Vec<EnergySample>,
}

fn run_v_step(
    q: &CoefficientField,
    basis: &BasisMatrix,
    cfg: &SPConfig,
    alpha: f64,
) -> Result<VectorField2D> {
    match cfg.v_solver {
        VSolver::Blur => v_update_blur(q, basis, cfg.sigma_v),
        VSolver::Exact => {
            v_update_exact(q, basis, alpha, cfg.beta, EXACT_V_TOL, EXACT_V_MAX_ITERS)
        }
    }
}

const EXACT_V_TOL: f64 = 1e-11;
const EXACT_V_MAX_ITERS: usize = 20_000;

/// Runs the unrolled alternation: `q⁰ = p`, one v-initialization, then per
/// iteration a q-solve at the scheduled alpha followed by a v-step. Returns
/// the final coefficients and their displacement expansion `u = qᵀB`.
///
/// With an empty schedule (`k = 0`) the layer is disabled and the output is
/// `q = p`, `u = pᵀB`.
pub fn sp_forward(
    p: &CoefficientField,
    basis: &BasisMatrix,
    schedule: &AlphaSchedule,
    cfg: &SPConfig,
    record_energy: bool,
) -> Result<SpForward> {
    check_layer_dims("sp_forward", p, basis, None)?;
    if schedule.len() != cfg.k {
        return Err(Error::validation(format!(
            "schedule length {} does not match K = {}",
            schedule.len(),
            cfg.k
        )));
    }
    if schedule.is_empty() {
        let u = coeff_to_flow(p, basis)?;
        return Ok(SpForward { q: p.clone(), u, trace: Vec::new() });
    }

    let mut trace = Vec::new();
    let mut q = p.clone();
    let mut v = run_v_step(&q, basis, cfg, schedule.values()[0])?;
    if record_energy {
        let alpha = schedule.values()[0];
        trace.push(EnergySample {
            iteration: 0,
            after: HalfStep::VUpdate,
            alpha,
            energy: layer_energy(p, &q, &v, basis, alpha, cfg.beta)?,
        });
    }
    for (k, &alpha) in schedule.values().iter().enumerate() {
        q = q_update(p, &v, basis, alpha, cfg.nonneg_q)?;
        if record_energy {
            trace.push(EnergySample {
                iteration: k + 1,
                after: HalfStep::QUpdate,
                alpha,
                energy: layer_energy(p, &q, &v, basis, alpha, cfg.beta)?,
            });
        }
        v = run_v_step(&q, basis, cfg, alpha)?;
        if record_energy {
            trace.push(EnergySample {
                iteration: k + 1,
                after: HalfStep::VUpdate,
                alpha,
                energy: layer_energy(p, &q, &v, basis, alpha, cfg.beta)?,
            });
        }
    }
    let u = coeff_to_flow(&q, basis)?;
    Ok(SpForward { q, u, trace })
}

/// Convenience wrapper bundling state for callers that step manually.
impl SPState {
    pub fn init(p: &CoefficientField, basis: &BasisMatrix, cfg: &SPConfig, alpha: f64) -> Result<Self> {
        let q = p.clone();
        let v = run_v_step(&q, basis, cfg, alpha)?;
        Ok(Self { q, v, iteration: 0 })
    }

    pub fn step(
        &mut self,
        p: &CoefficientField,
        basis: &BasisMatrix,
        cfg: &SPConfig,
        alpha: f64,
    ) -> Result<()> {
        self.q = q_update(p, &self.v, basis, alpha, cfg.nonneg_q)?;
        self.v = run_v_step(&self.q, basis, cfg, alpha)?;
        self.iteration += 1;
        Ok(())
    }
}
