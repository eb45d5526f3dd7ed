//! Coarse-to-fine instance optimization: the end-to-end registration
//! driver.
//!
//! The driver builds a Laplacian-style image pyramid, then at each level
//! — coarsest first — optimizes a per-pixel coefficient field (and
//! optionally the displacement basis) by adaptive gradient descent
//! through the coefficient-smoothing layer, the diffeomorphic
//! integrator, and the correlation objective. Each level starts from
//! zero coefficients, sees the moving image pre-warped by the flow
//! accumulated so far, and contributes its integrated map to the running
//! composition. Everything is deterministic: no randomness enters the
//! optimization, so identical inputs and configuration reproduce the
//! result bit for bit.

use crate::adjoint::{trace_sp_forward, Tape};
use crate::diffeo::{
    compose, jacobian_det, scaling_squaring, trace_scaling_squaring, IntegrationConfig,
};
use crate::energy::{trace_total_loss_parts, window_for_level, LossConfig};
use crate::grid::{
    bilinear_sample, bilinear_sample_field, gaussian_blur, warp, CoefficientField, Image2D,
    VectorField2D,
};
use crate::smoothproper::{sp_forward, BasisMatrix, SPConfig, VSolver};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_PYRAMID_LEVELS: usize = 3;
pub const DEFAULT_PRE_BLUR_SIGMA: f64 = 1.0;
/// Smallest permitted side length of the coarsest pyramid level.
pub const MIN_COARSE_SIZE: usize = 16;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-8;
/// The step size decays linearly to this fraction of its initial value
/// over each level's iteration budget.
const FINAL_STEP_FRACTION: f64 = 0.1;

/// Image pyramid shape. The downsampling factor is fixed at 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidConfig {
    pub levels: usize,
    /// Gaussian pre-blur (px) applied before each 2x downsample.
    pub pre_blur_sigma: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            levels: DEFAULT_PYRAMID_LEVELS,
            pre_blur_sigma: DEFAULT_PRE_BLUR_SIGMA,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::validation("pyramid.levels must be >= 1"));
        }
        if !self.pre_blur_sigma.is_finite() || self.pre_blur_sigma < 0.0 {
            return Err(Error::validation(format!(
                "pyramid.pre_blur_sigma must be >= 0, got {}",
                self.pre_blur_sigma
            )));
        }
        Ok(())
    }
}

/// Per-level optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Gradient steps per pyramid level.
    pub iterations: usize,
    /// Initial step size: the per-iteration budget for the velocity
    /// field's root-mean-square change, in pixels. Update directions
    /// come from per-coordinate first/second-moment estimates; the
    /// applied coefficient step is rescaled so the realized velocity
    /// change stays within this budget (the smoothing layer's gain from
    /// coefficients to velocity varies by orders of magnitude with the
    /// coefficient pattern, so a raw coefficient-space step size has no
    /// stable meaning). The budget decays linearly to 10% over each
    /// level.
    pub step_size: f64,
    /// Recorded in outputs for reproducibility; the optimizer itself is
    /// deterministic and draws no random numbers.
    pub seed: u64,
    /// Also optimize the displacement basis (re-initialized per level).
    pub optimize_basis: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            iterations: 150,
            step_size: 0.1,
            seed: 0,
            optimize_basis: false,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::validation("optim.iterations must be >= 1"));
        }
        if !self.step_size.is_finite() || self.step_size <= 0.0 {
            return Err(Error::validation(format!(
                "optim.step_size must be > 0, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// One objective evaluation in the optimization trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSample {
    /// Running index across all levels.
    pub iteration: usize,
    /// Pyramid level (0 = full resolution).
    pub level: usize,
    pub total: f64,
    /// Raw (un-negated) windowed correlation.
    pub similarity: f64,
    /// Unweighted diffusive penalty.
    pub regularizer: f64,
}

/// Start/end objective values for one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: usize,
    pub width: usize,
    pub height: usize,
    pub lncc_window: usize,
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Folding diagnostic of the final map, over interior pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobianSummary {
    pub min_det: f64,
    pub frac_nonpositive: f64,
}

/// Everything a registration run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// Full-resolution velocity of the finest level (pre-integration) —
    /// the field the regularizer acted on.
    pub u: VectorField2D,
    /// Full-resolution displacement map accumulated across all levels;
    /// `warp(moving, phi)` aligns the moving image to the fixed one.
    pub phi: VectorField2D,
    pub loss_trace: Vec<LossSample>,
    pub levels: Vec<LevelSummary>,
    pub jacobian: JacobianSummary,
}

/// Builds the image pyramid, finest first (level 0 = input, documented
/// coarse-last): each next level is a Gaussian pre-blur followed by a
/// 2x bilinear downsample (odd sizes floor-divide). Errors if any level
/// would fall under [`MIN_COARSE_SIZE`] pixels per side.
pub fn build_pyramid(img: &Image2D, cfg: &PyramidConfig) -> Result<Vec<Image2D>> {
    cfg.validate()?;
    if img.width() < MIN_COARSE_SIZE || img.height() < MIN_COARSE_SIZE {
        return Err(Error::validation(format!(
            "image {}x{} is smaller than the minimum level size {MIN_COARSE_SIZE}",
            img.width(),
            img.height()
        )));
    }
    let mut levels = vec![img.clone()];
    for _ in 1..cfg.levels {
        let prev = levels.last().expect("nonempty pyramid");
        if prev.width() / 2 < MIN_COARSE_SIZE || prev.height() / 2 < MIN_COARSE_SIZE {
            return Err(Error::validation(format!(
                "image {}x{} is too small for {} pyramid levels (coarsest side must stay >= {MIN_COARSE_SIZE} px)",
                img.width(),
                img.height(),
                cfg.levels
            )));
        }
        let blurred = gaussian_blur(prev, cfg.pre_blur_sigma)?;
        levels.push(downsample_half(&blurred));
    }
    Ok(levels)
}

/// 2x bilinear downsample; output pixel (x, y) samples the input at
/// (2x + 0.5, 2y + 0.5), the geometric center of its 2x2 source block.
fn downsample_half(img: &Image2D) -> Image2D {
    let w = img.width() / 2;
    let h = img.height() / 2;
    Image2D::from_fn(w, h, |x, y| {
        bilinear_sample(img, 2.0 * x as f64 + 0.5, 2.0 * y as f64 + 0.5)
    })
}

/// Transfers a flow one pyramid level finer: bilinear upsample of each
/// component to the exact target size (which must floor-halve back to
/// the source size), with magnitudes doubled to account for the pixel
/// rescale. The sampling grid inverts [`build_pyramid`]'s downsample
/// convention: output pixel (X, Y) reads the source at ((X - 0.5) / 2,
/// (Y - 0.5) / 2).
pub fn upsample_flow(
    u: &VectorField2D,
    target_width: usize,
    target_height: usize,
) -> Result<VectorField2D> {
    if target_width / 2 != u.width() || target_height / 2 != u.height() {
        return Err(Error::validation(format!(
            "upsample target {target_width}x{target_height} is not a 2x refinement of {}x{}",
            u.width(),
            u.height()
        )));
    }
    let mut out = VectorField2D::zeros(target_width, target_height);
    for y in 0..target_height {
        for x in 0..target_width {
            let sx = (x as f64 - 0.5) / 2.0;
            let sy = (y as f64 - 0.5) / 2.0;
            let (dx, dy) = bilinear_sample_field(u, sx, sy);
            out.set(x, y, 2.0 * dx, 2.0 * dy);
        }
    }
    Ok(out)
}

/// Root sum of squared atom lengths: the flow response to a unit white
/// perturbation of the coefficients, used as the first guess when
/// converting the pixel step budget into a coefficient-space step. The
/// realized response is then measured and capped by [`register`]'s
/// trust region, so this only needs the right order of magnitude.
fn basis_gain(basis: &BasisMatrix) -> f64 {
    let sq: f64 = basis
        .vectors()
        .iter()
        .map(|b| b[0] * b[0] + b[1] * b[1])
        .sum();
    sq.sqrt().max(1e-6)
}

/// RMS of the pointwise difference magnitude between two equally sized
/// velocity fields.
fn rms_change(a: &VectorField2D, b: &VectorField2D) -> f64 {
    let n = a.dx().len();
    let mut sum = 0.0;
    for i in 0..n {
        let ddx = a.dx()[i] - b.dx()[i];
        let ddy = a.dy()[i] - b.dy()[i];
        sum += ddx * ddx + ddy * ddy;
    }
    (sum / n as f64).sqrt()
}

fn decayed_step(base: f64, iteration: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let t = iteration as f64 / (total - 1) as f64;
    base * (1.0 - (1.0 - FINAL_STEP_FRACTION) * t)
}

/// First/second-moment adaptive update with bias correction.
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Absorbs one gradient into the moment estimates and returns the
    /// bias-corrected descent direction m̂ / (√v̂ + ε) per coordinate.
    fn direction(&mut self, grad: &[f64]) -> Vec<f64> {
        self.t += 1;
        let bias1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bias2 = 1.0 - ADAM_BETA2.powi(self.t);
        let mut dir = Vec::with_capacity(grad.len());
        for i in 0..grad.len() {
            let g = grad[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            dir.push(m_hat / (v_hat.sqrt() + ADAM_EPSILON));
        }
        dir
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        let dir = self.direction(grad);
        for i in 0..params.len() {
            params[i] -= lr * dir[i];
        }
    }
}

/// Registers `moving` onto `fixed`: coarse-to-fine, per-level coefficient
/// optimization through the smoothing layer and integrator, flow
/// accumulation by composition. See the module docs for the loop
/// structure.
pub fn register(
    fixed: &Image2D,
    moving: &Image2D,
    pyramid: &PyramidConfig,
    sp: &SPConfig,
    loss: &LossConfig,
    opt: &OptimConfig,
) -> Result<RegistrationResult> {
    if !fixed.same_shape(moving) {
        return Err(Error::dimension_mismatch(
            "register",
            (fixed.width(), fixed.height()),
            (moving.width(), moving.height()),
        ));
    }
    pyramid.validate()?;
    sp.validate()?;
    loss.validate()?;
    opt.validate()?;
    if sp.v_solver == VSolver::Exact {
        return Err(Error::validation(
            "the exact v-solver is an analysis tool; optimization requires the differentiable blur solver",
        ));
    }
    let schedule = sp.schedule()?;
    let integration = IntegrationConfig::default();

    let fixed_pyramid = build_pyramid(fixed, pyramid)?;
    let moving_pyramid = build_pyramid(moving, pyramid)?;

    let mut accumulated: Option<VectorField2D> = None;
    let mut final_velocity: Option<VectorField2D> = None;
    let mut loss_trace = Vec::with_capacity(pyramid.levels * opt.iterations);
    let mut level_summaries = Vec::with_capacity(pyramid.levels);
    let mut global_iteration = 0usize;

    for level in (0..pyramid.levels).rev() {
        let fixed_level = &fixed_pyramid[level];
        let moving_level = &moving_pyramid[level];
        let w = fixed_level.width();
        let h = fixed_level.height();

        // Bring the flow accumulated on coarser levels up to this
        // resolution and bake it into the moving image; the level then
        // optimizes a residual on top of it.
        let carried = match &accumulated {
            None => VectorField2D::zeros(w, h),
            Some(prev) => upsample_flow(prev, w, h)?,
        };
        let moving_warped = warp(moving_level, &carried)?;

        let level_loss = LossConfig {
            lncc_window: window_for_level(loss.lncc_window, level),
            ..loss.clone()
        };

        let mut p = CoefficientField::zeros(w, h, sp.m);
        let mut basis = sp.build_basis()?;
        let gain = basis_gain(&basis);
        let mut adam_p = AdamState::new(p.data().len());
        let mut adam_basis = AdamState::new(2 * sp.m);
        let mut initial_loss = f64::NAN;
        let mut final_loss = f64::NAN;

        for iteration in 0..opt.iterations {
            let mut tape = Tape::new();
            let p_id = tape.input(p.clone());
            let basis_id = if opt.optimize_basis {
                tape.input(basis.clone())
            } else {
                tape.constant(basis.clone())
            };
            let layer = trace_sp_forward(&mut tape, p_id, basis_id, &schedule, sp)?;
            let phi_id = trace_scaling_squaring(&mut tape, layer.u, &integration)?;
            let fixed_id = tape.constant(fixed_level.clone());
            let moving_id = tape.constant(moving_warped.clone());
            let parts =
                trace_total_loss_parts(&mut tape, fixed_id, moving_id, phi_id, layer.u, &level_loss)?;

            let total = tape.scalar_value(parts.total)?;
            let similarity = tape.scalar_value(parts.similarity)?;
            let regularizer = tape.scalar_value(parts.regularizer)?;
            if !total.is_finite() {
                return Err(Error::OptimizationAborted {
                    level,
                    iteration,
                    reason: format!(
                        "non-finite loss (similarity {similarity}, regularizer {regularizer})"
                    ),
                });
            }
            loss_trace.push(LossSample {
                iteration: global_iteration,
                level,
                total,
                similarity,
                regularizer,
            });
            global_iteration += 1;
            if iteration == 0 {
                initial_loss = total;
            }
            final_loss = total;

            let grads = tape.backward(parts.total)?;
            let step = decayed_step(opt.step_size, iteration, opt.iterations);

            let g_p = grads.coeff(p_id).expect("coefficient gradient");
            let dir = adam_p.direction(g_p.data());
            let u_now = tape
                .value(layer.u)
                .as_vector()
                .expect("layer velocity")
                .clone();

            // Trust region in velocity space: propose a step, measure
            // how far the layer's output actually moved, and rescale so
            // the realized RMS velocity change stays within this
            // iteration's pixel budget. Coefficients parameterize
            // nonnegative atom weights, so every candidate is projected
            // onto the feasible orthant before probing.
            let propose = |scale: f64, p: &CoefficientField| -> CoefficientField {
                let mut cand = p.clone();
                for (c, d) in cand.data_mut().iter_mut().zip(&dir) {
                    *c -= scale * d;
                    if *c < 0.0 {
                        *c = 0.0;
                    }
                }
                cand
            };
            let base_scale = step / gain;
            let candidate = propose(base_scale, &p);
            let probe = sp_forward(&candidate, &basis, &schedule, sp, false)?;
            let moved = rms_change(&probe.u, &u_now);
            if !moved.is_finite() {
                return Err(Error::OptimizationAborted {
                    level,
                    iteration,
                    reason: "non-finite velocity response to the proposed step".into(),
                });
            }
            p = if moved > step {
                propose(base_scale * step / moved, &p)
            } else {
                candidate
            };
            if p.data().iter().any(|c| !c.is_finite()) {
                return Err(Error::OptimizationAborted {
                    level,
                    iteration,
                    reason: "non-finite coefficient after update".into(),
                });
            }

            if opt.optimize_basis {
                let g_b = grads.basis(basis_id).expect("basis gradient");
                let mut flat: Vec<f64> = basis
                    .vectors()
                    .iter()
                    .flat_map(|v| [v[0], v[1]])
                    .collect();
                let flat_grad: Vec<f64> = g_b
                    .vectors()
                    .iter()
                    .flat_map(|v| [v[0], v[1]])
                    .collect();
                adam_basis.step(&mut flat, &flat_grad, step);
                let vectors: Vec<[f64; 2]> =
                    flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
                basis = BasisMatrix::new(vectors).map_err(|_| Error::OptimizationAborted {
                    level,
                    iteration,
                    reason: "non-finite basis after update".into(),
                })?;
            }
        }

        // Final state of this level, off-tape.
        let out = sp_forward(&p, &basis, &schedule, sp, false)?;
        let phi_level = scaling_squaring(&out.u, &integration)?;
        accumulated = Some(compose(&phi_level, &carried)?);
        if level == 0 {
            final_velocity = Some(out.u);
        }

        level_summaries.push(LevelSummary {
            level,
            width: w,
            height: h,
            lncc_window: level_loss.lncc_window,
            iterations: opt.iterations,
            initial_loss,
            final_loss,
        });
    }

    let phi = accumulated.expect("at least one level");
    let u = final_velocity.expect("finest level velocity");
    let jacobian = summarize_jacobian(&phi)?;
    Ok(RegistrationResult {
        u,
        phi,
        loss_trace,
        levels: level_summaries,
        jacobian,
    })
}

/// Min and nonpositive fraction of det(I + ∇phi) over interior pixels
/// (the one-sided border stencils are excluded).
pub fn summarize_jacobian(phi: &VectorField2D) -> Result<JacobianSummary> {
    let det = jacobian_det(phi)?;
    let w = det.width();
    let h = det.height();
    if w < 3 || h < 3 {
        return Err(Error::validation(
            "jacobian summary requires at least a 3x3 field",
        ));
    }
    let mut min_det = f64::INFINITY;
    let mut nonpositive = 0usize;
    let mut count = 0usize;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let d = det.get(x, y);
            min_det = min_det.min(d);
            if d <= 0.0 {
                nonpositive += 1;
            }
            count += 1;
        }
    }
    Ok(JacobianSummary {
        min_det,
        frac_nonpositive: nonpositive as f64 / count as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn textured_image(seed: u64, w: usize, h: usize) -> Image2D {
        let mut r = rng(seed);
        let noise = Image2D::from_fn(w, h, |_, _| r.random_range(0.0..1.0));
        gaussian_blur(&noise, 1.2).unwrap()
    }

    #[test]
    fn single_level_pyramid_is_the_input() {
        let img = textured_image(1, 20, 18);
        let cfg = PyramidConfig { levels: 1, ..PyramidConfig::default() };
        let pyr = build_pyramid(&img, &cfg).unwrap();
        assert_eq!(pyr.len(), 1);
        assert_eq!(pyr[0], img);
    }

    #[test]
    fn three_level_pyramid_halves_sizes() {
        let img = textured_image(2, 64, 64);
        let pyr = build_pyramid(&img, &PyramidConfig::default()).unwrap();
        let sizes: Vec<(usize, usize)> =
            pyr.iter().map(|l| (l.width(), l.height())).collect();
        assert_eq!(sizes, vec![(64, 64), (32, 32), (16, 16)]);
    }

    #[test]
    fn constant_image_stays_constant_across_levels() {
        let img = Image2D::from_fn(64, 64, |_, _| 0.37);
        let pyr = build_pyramid(&img, &PyramidConfig::default()).unwrap();
        for level in &pyr {
            for &v in level.data() {
                assert!((v - 0.37).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pyramid_rejects_images_too_small_for_the_levels() {
        let img = textured_image(3, 32, 32);
        // 32 -> 16 -> 8 would undershoot the minimum level size.
        assert!(build_pyramid(&img, &PyramidConfig::default()).is_err());
        let tiny = textured_image(4, 8, 8);
        let one = PyramidConfig { levels: 1, ..PyramidConfig::default() };
        assert!(build_pyramid(&tiny, &one).is_err());
    }

    #[test]
    fn upsampling_doubles_constant_flows_exactly() {
        let zero = VectorField2D::zeros(8, 8);
        let up = upsample_flow(&zero, 16, 16).unwrap();
        assert!(up.dx().iter().chain(up.dy()).all(|&v| v == 0.0));

        let mut c = VectorField2D::zeros(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                c.set(x, y, 1.0, 0.0);
            }
        }
        let up = upsample_flow(&c, 16, 16).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(up.get(x, y), (2.0, 0.0));
            }
        }
    }

    #[test]
    fn upsampling_matches_a_direct_interpolation_oracle() {
        let mut r = rng(5);
        let mut u = VectorField2D::zeros(9, 7);
        for y in 0..7 {
            for x in 0..9 {
                u.set(x, y, r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
            }
        }
        // Odd target sizes exercise the floor-division contract.
        let up = upsample_flow(&u, 19, 15).unwrap();
        for y in 0..15 {
            for x in 0..19 {
                let sx = (x as f64 - 0.5) / 2.0;
                let sy = (y as f64 - 0.5) / 2.0;
                let want = bilinear_sample_field(&u, sx, sy);
                let got = up.get(x, y);
                assert!((got.0 - 2.0 * want.0).abs() < 1e-12);
                assert!((got.1 - 2.0 * want.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsampling_rejects_non_halving_targets() {
        let u = VectorField2D::zeros(8, 8);
        assert!(upsample_flow(&u, 15, 16).is_err());
        assert!(upsample_flow(&u, 16, 18).is_err());
    }

    fn quick_opt(iterations: usize) -> OptimConfig {
        OptimConfig { iterations, ..OptimConfig::default() }
    }

    #[test]
    fn registering_an_image_to_itself_stays_at_the_identity() {
        let img = textured_image(6, 48, 48);
        let pyramid = PyramidConfig { levels: 2, ..PyramidConfig::default() };
        let result = register(
            &img,
            &img,
            &pyramid,
            &SPConfig::default(),
            &LossConfig::default(),
            &quick_opt(40),
        )
        .unwrap();
        assert!(
            result.u.mean_magnitude() < 0.1,
            "mean |u| = {}",
            result.u.mean_magnitude()
        );
        let last = result.loss_trace.last().unwrap();
        assert!((last.total + 1.0).abs() < 1e-3, "final loss {}", last.total);
        assert_eq!(result.loss_trace.len(), 2 * 40);
        assert_eq!(result.levels.len(), 2);
        assert!(result.jacobian.min_det > 0.0);
    }

    #[test]
    fn recovers_a_known_integer_translation() {
        // moving(x) shifted by t appears in fixed at the same place:
        // fixed = warp(moving, t) exactly for integer t, so the true
        // displacement field is the constant t.
        let t = (3.0, -2.0);
        let moving = textured_image(7, 48, 48);
        let mut shift = VectorField2D::zeros(48, 48);
        for y in 0..48 {
            for x in 0..48 {
                shift.set(x, y, t.0, t.1);
            }
        }
        let fixed = warp(&moving, &shift).unwrap();
        let pyramid = PyramidConfig { levels: 2, ..PyramidConfig::default() };
        let result = register(
            &fixed,
            &moving,
            &pyramid,
            &SPConfig::default(),
            &LossConfig::default(),
            &quick_opt(60),
        )
        .unwrap();
        // Interior endpoint error against the constant ground truth.
        let margin = 8;
        let mut err = 0.0;
        let mut n = 0;
        for y in margin..48 - margin {
            for x in margin..48 - margin {
                let (dx, dy) = result.phi.get(x, y);
                err += ((dx - t.0).powi(2) + (dy - t.1).powi(2)).sqrt();
                n += 1;
            }
        }
        err /= n as f64;
        assert!(err < 0.75, "interior endpoint error {err}");
    }

    #[test]
    fn identical_configs_reproduce_bit_identical_results() {
        let fixed = textured_image(8, 32, 32);
        let moving = textured_image(9, 32, 32);
        let pyramid = PyramidConfig { levels: 1, ..PyramidConfig::default() };
        let run = || {
            register(
                &fixed,
                &moving,
                &pyramid,
                &SPConfig::default(),
                &LossConfig::default(),
                &quick_opt(5),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert!(a
            .phi
            .dx()
            .iter()
            .zip(b.phi.dx())
            .chain(a.phi.dy().iter().zip(b.phi.dy()))
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a
            .u
            .dx()
            .iter()
            .zip(b.u.dx())
            .chain(a.u.dy().iter().zip(b.u.dy()))
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a
            .loss_trace
            .iter()
            .zip(&b.loss_trace)
            .all(|(x, y)| x.total.to_bits() == y.total.to_bits()));
    }

    #[test]
    fn loss_trace_is_finite_with_a_non_increasing_best_envelope() {
        let fixed = textured_image(10, 32, 32);
        let moving = textured_image(11, 32, 32);
        let pyramid = PyramidConfig { levels: 1, ..PyramidConfig::default() };
        let result = register(
            &fixed,
            &moving,
            &pyramid,
            &SPConfig::default(),
            &LossConfig::default(),
            &quick_opt(25),
        )
        .unwrap();
        let mut best = f64::INFINITY;
        let mut envelope = Vec::new();
        for s in &result.loss_trace {
            assert!(s.total.is_finite());
            assert!(s.similarity.is_finite());
            assert!(s.regularizer.is_finite());
            best = best.min(s.total);
            envelope.push(best);
        }
        assert!(envelope.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn rejects_the_exact_solver_and_mismatched_inputs() {
        let a = textured_image(12, 32, 32);
        let b = textured_image(13, 32, 30);
        let pyramid = PyramidConfig { levels: 1, ..PyramidConfig::default() };
        assert!(matches!(
            register(&a, &b, &pyramid, &SPConfig::default(), &LossConfig::default(), &quick_opt(1)),
            Err(Error::DimensionMismatch { .. })
        ));
        let exact = SPConfig { v_solver: VSolver::Exact, ..SPConfig::default() };
        assert!(register(&a, &a, &pyramid, &exact, &LossConfig::default(), &quick_opt(1)).is_err());
    }

    #[test]
    fn runaway_step_size_aborts_with_a_diagnostic() {
        let fixed = textured_image(14, 32, 32);
        let moving = textured_image(15, 32, 32);
        let pyramid = PyramidConfig { levels: 1, ..PyramidConfig::default() };
        let opt = OptimConfig { iterations: 3, step_size: 1e300, ..OptimConfig::default() };
        let err = register(
            &fixed,
            &moving,
            &pyramid,
            &SPConfig::default(),
            &LossConfig::default(),
            &opt,
        )
        .unwrap_err();
        assert!(matches!(err, Error::OptimizationAborted { .. }), "got {err:?}");
    }

    #[test]
    fn step_size_decays_linearly_to_a_tenth() {
        assert_eq!(decayed_step(0.1, 0, 100), 0.1);
        let last = decayed_step(0.1, 99, 100);
        assert!((last - 0.01).abs() < 1e-12);
        assert_eq!(decayed_step(0.5, 0, 1), 0.5);
    }
}
