//! The outer-loop objective: local normalized cross-correlation
//! dissimilarity between the fixed image and the warped moving image,
//! plus a diffusive penalty on the velocity field.
//!
//! Every quantity here is defined by a recorded-tape computation
//! ([`trace_lncc`], [`trace_diffusive_reg`], [`trace_total_loss`]) so the
//! optimizer's gradients and the reported loss values come from one
//! implementation; the plain functions ([`lncc`], [`diffusive_reg`],
//! [`total_loss`]) evaluate the same trace on a throwaway tape.

use crate::adjoint::{Tape, ValueId};
use crate::grid::{Image2D, VectorField2D};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_LNCC_WINDOW: usize = 9;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-5;

/// Similarity/regularization weights and windowing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Side length (px) of the correlation window at full resolution;
    /// odd, at least 3.
    pub lncc_window: usize,
    /// Weight of the diffusive penalty.
    pub lambda: f64,
    /// Lower bound applied to each windowed variance before the
    /// correlation is normalized; keeps the value bounded in flat
    /// regions.
    pub variance_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lncc_window: DEFAULT_LNCC_WINDOW,
            lambda: DEFAULT_LAMBDA,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lncc_window < 3 || self.lncc_window % 2 == 0 {
            return Err(Error::validation(format!(
                "loss.lncc_window must be odd and >= 3, got {}",
                self.lncc_window
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::validation(format!(
                "loss.lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !self.variance_floor.is_finite() || self.variance_floor <= 0.0 {
            return Err(Error::validation(format!(
                "loss.variance_floor must be > 0, got {}",
                self.variance_floor
            )));
        }
        Ok(())
    }
}

/// Correlation window for a pyramid level `levels_below_full` halvings
/// below full resolution: the base window halved that many times, each
/// halving rounded to the nearest odd and clamped at 3.
pub fn window_for_level(base_window: usize, levels_below_full: usize) -> usize {
    let mut w = base_window;
    for _ in 0..levels_below_full {
        w = nearest_odd(w as f64 / 2.0).max(3);
    }
    w.max(3)
}

fn nearest_odd(x: f64) -> usize {
    let r = x.round().max(1.0) as usize;
    if r % 2 == 1 {
        r
    } else {
        // Pick the odd neighbor nearer to x; ties go down.
        let below = (r - 1).max(1);
        let above = r + 1;
        if x - below as f64 <= above as f64 - x {
            below
        } else {
            above
        }
    }
}

fn expect_image(tape: &Tape, id: ValueId, what: &str) -> Result<(usize, usize)> {
    match tape.value(id).as_image() {
        Some(img) => Ok((img.width(), img.height())),
        None => Err(Error::validation(format!(
            "{what} must be an image, got {}",
            tape.value(id).kind()
        ))),
    }
}

fn expect_vector(tape: &Tape, id: ValueId, what: &str) -> Result<(usize, usize)> {
    match tape.value(id).as_vector() {
        Some(v) => Ok((v.width(), v.height())),
        None => Err(Error::validation(format!(
            "{what} must be a displacement field, got {}",
            tape.value(id).kind()
        ))),
    }
}

/// Records the windowed-correlation similarity of two images onto the
/// tape and returns the scalar node: per pixel, the Pearson correlation
/// of the two images over an odd square window (box means, reflected
/// borders), with each windowed variance floored at `variance_floor`
/// before normalization, averaged over all pixels.
pub fn trace_lncc(
    tape: &mut Tape,
    a: ValueId,
    b: ValueId,
    window: usize,
    variance_floor: f64,
) -> Result<ValueId> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::validation(format!(
            "correlation window must be odd and >= 3, got {window}"
        )));
    }
    if !variance_floor.is_finite() || variance_floor <= 0.0 {
        return Err(Error::validation(format!(
            "variance floor must be > 0, got {variance_floor}"
        )));
    }
    let da = expect_image(tape, a, "correlation operand")?;
    let db = expect_image(tape, b, "correlation operand")?;
    if da != db {
        return Err(Error::dimension_mismatch("lncc", da, db));
    }

    let mean_a = tape.box_filter(a, window)?;
    let mean_b = tape.box_filter(b, window)?;
    let ab = tape.mul(a, b)?;
    let mean_ab = tape.box_filter(ab, window)?;
    let aa = tape.square(a)?;
    let mean_aa = tape.box_filter(aa, window)?;
    let bb = tape.square(b)?;
    let mean_bb = tape.box_filter(bb, window)?;

    let mean_prod = tape.mul(mean_a, mean_b)?;
    let cov = tape.sub(mean_ab, mean_prod)?;
    let mean_a_sq = tape.square(mean_a)?;
    let var_a = tape.sub(mean_aa, mean_a_sq)?;
    let mean_b_sq = tape.square(mean_b)?;
    let var_b = tape.sub(mean_bb, mean_b_sq)?;

    let var_a_floored = tape.max_const(var_a, variance_floor)?;
    let var_b_floored = tape.max_const(var_b, variance_floor)?;
    let var_prod = tape.mul(var_a_floored, var_b_floored)?;
    let denom = tape.sqrt(var_prod)?;
    let ncc = tape.div(cov, denom)?;
    tape.mean(ncc)
}

/// Windowed normalized cross-correlation in `[-1, 1]`, averaged over
/// pixels.
pub fn lncc(a: &Image2D, b: &Image2D, window: usize, variance_floor: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let ia = tape.constant(a.clone());
    let ib = tape.constant(b.clone());
    let out = trace_lncc(&mut tape, ia, ib, window, variance_floor)?;
    tape.scalar_value(out)
}

/// Records the diffusive penalty of a displacement/velocity field: the
/// mean over pixels of the squared spatial derivatives of both
/// components.
pub fn trace_diffusive_reg(tape: &mut Tape, u: ValueId) -> Result<ValueId> {
    expect_vector(tape, u, "regularizer operand")?;
    let ux = tape.channel_x(u)?;
    let uy = tape.channel_y(u)?;
    let gxx = tape.grad_x(ux)?;
    let gxy = tape.grad_y(ux)?;
    let gyx = tape.grad_x(uy)?;
    let gyy = tape.grad_y(uy)?;
    let sxx = tape.square(gxx)?;
    let sxy = tape.square(gxy)?;
    let syx = tape.square(gyx)?;
    let syy = tape.square(gyy)?;
    let s1 = tape.add(sxx, sxy)?;
    let s2 = tape.add(syx, syy)?;
    let total = tape.add(s1, s2)?;
    tape.mean(total)
}

/// Mean squared spatial derivative of a displacement/velocity field.
pub fn diffusive_reg(u: &VectorField2D) -> Result<f64> {
    let mut tape = Tape::new();
    let id = tape.constant(u.clone());
    let out = trace_diffusive_reg(&mut tape, id)?;
    tape.scalar_value(out)
}

/// Node handles for the objective and its two readable sub-terms: the
/// raw (un-negated) correlation and the unweighted penalty.
#[derive(Debug, Clone, Copy)]
pub struct TracedLoss {
    pub total: ValueId,
    pub similarity: ValueId,
    pub regularizer: ValueId,
}

/// Records the full objective: negative correlation between the fixed
/// image and the moving image warped by `phi`, plus `lambda` times the
/// diffusive penalty of `u`. The integrated map drives the similarity
/// term; the raw velocity drives the regularizer. Returns handles to
/// the total and to both sub-terms so callers can log them.
pub fn trace_total_loss_parts(
    tape: &mut Tape,
    fixed: ValueId,
    moving: ValueId,
    phi: ValueId,
    u: ValueId,
    cfg: &LossConfig,
) -> Result<TracedLoss> {
    cfg.validate()?;
    let df = expect_image(tape, fixed, "fixed image")?;
    let dm = expect_image(tape, moving, "moving image")?;
    let dp = expect_vector(tape, phi, "warp field")?;
    let du = expect_vector(tape, u, "velocity field")?;
    if df != dm {
        return Err(Error::dimension_mismatch("total_loss images", df, dm));
    }
    if df != dp || df != du {
        return Err(Error::dimension_mismatch(
            "total_loss fields",
            df,
            if df != dp { dp } else { du },
        ));
    }
    let warped = tape.warp(moving, phi)?;
    let sim = trace_lncc(tape, fixed, warped, cfg.lncc_window, cfg.variance_floor)?;
    let dissim = tape.scale(sim, -1.0)?;
    let reg = trace_diffusive_reg(tape, u)?;
    let weighted = tape.scale(reg, cfg.lambda)?;
    let total = tape.add(dissim, weighted)?;
    Ok(TracedLoss {
        total,
        similarity: sim,
        regularizer: reg,
    })
}

/// Records the full objective and returns only the total; see
/// [`trace_total_loss_parts`].
pub fn trace_total_loss(
    tape: &mut Tape,
    fixed: ValueId,
    moving: ValueId,
    phi: ValueId,
    u: ValueId,
    cfg: &LossConfig,
) -> Result<ValueId> {
    Ok(trace_total_loss_parts(tape, fixed, moving, phi, u, cfg)?.total)
}

/// Full objective value; see [`trace_total_loss`].
pub fn total_loss(
    fixed: &Image2D,
    moving: &Image2D,
    phi: &VectorField2D,
    u: &VectorField2D,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.constant(fixed.clone());
    let m = tape.constant(moving.clone());
    let p = tape.constant(phi.clone());
    let v = tape.constant(u.clone());
    let out = trace_total_loss(&mut tape, f, m, p, v, cfg)?;
    tape.scalar_value(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::{grad_check, Payload};
    use crate::grid::{gaussian_blur, reflect, warp};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_image(r: &mut ChaCha8Rng, w: usize, h: usize) -> Image2D {
        Image2D::from_fn(w, h, |_, _| r.random_range(0.0..1.0))
    }

    /// Windowed correlation by direct per-pixel double loops with the
    /// same reflected borders and variance floor as the filtered
    /// implementation.
    fn lncc_naive(a: &Image2D, b: &Image2D, window: usize, floor: f64) -> f64 {
        let w = a.width();
        let h = a.height();
        let radius = (window / 2) as isize;
        let n = (window * window) as f64;
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                let (mut sa, mut sb, mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let xi = reflect(x as isize + dx, w);
                        let yi = reflect(y as isize + dy, h);
                        let va = a.get(xi, yi);
                        let vb = b.get(xi, yi);
                        sa += va;
                        sb += vb;
                        sab += va * vb;
                        saa += va * va;
                        sbb += vb * vb;
                    }
                }
                let ma = sa / n;
                let mb = sb / n;
                let cov = sab / n - ma * mb;
                let va = (saa / n - ma * ma).max(floor);
                let vb = (sbb / n - mb * mb).max(floor);
                acc += cov / (va * vb).sqrt();
            }
        }
        acc / (w * h) as f64
    }

    #[test]
    fn config_defaults_validate_and_bad_values_are_rejected() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = |f: &dyn Fn(&mut LossConfig)| {
            let mut c = LossConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(&|c| c.lncc_window = 8));
        assert!(bad(&|c| c.lncc_window = 1));
        assert!(bad(&|c| c.lambda = -0.5));
        assert!(bad(&|c| c.variance_floor = 0.0));
        assert!(bad(&|c| c.variance_floor = f64::NAN));
    }

    #[test]
    fn window_halves_to_nearest_odd_with_a_floor_of_three() {
        assert_eq!(window_for_level(9, 0), 9);
        assert_eq!(window_for_level(9, 1), 5);
        assert_eq!(window_for_level(9, 2), 3);
        assert_eq!(window_for_level(9, 5), 3);
        assert_eq!(window_for_level(7, 1), 3);
        assert_eq!(window_for_level(13, 1), 7);
    }

    #[test]
    fn self_correlation_is_one() {
        let mut r = rng(1);
        let a = random_image(&mut r, 16, 16);
        let v = lncc(&a, &a, 9, 1e-5).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn inverted_image_is_perfectly_anticorrelated() {
        let mut r = rng(2);
        let a = random_image(&mut r, 16, 16);
        let b = Image2D::from_fn(16, 16, |x, y| 1.0 - a.get(x, y));
        let v = lncc(&a, &b, 9, 1e-5).unwrap();
        assert!((v + 1.0).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn filtered_lncc_matches_the_naive_double_loop() {
        let mut r = rng(3);
        let a = random_image(&mut r, 16, 16);
        let b = random_image(&mut r, 16, 16);
        for window in [3, 5, 9] {
            let fast = lncc(&a, &b, window, 1e-5).unwrap();
            let slow = lncc_naive(&a, &b, window, 1e-5);
            assert!(
                (fast - slow).abs() < 1e-10,
                "window {window}: {fast} vs {slow}"
            );
        }
    }

    #[test]
    fn lncc_rejects_mismatched_images_and_bad_windows() {
        let a = Image2D::zeros(8, 8);
        let b = Image2D::zeros(9, 8);
        assert!(lncc(&a, &b, 5, 1e-5).is_err());
        assert!(lncc(&a, &a, 4, 1e-5).is_err());
        assert!(lncc(&a, &a, 5, 0.0).is_err());
    }

    #[test]
    fn flat_images_stay_bounded_by_the_variance_floor() {
        // Constant images have zero variance everywhere; the floor keeps
        // the correlation defined and near zero (the covariance vanishes
        // up to rounding, which the small floor then amplifies slightly).
        let a = Image2D::from_fn(10, 10, |_, _| 0.4);
        let v = lncc(&a, &a, 5, 1e-5).unwrap();
        assert!(v.abs() < 1e-9, "got {v}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// The floored correlation is a mean of per-pixel Pearson values,
        /// so it stays inside [-1, 1] for arbitrary inputs.
        #[test]
        fn lncc_is_bounded(data_a in prop::collection::vec(0.0f64..1.0, 64),
                           data_b in prop::collection::vec(0.0f64..1.0, 64)) {
            let a = Image2D::new(8, 8, data_a).unwrap();
            let b = Image2D::new(8, 8, data_b).unwrap();
            let v = lncc(&a, &b, 5, 1e-5).unwrap();
            prop_assert!(v >= -1.0 - 1e-12 && v <= 1.0 + 1e-12, "out of range: {}", v);
        }

        /// Swapping the operands cannot change the correlation.
        #[test]
        fn lncc_is_symmetric(data_a in prop::collection::vec(0.0f64..1.0, 64),
                             data_b in prop::collection::vec(0.0f64..1.0, 64)) {
            let a = Image2D::new(8, 8, data_a).unwrap();
            let b = Image2D::new(8, 8, data_b).unwrap();
            let ab = lncc(&a, &b, 5, 1e-5).unwrap();
            let ba = lncc(&b, &a, 5, 1e-5).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12, "{} vs {}", ab, ba);
        }

        /// The penalty is quadratic: scaling the field scales it by c².
        #[test]
        fn diffusive_reg_scales_quadratically(c in 0.1f64..4.0, seed in 0u64..1000) {
            let mut r = rng(seed);
            let mut u = VectorField2D::zeros(10, 9);
            for y in 0..9 {
                for x in 0..10 {
                    u.set(x, y, r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
                }
            }
            let base = diffusive_reg(&u).unwrap();
            let mut scaled = VectorField2D::zeros(10, 9);
            for y in 0..9 {
                for x in 0..10 {
                    let (dx, dy) = u.get(x, y);
                    scaled.set(x, y, c * dx, c * dy);
                }
            }
            let got = diffusive_reg(&scaled).unwrap();
            let want = c * c * base;
            prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0),
                         "{} vs {}", got, want);
        }
    }

    #[test]
    fn lncc_is_invariant_to_affine_intensity_rescaling() {
        let mut r = rng(4);
        let a = random_image(&mut r, 16, 16);
        let b = random_image(&mut r, 16, 16);
        let rescaled = Image2D::from_fn(16, 16, |x, y| 2.3 * b.get(x, y) + 0.7);
        let before = lncc(&a, &b, 9, 1e-5).unwrap();
        let after = lncc(&a, &rescaled, 9, 1e-5).unwrap();
        assert!((before - after).abs() < 1e-6, "{before} vs {after}");
    }

    #[test]
    fn zero_and_constant_fields_have_no_penalty() {
        let zero = VectorField2D::zeros(12, 11);
        assert_eq!(diffusive_reg(&zero).unwrap(), 0.0);
        let mut constant = VectorField2D::zeros(12, 11);
        for y in 0..11 {
            for x in 0..12 {
                constant.set(x, y, 1.5, -0.5);
            }
        }
        assert_eq!(diffusive_reg(&constant).unwrap(), 0.0);
    }

    #[test]
    fn unit_ramp_costs_exactly_one() {
        // dx(x, y) = x has derivative 1 everywhere under this stencil
        // (one-sided rows at the borders included), dy = 0.
        let mut u = VectorField2D::zeros(9, 7);
        for y in 0..7 {
            for x in 0..9 {
                u.set(x, y, x as f64, 0.0);
            }
        }
        let v = diffusive_reg(&u).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn penalty_matches_an_independent_stencil_sum() {
        let mut r = rng(5);
        let w = 11;
        let h = 8;
        let mut u = VectorField2D::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                u.set(x, y, r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
            }
        }
        // Re-derive from the raw stencil definition.
        let deriv = |f: &dyn Fn(usize, usize) -> f64, x: usize, y: usize, horiz: bool| -> f64 {
            let (n, c) = if horiz { (w, x) } else { (h, y) };
            let at = |i: usize| if horiz { f(i, y) } else { f(x, i) };
            if c == 0 {
                at(1) - at(0)
            } else if c == n - 1 {
                at(n - 1) - at(n - 2)
            } else {
                0.5 * (at(c + 1) - at(c - 1))
            }
        };
        let fx = |x: usize, y: usize| u.get(x, y).0;
        let fy = |x: usize, y: usize| u.get(x, y).1;
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                acc += deriv(&fx, x, y, true).powi(2)
                    + deriv(&fx, x, y, false).powi(2)
                    + deriv(&fy, x, y, true).powi(2)
                    + deriv(&fy, x, y, false).powi(2);
            }
        }
        let want = acc / (w * h) as f64;
        let got = diffusive_reg(&u).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn identical_images_with_identity_warp_score_minus_one() {
        let mut r = rng(6);
        let img = random_image(&mut r, 16, 16);
        let zero = VectorField2D::zeros(16, 16);
        let cfg = LossConfig::default();
        let v = total_loss(&img, &img, &zero, &zero, &cfg).unwrap();
        assert!((v + 1.0).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn zero_lambda_reduces_to_pure_negative_correlation() {
        let mut r = rng(7);
        let a = random_image(&mut r, 12, 12);
        let b = random_image(&mut r, 12, 12);
        let zero = VectorField2D::zeros(12, 12);
        let cfg = LossConfig { lambda: 0.0, lncc_window: 5, ..LossConfig::default() };
        let v = total_loss(&a, &b, &zero, &zero, &cfg).unwrap();
        let sim = lncc(&a, &b, 5, cfg.variance_floor).unwrap();
        assert!((v + sim).abs() < 1e-15, "{v} vs {}", -sim);
    }

    #[test]
    fn total_loss_composes_its_independently_computed_parts() {
        let mut r = rng(8);
        let fixed = random_image(&mut r, 14, 13);
        let moving = random_image(&mut r, 14, 13);
        let mut phi = VectorField2D::zeros(14, 13);
        let mut u = VectorField2D::zeros(14, 13);
        for y in 0..13 {
            for x in 0..14 {
                phi.set(x, y, r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
                u.set(x, y, r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
            }
        }
        let cfg = LossConfig { lncc_window: 5, lambda: 0.7, ..LossConfig::default() };
        let whole = total_loss(&fixed, &moving, &phi, &u, &cfg).unwrap();
        let warped = warp(&moving, &phi).unwrap();
        let parts = -lncc(&fixed, &warped, 5, cfg.variance_floor).unwrap()
            + 0.7 * diffusive_reg(&u).unwrap();
        assert!((whole - parts).abs() < 1e-12, "{whole} vs {parts}");
    }

    #[test]
    fn total_loss_rejects_mismatched_field_shapes() {
        let img = Image2D::zeros(10, 10);
        let good = VectorField2D::zeros(10, 10);
        let bad = VectorField2D::zeros(9, 10);
        let cfg = LossConfig { lncc_window: 5, ..LossConfig::default() };
        assert!(total_loss(&img, &img, &bad, &good, &cfg).is_err());
        assert!(total_loss(&img, &img, &good, &bad, &cfg).is_err());
        let small = Image2D::zeros(9, 10);
        assert!(total_loss(&img, &small, &good, &good, &cfg).is_err());
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let mut r = rng(9);
        // Smooth intensity structure keeps the finite-difference
        // comparison well conditioned.
        let fixed = gaussian_blur(&random_image(&mut r, 12, 12), 1.2).unwrap();
        let moving = gaussian_blur(&random_image(&mut r, 12, 12), 1.2).unwrap();
        // Warp offsets stay strictly inside interpolation cells so that
        // no finite-difference probe crosses a bilinear kink.
        let mut phi = VectorField2D::zeros(12, 12);
        let mut u = VectorField2D::zeros(12, 12);
        for y in 0..12 {
            for x in 0..12 {
                let sx = if r.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
                let sy = if r.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
                phi.set(
                    x,
                    y,
                    sx * r.random_range(0.15..0.35),
                    sy * r.random_range(0.15..0.35),
                );
                u.set(x, y, r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
            }
        }
        let cfg = LossConfig { lncc_window: 5, ..LossConfig::default() };
        let fixed_c = fixed.clone();
        let moving_c = moving.clone();
        let report = grad_check(
            move |t, ids| {
                let f = t.constant(fixed_c.clone());
                let m = t.constant(moving_c.clone());
                trace_total_loss(t, f, m, ids[0], ids[1], &cfg)
            },
            &[Payload::Vector(phi), Payload::Vector(u)],
            1e-4,
            10,
        )
        .unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "max rel {} at input {} coord {} (adjoint {}, numeric {})",
            report.max_rel_error,
            report.worst_input,
            report.worst_coord,
            report.analytic,
            report.numeric
        );
    }
}
