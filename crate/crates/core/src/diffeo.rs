//! Diffeomorphic integration of displacement fields.
//!
//! The registration pipeline treats the predicted displacement as a
//! stationary velocity and integrates it by scaling and squaring:
//! the velocity is divided by `2^steps` and the resulting small
//! displacement is composed with itself `steps` times. For smooth,
//! moderate-magnitude velocities this yields an invertible map;
//! [`jacobian_det`] provides the standard diagnostic.

use crate::grid::{bilinear_sample_field, spatial_gradient, Image2D, VectorField2D};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Number of squarings used by default.
pub const DEFAULT_INTEGRATION_STEPS: usize = 7;

/// Scaling-and-squaring configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegrationConfig {
    /// Number of self-compositions; the velocity is pre-scaled by `2^-steps`.
    pub steps: usize,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_INTEGRATION_STEPS }
    }
}

impl IntegrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps > 63 {
            return Err(Error::validation(format!(
                "integration steps must be <= 63, got {}",
                self.steps
            )));
        }
        Ok(())
    }
}

/// Composition of displacement fields: `out(x) = inner(x) + outer(x + inner(x))`,
/// with `outer` sampled bilinearly and clamped to the image edge.
///
/// Reading both fields as maps `phi(x) = x + u(x)`, this returns the
/// displacement of `phi_outer ∘ phi_inner`.
pub fn compose(inner: &VectorField2D, outer: &VectorField2D) -> Result<VectorField2D> {
    if !inner.same_shape(outer) {
        return Err(Error::DimensionMismatch {
            context: "compose",
            left: format!("{}x{}", inner.width(), inner.height()),
            right: format!("{}x{}", outer.width(), outer.height()),
        });
    }
    let w = inner.width();
    let h = inner.height();
    let mut dx = vec![0.0; w * h];
    let mut dy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (ix, iy) = inner.get(x, y);
            let (ox, oy) = bilinear_sample_field(outer, x as f64 + ix, y as f64 + iy);
            dx[i] = ix + ox;
            dy[i] = iy + oy;
        }
    }
    Ok(VectorField2D::from_vecs_unchecked(w, h, dx, dy))
}

/// Integrates a stationary velocity field into a displacement field:
/// `u <- velocity / 2^steps`, then `u <- compose(u, u)` repeated `steps`
/// times. With `steps = 0` this returns the velocity unchanged.
pub fn scaling_squaring(
    velocity: &VectorField2D,
    cfg: &IntegrationConfig,
) -> Result<VectorField2D> {
    cfg.validate()?;
    if velocity
        .dx()
        .iter()
        .chain(velocity.dy())
        .any(|c| !c.is_finite())
    {
        return Err(Error::NonFinite("velocity field".into()));
    }
    let scale = 1.0 / (1u64 << cfg.steps) as f64;
    let w = velocity.width();
    let h = velocity.height();
    let dx: Vec<f64> = velocity.dx().iter().map(|c| c * scale).collect();
    let dy: Vec<f64> = velocity.dy().iter().map(|c| c * scale).collect();
    let mut u = VectorField2D::from_vecs_unchecked(w, h, dx, dy);
    for _ in 0..cfg.steps {
        u = compose(&u, &u)?;
    }
    Ok(u)
}

/// Records the scaling-and-squaring integration on a tape so gradients
/// flow back into the velocity. Arithmetic is identical to
/// [`scaling_squaring`]: the same pre-scale followed by the same
/// self-compositions.
pub fn trace_scaling_squaring(
    tape: &mut crate::adjoint::Tape,
    velocity: crate::adjoint::ValueId,
    cfg: &IntegrationConfig,
) -> Result<crate::adjoint::ValueId> {
    cfg.validate()?;
    let scale = 1.0 / (1u64 << cfg.steps) as f64;
    let mut u = tape.scale(velocity, scale)?;
    for _ in 0..cfg.steps {
        u = tape.compose(u, u)?;
    }
    Ok(u)
}

/// Determinant of `I + ∇u` per pixel, using central differences
/// (one-sided at the borders). Values near 1 indicate a locally
/// volume-preserving map; nonpositive values indicate folding.
pub fn jacobian_det(phi: &VectorField2D) -> Result<Image2D> {
    let (dxdx, dxdy) = spatial_gradient(&phi.dx_image())?;
    let (dydx, dydy) = spatial_gradient(&phi.dy_image())?;
    let w = phi.width();
    let h = phi.height();
    let mut det = vec![0.0; w * h];
    for (i, d) in det.iter_mut().enumerate() {
        let x = i % w;
        let y = i / w;
        *d = (1.0 + dxdx.get(x, y)) * (1.0 + dydy.get(x, y))
            - dxdy.get(x, y) * dydx.get(x, y);
    }
    Ok(Image2D::from_vec_unchecked(w, h, det))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::gaussian_blur_field;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_field(w: usize, h: usize, cx: f64, cy: f64) -> VectorField2D {
        let mut u = VectorField2D::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                u.set(x, y, cx, cy);
            }
        }
        u
    }

    /// Smooth random field: blurred white noise rescaled to a target
    /// maximum magnitude.
    fn smooth_field(w: usize, h: usize, sigma: f64, max_mag: f64, seed: u64) -> VectorField2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = VectorField2D::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                u.set(
                    x,
                    y,
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
            }
        }
        let u = gaussian_blur_field(&u, sigma).unwrap();
        let peak = u.max_magnitude().max(1e-12);
        let s = max_mag / peak;
        let dx: Vec<f64> = u.dx().iter().map(|c| c * s).collect();
        let dy: Vec<f64> = u.dy().iter().map(|c| c * s).collect();
        VectorField2D::from_vecs_unchecked(w, h, dx, dy)
    }

    #[test]
    fn compose_identity_on_either_side() {
        let f = smooth_field(12, 10, 2.0, 3.0, 1);
        let zero = VectorField2D::zeros(12, 10);
        let left = compose(&zero, &f).unwrap();
        let right = compose(&f, &zero).unwrap();
        for y in 0..10 {
            for x in 0..12 {
                let (ax, ay) = left.get(x, y);
                let (bx, by) = f.get(x, y);
                assert!((ax - bx).abs() < 1e-12 && (ay - by).abs() < 1e-12);
                assert_eq!(right.get(x, y), f.get(x, y));
            }
        }
    }

    #[test]
    fn compose_constant_fields_add_in_the_interior() {
        let c = (1.5, -0.5);
        let f = constant_field(16, 16, c.0, c.1);
        let out = compose(&f, &f).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let sx = x as f64 + c.0;
                let sy = y as f64 + c.1;
                let (ox, oy) = out.get(x, y);
                if sx >= 0.0 && sx <= 15.0 && sy >= 0.0 && sy <= 15.0 {
                    assert!((ox - 2.0 * c.0).abs() < 1e-12, "at ({x},{y}): {ox}");
                    assert!((oy - 2.0 * c.1).abs() < 1e-12);
                } else {
                    // Clamped sample still returns the constant vector.
                    assert!((ox - 2.0 * c.0).abs() < 1e-12);
                    assert!((oy - 2.0 * c.1).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn compose_rejects_mismatched_shapes() {
        let a = VectorField2D::zeros(4, 4);
        let b = VectorField2D::zeros(5, 4);
        assert!(compose(&a, &b).is_err());
    }

    #[test]
    fn integrate_zero_velocity_is_identity() {
        let v = VectorField2D::zeros(9, 7);
        let phi = scaling_squaring(&v, &IntegrationConfig::default()).unwrap();
        assert!(phi.max_magnitude() == 0.0);
    }

    #[test]
    fn integrate_constant_velocity_is_exact_translation() {
        let c = (1.25, -0.75);
        let v = constant_field(20, 20, c.0, c.1);
        let phi = scaling_squaring(&v, &IntegrationConfig::default()).unwrap();
        // Stay far enough from the border that no intermediate sample clamps:
        // intermediate displacements never exceed |c|.
        for y in 3..17 {
            for x in 3..17 {
                let (px, py) = phi.get(x, y);
                assert!((px - c.0).abs() < 1e-12, "at ({x},{y}): {px}");
                assert!((py - c.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn integrate_rejects_non_finite_velocity() {
        let mut v = VectorField2D::zeros(4, 4);
        v.set(1, 1, f64::NAN, 0.0);
        assert!(scaling_squaring(&v, &IntegrationConfig::default()).is_err());
    }

    /// Explicit Euler integration of `dX/dt = v(X)` with `n` substeps,
    /// returned as a displacement field.
    fn euler_flow(v: &VectorField2D, n: usize) -> VectorField2D {
        let w = v.width();
        let h = v.height();
        let step = 1.0 / n as f64;
        let mut out = VectorField2D::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut px = x as f64;
                let mut py = y as f64;
                for _ in 0..n {
                    let (vx, vy) = bilinear_sample_field(v, px, py);
                    px += vx * step;
                    py += vy * step;
                }
                out.set(x, y, px - x as f64, py - y as f64);
            }
        }
        out
    }

    #[test]
    fn integration_matches_euler_flow() {
        let v = smooth_field(64, 64, 6.0, 4.0, 7);
        let cfg = IntegrationConfig::default();
        let phi = scaling_squaring(&v, &cfg).unwrap();
        let oracle = euler_flow(&v, 1 << cfg.steps);
        let mut total = 0.0;
        let mut count = 0usize;
        for y in 0..64 {
            for x in 0..64 {
                let (ax, ay) = phi.get(x, y);
                let (bx, by) = oracle.get(x, y);
                total += (ax - bx).hypot(ay - by);
                count += 1;
            }
        }
        let mean = total / count as f64;
        assert!(mean < 0.05, "mean endpoint difference {mean}");
    }

    #[test]
    fn jacobian_of_identity_is_one() {
        let det = jacobian_det(&VectorField2D::zeros(8, 8)).unwrap();
        for &d in det.data() {
            assert!((d - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_of_affine_field_is_analytic() {
        // u = A x with A = diag(0.1, -0.2): det(I + A) = 1.1 * 0.8.
        let u = VectorField2D::from_channels(
            &Image2D::from_fn(12, 12, |x, _| 0.1 * x as f64),
            &Image2D::from_fn(12, 12, |_, y| -0.2 * y as f64),
        )
        .unwrap();
        let det = jacobian_det(&u).unwrap();
        for y in 1..11 {
            for x in 1..11 {
                assert!((det.get(x, y) - 0.88).abs() < 1e-12, "at ({x},{y})");
            }
        }
    }

    #[test]
    fn jacobian_matches_independent_stencil() {
        let u = smooth_field(16, 12, 2.0, 1.5, 11);
        let det = jacobian_det(&u).unwrap();
        let (dxdx, dxdy) = spatial_gradient(&u.dx_image()).unwrap();
        let (dydx, dydy) = spatial_gradient(&u.dy_image()).unwrap();
        for y in 0..12 {
            for x in 0..16 {
                let expect = (1.0 + dxdx.get(x, y)) * (1.0 + dydy.get(x, y))
                    - dxdy.get(x, y) * dydx.get(x, y);
                assert!((det.get(x, y) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn forward_and_backward_integration_cancel() {
        for seed in [3u64, 4, 5] {
            let v = smooth_field(48, 48, 5.0, 4.0, seed);
            let neg = {
                let dx: Vec<f64> = v.dx().iter().map(|c| -c).collect();
                let dy: Vec<f64> = v.dy().iter().map(|c| -c).collect();
                VectorField2D::from_vecs_unchecked(48, 48, dx, dy)
            };
            let cfg = IntegrationConfig::default();
            let fwd = scaling_squaring(&v, &cfg).unwrap();
            let bwd = scaling_squaring(&neg, &cfg).unwrap();
            let round = compose(&fwd, &bwd).unwrap();
            // Borders are excluded: clamped sampling is not invertible there.
            let margin = 6;
            let mut total = 0.0;
            let mut count = 0usize;
            for y in margin..48 - margin {
                for x in margin..48 - margin {
                    let (rx, ry) = round.get(x, y);
                    total += rx.hypot(ry);
                    count += 1;
                }
            }
            let mean = total / count as f64;
            assert!(mean < 0.1, "seed {seed}: mean residual {mean}");
        }
    }

    #[test]
    fn integration_of_mild_velocity_never_folds() {
        for seed in [21u64, 22, 23, 24, 25] {
            let v = smooth_field(40, 40, 3.0, 3.0, seed);
            // Rescale so the largest entry of the velocity Jacobian is 0.45.
            let (dxdx, dxdy) = spatial_gradient(&v.dx_image()).unwrap();
            let (dydx, dydy) = spatial_gradient(&v.dy_image()).unwrap();
            let gmax = dxdx
                .data()
                .iter()
                .chain(dxdy.data())
                .chain(dydx.data())
                .chain(dydy.data())
                .fold(0.0f64, |a, &b| a.max(b.abs()))
                .max(1e-12);
            let s = 0.45 / gmax;
            let dx: Vec<f64> = v.dx().iter().map(|c| c * s).collect();
            let dy: Vec<f64> = v.dy().iter().map(|c| c * s).collect();
            let v = VectorField2D::from_vecs_unchecked(40, 40, dx, dy);
            let phi = scaling_squaring(&v, &IntegrationConfig::default()).unwrap();
            let det = jacobian_det(&phi).unwrap();
            for y in 1..39 {
                for x in 1..39 {
                    assert!(
                        det.get(x, y) > 0.0,
                        "seed {seed}: fold at ({x},{y}): {}",
                        det.get(x, y)
                    );
                }
            }
        }
    }

    /// Group property of the integrator: integrating the half velocity
    /// with one squaring fewer and then self-composing reproduces the
    /// full integration — the self-composition IS the final squaring,
    /// and halving is exact in binary floating point.
    #[test]
    fn halving_the_velocity_and_squaring_once_more_agrees() {
        let v = smooth_field(32, 32, 4.0, 4.0, 9);
        let cfg = IntegrationConfig::default();
        let whole = scaling_squaring(&v, &cfg).unwrap();
        let half = {
            let dx: Vec<f64> = v.dx().iter().map(|c| 0.5 * c).collect();
            let dy: Vec<f64> = v.dy().iter().map(|c| 0.5 * c).collect();
            VectorField2D::from_vecs_unchecked(32, 32, dx, dy)
        };
        let half_phi = scaling_squaring(&half, &IntegrationConfig { steps: cfg.steps - 1 }).unwrap();
        let doubled = compose(&half_phi, &half_phi).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let (ax, ay) = whole.get(x, y);
                let (bx, by) = doubled.get(x, y);
                assert!(
                    (ax - bx).abs() < 1e-6 && (ay - by).abs() < 1e-6,
                    "at ({x},{y}): ({ax},{ay}) vs ({bx},{by})"
                );
            }
        }
    }

    #[test]
    fn traced_integration_matches_untraced_bitwise() {
        let v = smooth_field(24, 20, 3.0, 2.0, 11);
        let cfg = IntegrationConfig { steps: 5 };
        let plain = scaling_squaring(&v, &cfg).unwrap();
        let mut tape = crate::adjoint::Tape::new();
        let vid = tape.input(v);
        let phi = trace_scaling_squaring(&mut tape, vid, &cfg).unwrap();
        let traced = tape.value(phi).as_vector().unwrap();
        assert!(traced
            .dx()
            .iter()
            .zip(plain.dx())
            .chain(traced.dy().iter().zip(plain.dy()))
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn integration_gradient_matches_finite_differences() {
        use crate::adjoint::{grad_check, Payload};
        // Modest magnitude keeps all sample points interior and away
        // from bilinear kinks during the probe.
        let v = smooth_field(12, 12, 3.0, 1.0, 13);
        let cfg = IntegrationConfig { steps: 4 };
        let report = grad_check(
            move |t, ids| {
                let phi = trace_scaling_squaring(t, ids[0], &cfg)?;
                let sq = t.square(phi)?;
                t.mean(sq)
            },
            &[Payload::Vector(v)],
            1e-4,
            14,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "max rel {}", report.max_rel_error);
    }
}
