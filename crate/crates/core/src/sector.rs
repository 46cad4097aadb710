//! Incremental sector bounds for sigmoid activation channels.
//!
//! A channel with slope lower bound `lambda` in `[0, 1)` satisfies the
//! incremental sector condition
//!
//! ```text
//! lambda <= (sigma(a) - sigma(b)) / (a - b) <= 1
//! ```
//!
//! for all pre-activations `a, b` inside the validity region
//! `|v| <= radius(lambda)`, where the radius is the largest magnitude at
//! which the derivative still meets the bound. For `tanh` the derivative is
//! `1 - tanh(v)^2`, giving the closed form `radius = atanh(sqrt(1 - lambda))`.
//! `lambda = 0` recovers the global sector with an infinite radius.

use nalgebra::DVector;

use crate::errors::{Error, Result};
use crate::model::Activation;

/// Upper cap applied when tightening slope bounds; keeps validity regions
/// from collapsing to a point.
pub const LAMBDA_CAP: f64 = 0.99;

/// Largest pre-activation magnitude on which the channel's incremental
/// slope stays at least `lambda`. Returns `f64::INFINITY` for
/// `lambda <= 0` and `0` for `lambda >= 1`.
pub fn sector_radius(act: Activation, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return f64::INFINITY;
    }
    if lambda >= 1.0 {
        return 0.0;
    }
    match act {
        // derivative(v) = 1 - tanh(v)^2 = lambda  =>  tanh(v) = sqrt(1-lambda)
        Activation::Tanh => (1.0 - lambda).sqrt().atanh(),
    }
}

/// Slope lower bound realized on `|v| <= v_bar`: the derivative at the
/// boundary (derivatives of supported activations decrease away from zero).
/// Clamped to `[0, 1)`; an infinite radius gives `0`.
pub fn lambda_from_radius(act: Activation, v_bar: f64) -> f64 {
    if !v_bar.is_finite() {
        return 0.0;
    }
    act.derivative(v_bar).clamp(0.0, 1.0 - f64::EPSILON)
}

/// Solve `derivative(v) = lambda` for `v >= 0` by bisection; independent of
/// the closed forms above and usable to validate new activation kinds.
pub fn sector_radius_bisection(act: Activation, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return f64::INFINITY;
    }
    if lambda >= 1.0 {
        return 0.0;
    }
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    while act.derivative(hi) > lambda {
        hi *= 2.0;
        if hi > 1e6 {
            return f64::INFINITY;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if act.derivative(mid) > lambda {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Per-channel slope lower bounds `Lambda = diag(lambda_1..lambda_nu)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorBound {
    /// Diagonal entries, each in `[0, 1)`.
    pub lambda: DVector<f64>,
}

impl SectorBound {
    /// Global sector (`lambda = 0` on every channel, infinite radii).
    pub fn global(nu: usize) -> Self {
        SectorBound {
            lambda: DVector::zeros(nu),
        }
    }

    /// Same bound on every channel.
    pub fn uniform(nu: usize, lambda: f64) -> Self {
        SectorBound {
            lambda: DVector::from_element(nu, lambda),
        }
    }

    /// Number of channels.
    pub fn nu(&self) -> usize {
        self.lambda.len()
    }

    /// Check every entry lies in `[0, 1)`.
    pub fn validate(&self) -> Result<()> {
        for (i, &l) in self.lambda.iter().enumerate() {
            if !(0.0..1.0).contains(&l) {
                return Err(Error::InvalidField {
                    path: format!("lambda[{i}]"),
                    message: format!("slope bound {l} outside [0, 1)"),
                });
            }
        }
        Ok(())
    }

    /// Per-channel validity radii (infinite where `lambda = 0`).
    pub fn radii(&self, activations: &[Activation]) -> DVector<f64> {
        DVector::from_iterator(
            self.nu(),
            self.lambda
                .iter()
                .zip(activations)
                .map(|(&l, &act)| sector_radius(act, l)),
        )
    }

    /// Tighten every channel by `eps`, capped at [`LAMBDA_CAP`].
    pub fn inflate(&self, eps: f64) -> SectorBound {
        SectorBound {
            lambda: self.lambda.map(|l| (l + eps).min(LAMBDA_CAP)),
        }
    }

    /// Whether a pre-activation vector lies in the validity region.
    pub fn contains(&self, v: &DVector<f64>, activations: &[Activation]) -> bool {
        let radii = self.radii(activations);
        v.iter().zip(radii.iter()).all(|(&vi, &ri)| vi.abs() <= ri)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// `(lambda, radius)` pairs for tanh, frozen from a 30-digit bisection
    /// on `1 - tanh(v)^2 = lambda`.
    const TANH_RADIUS_TABLE: [(f64, f64); 11] = [
        (0.1, 1.8184464592320668),
        (0.2, 1.4436354751788103),
        (0.3, 1.2099351213359459),
        (0.4, 1.0317185344477803),
        (0.5, 0.881373587019543),
        (0.6, 0.7454981544974042),
        (0.7, 0.6151220046560765),
        (0.75, 0.5493061443340548),
        (0.8, 0.48121182505960347),
        (0.9, 0.32745015023725844),
        (0.99, 0.10033534773107558),
    ];

    #[test]
    fn tanh_radius_matches_frozen_table() {
        for &(lambda, radius) in &TANH_RADIUS_TABLE {
            assert_abs_diff_eq!(
                sector_radius(Activation::Tanh, lambda),
                radius,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn radius_round_trips_through_derivative() {
        for &(lambda, _) in &TANH_RADIUS_TABLE {
            let r = sector_radius(Activation::Tanh, lambda);
            assert_abs_diff_eq!(
                lambda_from_radius(Activation::Tanh, r),
                lambda,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn bisection_agrees_with_closed_form() {
        for i in 1..20 {
            let lambda = i as f64 * 0.05;
            let closed = sector_radius(Activation::Tanh, lambda);
            let bisected = sector_radius_bisection(Activation::Tanh, lambda);
            assert_abs_diff_eq!(closed, bisected, epsilon = 1e-10);
        }
    }

    #[test]
    fn degenerate_bounds() {
        assert_eq!(sector_radius(Activation::Tanh, 0.0), f64::INFINITY);
        assert_eq!(sector_radius(Activation::Tanh, 1.0), 0.0);
        assert_eq!(lambda_from_radius(Activation::Tanh, f64::INFINITY), 0.0);
    }

    #[test]
    fn incremental_slope_holds_inside_region() {
        let lambda = 0.5;
        let r = sector_radius(Activation::Tanh, lambda);
        let grid: Vec<f64> = (0..40).map(|i| -r + 2.0 * r * (i as f64) / 39.0).collect();
        for &a in &grid {
            for &b in &grid {
                if (a - b).abs() < 1e-12 {
                    continue;
                }
                let slope = (a.tanh() - b.tanh()) / (a - b);
                assert!(slope >= lambda - 1e-12, "slope {slope} below {lambda}");
                assert!(slope <= 1.0 + 1e-12, "slope {slope} above 1");
            }
        }
        // Just outside the region the pointwise slope drops below the bound.
        let v = 1.5 * r;
        let local = (v + 1e-6).tanh() - (v - 1e-6).tanh();
        assert!(local / 2e-6 < lambda);
    }

    #[test]
    fn inflate_caps_at_limit() {
        let s = SectorBound::uniform(3, 0.97).inflate(0.05);
        for &l in s.lambda.iter() {
            assert_abs_diff_eq!(l, LAMBDA_CAP, epsilon = 1e-15);
        }
        let z = SectorBound::global(2).inflate(0.05);
        assert_abs_diff_eq!(z.lambda[0], 0.05, epsilon = 1e-15);
    }
}
