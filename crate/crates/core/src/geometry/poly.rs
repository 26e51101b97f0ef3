use crate::error::{Error, Result};

/// Grid resolution used to verify monotonicity at construction.
const MONOTONE_SAMPLES: usize = 4096;

/// Radial fisheye model `r(θ) = a1 θ + a2 θ² + a3 θ³ + a4 θ⁴` (pixels), valid
/// for incidence angles in `[0, theta_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistortionPoly {
    coeffs: [f64; 4],
    theta_max: f64,
}

impl DistortionPoly {
    /// Fails unless `dr/dθ > 0` on a fine grid over `[0, theta_max]`.
    pub fn new(coeffs: [f64; 4], theta_max: f64) -> Result<Self> {
        if !(theta_max > 0.0) || !theta_max.is_finite() || coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid(
                "distortion_poly",
                format!("bad coefficients {coeffs:?} / theta_max {theta_max}"),
            ));
        }
        let poly = DistortionPoly { coeffs, theta_max };
        for i in 0..=MONOTONE_SAMPLES {
            let t = theta_max * i as f64 / MONOTONE_SAMPLES as f64;
            let d = poly.derivative(t);
            if !(d > 0.0) {
                return Err(Error::invalid(
                    "distortion_poly",
                    format!("r(θ) not increasing: dr/dθ = {d} at θ = {t}"),
                ));
            }
        }
        Ok(poly)
    }

    pub fn equidistant(focal: f64, theta_max: f64) -> Result<Self> {
        Self::new([focal, 0.0, 0.0, 0.0], theta_max)
    }

    pub fn coeffs(&self) -> [f64; 4] {
        self.coeffs
    }

    pub fn theta_max(&self) -> f64 {
        self.theta_max
    }

    /// Polynomial value without the domain check.
    pub fn eval(&self, theta: f64) -> f64 {
        let [a1, a2, a3, a4] = self.coeffs;
        theta * (a1 + theta * (a2 + theta * (a3 + theta * a4)))
    }

    pub fn derivative(&self, theta: f64) -> f64 {
        let [a1, a2, a3, a4] = self.coeffs;
        a1 + theta * (2.0 * a2 + theta * (3.0 * a3 + theta * 4.0 * a4))
    }

    pub fn theta_to_radius(&self, theta: f64) -> Result<f64> {
        if !(0.0..=self.theta_max).contains(&theta) {
            return Err(Error::Domain {
                op: "theta_to_radius",
                value: theta,
                lo: 0.0,
                hi: self.theta_max,
            });
        }
        Ok(self.eval(theta))
    }

    /// Radius of the image circle, `r(theta_max)`.
    pub fn max_radius(&self) -> f64 {
        self.eval(self.theta_max)
    }

    /// Inverts the polynomial by bisection on `[0, theta_max]`.
    pub fn radius_to_theta(&self, r: f64) -> Result<f64> {
        let r_max = self.max_radius();
        if !(0.0..=r_max).contains(&r) {
            return Err(Error::Domain {
                op: "radius_to_theta",
                value: r,
                lo: 0.0,
                hi: r_max,
            });
        }
        if r == 0.0 {
            return Ok(0.0);
        }
        let (mut lo, mut hi) = (0.0, self.theta_max);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let f = self.eval(mid) - r;
            if f.abs() <= 1e-12 || mid == lo || mid == hi {
                return Ok(mid);
            }
            if f < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}
