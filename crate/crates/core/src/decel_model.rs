//! Polynomial deceleration model.
//!
//! A deceleration profile of width `t_d` is `a_p(θ) = r·α·θ·(1 − θ^p)²` with
//! `θ = t/t_d`. The exponent `p` fixes where the peak sits and how much
//! distance the manoeuvre covers; `r` normalises the peak to `α`; `q` and `s`
//! are the speed and distance integrals of the unit shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rescaling factors outside this band mark a discretised curve as ill-formed.
pub const NORMALIZATION_BAND: (f64, f64) = (0.9, 1.1);

/// Exclusive range of `s/q` reachable for `p ∈ (−½, 0) ∪ (0, ∞)`.
pub const PHI_RANGE: (f64, f64) = (1.0 / 3.0, 0.8);

const PHI_AT_ZERO: f64 = 19.0 / 27.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub p: f64,
    pub r: f64,
    pub q: f64,
    pub s: f64,
    pub phi: f64,
    pub theta_m: f64,
    /// Peak deceleration, m/s² (zero until scaled with [`ShapeParams::scaled`]).
    pub alpha: f64,
    /// Average deceleration, m/s².
    pub a_bar: f64,
}

fn check_p(p: f64) -> Result<()> {
    if !(p > -0.5) || p == 0.0 || !p.is_finite() {
        return Err(Error::Domain(format!("p = {p}")));
    }
    Ok(())
}

/// `φ = s/q` as a rational function of `p`.
pub fn phi_of_p(p: f64) -> Result<f64> {
    check_p(p)?;
    Ok((2.0 * p * p + 15.0 * p + 19.0) / (3.0 * (p + 3.0) * (2.0 * p + 3.0)))
}

/// Inverse of [`phi_of_p`]. Clearing denominators leaves the quadratic
/// `(2 − 6φ)p² + (15 − 27φ)p + (19 − 27φ) = 0`.
pub fn p_from_phi(phi: f64) -> Result<f64> {
    if !(phi > PHI_RANGE.0 && phi < PHI_RANGE.1) || (phi - PHI_AT_ZERO).abs() < 1e-13 {
        return Err(Error::InfeasibleShape(format!(
            "phi = {phi} outside achievable range ({:.6}, {})",
            PHI_RANGE.0, PHI_RANGE.1
        )));
    }
    let a = 2.0 - 6.0 * phi;
    let b = 15.0 - 27.0 * phi;
    let c = 19.0 - 27.0 * phi;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Err(Error::InfeasibleShape(format!("phi = {phi}: no real root")));
    }
    let sq = disc.sqrt();
    // numerically stable pair of roots
    let t = -0.5 * (b + b.signum() * sq);
    let mut roots = Vec::with_capacity(2);
    if a.abs() > 1e-300 {
        roots.push(t / a);
    }
    if t.abs() > 1e-300 {
        roots.push(c / t);
    }
    let valid: Vec<f64> = roots
        .into_iter()
        .filter(|&p| p > -0.5 && p != 0.0 && p.is_finite())
        .collect();
    let mut p = match (
        valid
            .iter()
            .cloned()
            .filter(|&p| p > 0.0)
            .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x)))),
        valid.first(),
    ) {
        (Some(pos), _) => pos,
        (None, Some(&neg)) => neg,
        (None, None) => return Err(Error::InfeasibleShape(format!("phi = {phi}: no root with p > -0.5"))),
    };
    // one Newton polish on the rational form
    for _ in 0..2 {
        let f = phi_of_p(p)? - phi;
        let h = 1e-7 * p.abs().max(1e-3);
        let df = (phi_of_p(p + h)? - phi_of_p(p - h)?) / (2.0 * h);
        if df != 0.0 && df.is_finite() {
            let next = p - f / df;
            if next > -0.5 && next != 0.0 {
                p = next;
            }
        }
    }
    Ok(p)
}

impl ShapeParams {
    pub fn from_p(p: f64) -> Result<Self> {
        check_p(p)?;
        // stationary point of θ(1 − θ^p)²: θ_M^p = 1/(2p + 1) on both branches
        let tmp = 1.0 / (2.0 * p + 1.0);
        let theta_m = tmp.powf(1.0 / p);
        let r = 1.0 / (theta_m * (1.0 - tmp).powi(2));
        let q = p * p / ((2.0 * p + 2.0) * (p + 2.0));
        // 1/6 − 2/((p+2)(p+3)) + 1/((2p+2)(2p+3)) with the p² factor pulled out
        let s = p * p * (2.0 * p * p + 15.0 * p + 19.0) / (6.0 * (p + 1.0) * (p + 2.0) * (p + 3.0) * (2.0 * p + 3.0));
        Ok(ShapeParams {
            p,
            r,
            q,
            s,
            phi: phi_of_p(p)?,
            theta_m,
            alpha: 0.0,
            a_bar: 0.0,
        })
    }

    /// Scales the unit shape to a speed change over `t_d` seconds.
    pub fn scaled(mut self, v_i: f64, v_f: f64, t_d: f64) -> Self {
        self.a_bar = (v_f - v_i) / t_d;
        self.alpha = self.a_bar / (self.r * self.q);
        self
    }

    /// Unit shape `r·θ·(1 − θ^p)²`, zero outside `[0, 1]`.
    pub fn unit(&self, theta: f64) -> f64 {
        if !(0.0..=1.0).contains(&theta) || theta == 0.0 {
            return 0.0;
        }
        self.r * theta * (1.0 - theta.powf(self.p)).powi(2)
    }

    /// Continuous deceleration `a_p(t)` for `t ∈ [0, t_d]`.
    pub fn accel(&self, t: f64, t_d: f64) -> f64 {
        self.alpha * self.unit(t / t_d)
    }

    /// Closed-form speed `v(t)` of the continuous model.
    pub fn speed(&self, v_i: f64, t: f64, t_d: f64) -> f64 {
        let th = (t / t_d).clamp(0.0, 1.0);
        let tp = th.powf(self.p);
        v_i + t_d * self.r * self.alpha * th * th * (0.5 - 2.0 * tp / (self.p + 2.0) + tp * tp / (2.0 * self.p + 2.0))
    }

    /// Distance covered over the whole manoeuvre.
    pub fn distance(&self, v_i: f64, t_d: f64) -> f64 {
        v_i * t_d + t_d * t_d * self.r * self.alpha * self.s
    }
}

/// Average-speed ratio `(x/t_d − v_f)/(v_i − v_f)` of a manoeuvre.
pub fn observed_speed_ratio(v_i: f64, v_f: f64, t_d: f64, distance: f64) -> f64 {
    (distance / t_d - v_f) / (v_i - v_f)
}

/// Picks the exponent whose continuous profile covers `distance` while
/// decelerating from `v_i` to `v_f` in `t_d`.
///
/// The shape's average-speed ratio is `1 − s/q`, so the lookup goes through
/// [`p_from_phi`] on the complement.
pub fn shape_for_distance(v_i: f64, v_f: f64, t_d: f64, distance: f64) -> Result<ShapeParams> {
    let ratio = observed_speed_ratio(v_i, v_f, t_d, distance);
    let p = p_from_phi(1.0 - ratio)?;
    Ok(ShapeParams::from_p(p)?.scaled(v_i, v_f, t_d))
}

/// Discretised forward (`a_p`) and mirrored (`a_pl`) profiles for one
/// deceleration time, each normalised to the requested speed change.
#[derive(Debug, Clone, PartialEq)]
pub struct DecelShape {
    pub shape: ShapeParams,
    pub n_total: usize,
    pub n_d: usize,
    pub dt: f64,
    pub forward: Vec<f64>,
    pub mirrored: Vec<f64>,
    pub forward_scale: f64,
    pub mirrored_scale: f64,
}

fn normalization_scale(values: &[f64], target: f64, what: &str) -> Result<f64> {
    let sum: f64 = values.iter().sum();
    if target == 0.0 {
        return Ok(1.0);
    }
    if sum == 0.0 {
        return Err(Error::InfeasibleShape(format!("{what} curve integrates to zero")));
    }
    let k = target / sum;
    if !(NORMALIZATION_BAND.0..=NORMALIZATION_BAND.1).contains(&k) {
        return Err(Error::InfeasibleShape(format!(
            "{what} curve normalisation factor {k:.4} outside [{}, {}]",
            NORMALIZATION_BAND.0, NORMALIZATION_BAND.1
        )));
    }
    Ok(k)
}

impl DecelShape {
    /// `distance` is the distance the deceleration phase itself should cover
    /// and selects the exponent `p`.
    pub fn new(v_i: f64, v_f: f64, n_d: usize, n_total: usize, dt: f64, distance: f64) -> Result<Self> {
        if !(v_f >= 0.0 && v_f < v_i) {
            return Err(Error::InvalidParam(format!("need 0 <= v_f < v_i, got {v_f}, {v_i}")));
        }
        if n_d == 0 || n_total == 0 || !(dt > 0.0) {
            return Err(Error::InvalidParam("n_d, n_total, dt must be positive".into()));
        }
        let shape = shape_for_distance(v_i, v_f, n_d as f64 * dt, distance)?;
        Self::from_shape(v_i, v_f, n_d, n_total, dt, shape)
    }

    /// Same discretisation with the exponent given directly.
    pub fn with_p(v_i: f64, v_f: f64, n_d: usize, n_total: usize, dt: f64, p: f64) -> Result<Self> {
        if !(v_f >= 0.0 && v_f < v_i) {
            return Err(Error::InvalidParam(format!("need 0 <= v_f < v_i, got {v_f}, {v_i}")));
        }
        if n_d == 0 || n_total == 0 || !(dt > 0.0) {
            return Err(Error::InvalidParam("n_d, n_total, dt must be positive".into()));
        }
        let shape = ShapeParams::from_p(p)?.scaled(v_i, v_f, n_d as f64 * dt);
        Self::from_shape(v_i, v_f, n_d, n_total, dt, shape)
    }

    fn from_shape(v_i: f64, v_f: f64, n_d: usize, n_total: usize, dt: f64, shape: ShapeParams) -> Result<Self> {
        let nd = n_d as f64;
        let mut forward = Vec::with_capacity(n_total);
        let mut mirrored = Vec::with_capacity(n_total);
        for k in 0..n_total {
            let th = (k as f64 + 1.0) / nd;
            let th_l = (n_total - k) as f64 / nd;
            forward.push(shape.alpha * shape.unit(th));
            mirrored.push(shape.alpha * shape.unit(th_l));
        }
        let target = (v_f - v_i) / dt;
        let forward_scale = normalization_scale(&forward, target, "forward")?;
        let mirrored_scale = normalization_scale(&mirrored, target, "mirrored")?;
        forward.iter_mut().for_each(|x| *x *= forward_scale);
        mirrored.iter_mut().for_each(|x| *x *= mirrored_scale);
        Ok(DecelShape {
            shape,
            n_total,
            n_d,
            dt,
            forward,
            mirrored,
            forward_scale,
            mirrored_scale,
        })
    }

    /// Blended deceleration at step `k` with blend ratio `Δ = w·d/d_res`.
    pub fn blended(&self, k: usize, delta: f64) -> f64 {
        (1.0 - delta) * self.forward[k] + delta * self.mirrored[k]
    }
}

/// A full blended deceleration sequence, normalised to `Σ values·dt = v_f − v_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecelCurve {
    pub n_total: usize,
    pub n_d: usize,
    pub dt: f64,
    pub w: f64,
    pub d_res: f64,
    pub shape: ShapeParams,
    pub scale: f64,
    pub values: Vec<f64>,
}

/// Blends `a_p` and `a_pl` along the distance sequence `travelled` (the
/// distance covered at each step, `0..=d_res`) and normalises the sum.
#[allow(clippy::too_many_arguments)]
pub fn build_curve(
    v_i: f64,
    v_f: f64,
    n_d: usize,
    n_total: usize,
    dt: f64,
    d_res: f64,
    w: f64,
    travelled: &[f64],
) -> Result<DecelCurve> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidParam(format!("w = {w} outside [0, 1]")));
    }
    if n_d > n_total {
        return Err(Error::InvalidParam(format!("n_d = {n_d} > n_total = {n_total}")));
    }
    if travelled.len() != n_total {
        return Err(Error::Mismatch(format!(
            "distance sequence has {} entries, horizon is {n_total}",
            travelled.len()
        )));
    }
    if !(d_res > 0.0) || travelled.iter().any(|&d| d < 0.0 || d > d_res) {
        return Err(Error::InvalidParam("distances must lie in [0, d_res]".into()));
    }
    let base = DecelShape::new(v_i, v_f, n_d, n_total, dt, d_res)?;
    let mut values: Vec<f64> = (0..n_total)
        .map(|k| base.blended(k, w * travelled[k] / d_res))
        .collect();
    let scale = normalization_scale(&values, (v_f - v_i) / dt, "blended")?;
    values.iter_mut().for_each(|x| *x *= scale);
    Ok(DecelCurve {
        n_total,
        n_d,
        dt,
        w,
        d_res,
        shape: base.shape,
        scale,
        values,
    })
}

impl DecelCurve {
    /// Most negative value of the curve.
    pub fn peak(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::min)
    }
}

/// True when `curve`'s peak deceleration lies between the peaks of the
/// curves built from the shortest and longest admissible deceleration times.
pub fn curve_bounds(curve_min: &DecelCurve, curve: &DecelCurve, curve_max: &DecelCurve) -> Result<bool> {
    if curve_min.n_total != curve.n_total
        || curve_max.n_total != curve.n_total
        || curve_min.dt != curve.dt
        || curve_max.dt != curve.dt
    {
        return Err(Error::Mismatch("curves must share horizon and time step".into()));
    }
    let tol = 1e-12;
    Ok(curve_min.peak() <= curve.peak() + tol && curve.peak() <= curve_max.peak() + tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn phi_plug_in() {
        assert_relative_eq!(phi_of_p(1.0).unwrap(), 0.6, epsilon = 1e-15);
        assert_relative_eq!(phi_of_p(2.0).unwrap(), 57.0 / 105.0, epsilon = 1e-15);
        assert!((phi_of_p(1e9).unwrap() - 1.0 / 3.0).abs() < 1e-8);
        assert!(phi_of_p(0.0).is_err());
        assert!(phi_of_p(-0.5).is_err());
    }

    #[test]
    fn phi_inverse() {
        assert_relative_eq!(p_from_phi(0.6).unwrap(), 1.0, epsilon = 1e-10);
        assert_relative_eq!(p_from_phi(57.0 / 105.0).unwrap(), 2.0, epsilon = 1e-10);
        assert!(p_from_phi(0.3).is_err());
        assert!(p_from_phi(0.9).is_err());
        // negative branch
        let p = p_from_phi(0.75).unwrap();
        assert!(p < 0.0 && p > -0.5);
        assert!((phi_of_p(p).unwrap() - 0.75).abs() < 1e-10);
    }

    #[test]
    fn p1_fixed_point() {
        let s = ShapeParams::from_p(1.0).unwrap();
        assert_relative_eq!(s.theta_m, 1.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(s.r, 6.75, epsilon = 1e-12);
        assert_relative_eq!(s.q, 1.0 / 12.0, epsilon = 1e-15);
        assert_relative_eq!(s.s, 1.0 / 20.0, epsilon = 1e-15);
        assert_relative_eq!(ShapeParams::from_p(2.0).unwrap().q, 1.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn stationary_point_on_negative_branch() {
        let s = ShapeParams::from_p(-0.25).unwrap();
        let h = 1e-6;
        let d = (s.unit(s.theta_m + h) - s.unit(s.theta_m - h)) / (2.0 * h);
        assert!(d.abs() < 1e-5, "slope at theta_M = {d}");
        assert_relative_eq!(s.unit(s.theta_m), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn curve_endpoints_vanish() {
        let s = ShapeParams::from_p(1.7).unwrap();
        assert_eq!(s.unit(0.0), 0.0);
        assert!(s.unit(1.0).abs() < 1e-15);
    }

    #[test]
    fn w_zero_is_forward_shape() {
        let d = vec![0.0; 20];
        let c = build_curve(20.0, 0.0, 20, 20, 1.0, 220.0, 0.0, &d).unwrap();
        let base = DecelShape::new(20.0, 0.0, 20, 20, 1.0, 220.0).unwrap();
        for (a, b) in c.values.iter().zip(&base.forward) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12);
        }
        let sum: f64 = c.values.iter().sum();
        assert_relative_eq!(sum, -20.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_outside_both_windows() {
        let d = vec![0.0; 30];
        let c = build_curve(15.0, 0.0, 10, 30, 0.5, 45.0, 0.0, &d).unwrap();
        for k in 10..20 {
            assert_eq!(c.values[k], 0.0);
        }
        assert!(c.values.iter().all(|&a| a <= 0.0));
    }

    #[test]
    fn mirrored_is_index_reversal() {
        let s = DecelShape::new(15.0, 0.0, 12, 20, 0.5, 40.0).unwrap();
        let f = s.forward_scale;
        let m = s.mirrored_scale;
        for k in 0..20 {
            let j = 20 - 1 - k;
            assert_relative_eq!(s.mirrored[k] / m, s.forward[j] / f, epsilon = 1e-12);
        }
    }

    #[test]
    fn bad_inputs() {
        let d = vec![0.0; 5];
        assert!(build_curve(10.0, 12.0, 5, 5, 1.0, 30.0, 0.0, &d).is_err());
        assert!(build_curve(10.0, 0.0, 6, 5, 1.0, 30.0, 0.0, &d).is_err());
        assert!(build_curve(10.0, 0.0, 5, 5, 1.0, 30.0, 1.5, &d).is_err());
        // too short a distance for any shape
        assert!(matches!(
            build_curve(10.0, 0.0, 5, 5, 1.0, 1.0, 0.0, &d),
            Err(Error::InfeasibleShape(_))
        ));
        // two-sample curve cannot be normalised within the band
        let d2 = vec![0.0; 2];
        assert!(build_curve(10.0, 0.0, 2, 2, 1.0, 9.0, 0.0, &d2).is_err());
    }

    #[test]
    fn bounds_check() {
        let n = 40;
        let d = vec![0.0; n];
        let mk = |nd| build_curve(15.0, 0.0, nd, n, 0.5, 90.0, 0.0, &d).unwrap();
        let (lo, mid, hi) = (mk(24), mk(30), mk(40));
        assert!(curve_bounds(&lo, &lo, &hi).unwrap());
        assert!(curve_bounds(&lo, &mid, &hi).unwrap());
        let outside = mk(20);
        assert!(!curve_bounds(&mid, &outside, &hi).unwrap());
        let other = build_curve(15.0, 0.0, 10, 10, 0.5, 40.0, 0.0, &[0.0; 10]).unwrap();
        assert!(curve_bounds(&lo, &other, &hi).is_err());
    }

    #[test]
    fn wider_curves_are_smoother() {
        let n = 40;
        let d = vec![0.0; n];
        let mut last = f64::NEG_INFINITY;
        for nd in 24..=40 {
            let c = build_curve(15.0, 0.0, nd, n, 0.5, 90.0, 0.0, &d).unwrap();
            assert!(c.peak() > last, "nd = {nd}");
            last = c.peak();
        }
    }

    proptest! {
        #[test]
        fn peak_identity(p in 0.01f64..10.0) {
            let s = ShapeParams::from_p(p).unwrap();
            prop_assert!((s.r * s.theta_m * (1.0 - s.theta_m.powf(p)).powi(2) - 1.0).abs() < 1e-12);
            prop_assert!((s.phi - s.s / s.q).abs() < 1e-12);
            prop_assert!(s.theta_m > 0.0 && s.theta_m < 1.0);
        }

        #[test]
        fn phi_round_trip(p in 0.001f64..10.0) {
            let back = p_from_phi(phi_of_p(p).unwrap()).unwrap();
            prop_assert!((back - p).abs() < 1e-9 * p.max(1.0), "{} vs {}", back, p);
        }

        #[test]
        fn phi_decreasing(p in 0.01f64..20.0, dp in 0.01f64..5.0) {
            prop_assert!(phi_of_p(p + dp).unwrap() < phi_of_p(p).unwrap());
        }
    }
}
