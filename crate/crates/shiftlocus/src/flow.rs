//! Gradient flowlines of the Green's function, and the numeric leaves
//! traced out by ascending from (pre)critical points.
//!
//! The gradient of g = q^{−n}·log|f^n| comes from the chain rule:
//! ∇g(z) = conj(q^{−n}·(f^n)'(z)/f^n(z)) once the orbit has escaped.
//! Flowlines are integrated at unit speed in Green height, so the step
//! variable *is* h and step acceptance can test the height error directly.

use num_complex::Complex64;
use thiserror::Error;

use crate::poly::{NormalizedPolynomial, NumericLeaf, PolyError, DEFAULT_BUDGET, DEFAULT_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Ascending,
    Descending,
}

/// Adaptive step parameters.  `height_tol` is the per-step Green-height
/// error accepted; steps halve on rejection and double when comfortably
/// inside tolerance.
#[derive(Debug, Clone, Copy)]
pub struct StepControl {
    pub height_tol: f64,
    pub min_step: f64,
    pub max_step: f64,
    pub max_steps: usize,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            height_tol: 1e-9,
            min_step: 1e-17,
            max_step: 0.5,
            max_steps: 40_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("start point does not escape")]
    NoEscape,
    #[error("stop height {stop} outside (0, {max})")]
    BadStopHeight { stop: f64, max: f64 },
    #[error("adaptive step collapsed at height {height}")]
    StepCollapse { height: f64 },
    #[error("seeds resolved {got} tip angles, wanted {want}")]
    AngleResolutionFailure { want: usize, got: usize },
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// Why a trace stopped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Termination {
    ReachedHeight,
    /// Descending trace ran into a vanishing gradient: a critical point
    /// of g sits at (or extremely near) `point`.
    CriticalHit { point: Complex64, height: f64 },
}

#[derive(Debug, Clone)]
pub struct Flowline {
    pub points: Vec<Complex64>,
    pub heights: Vec<f64>,
    pub termination: Termination,
}

/// |∇g| below this on a descending trace counts as hitting a critical
/// point.
const GRAD_FLOOR: f64 = 1e-7;

/// g and ∇g together, or None while the orbit has not escaped.
fn green_and_gradient(
    f: &NormalizedPolynomial,
    z: Complex64,
    budget: usize,
) -> Option<(f64, Complex64)> {
    let r = f.escape_radius();
    let mut w = z;
    let mut deriv = Complex64::new(1.0, 0.0);
    let mut n = 0usize;
    while n < budget && w.norm() <= 1e12 {
        if !w.norm().is_finite() {
            return None;
        }
        deriv *= f.eval_derivative(w);
        w = f.eval(w);
        n += 1;
        if w.norm() > 1e12 {
            break;
        }
    }
    if w.norm() <= r {
        return None;
    }
    let scale = (f.q() as f64).powi(-(n as i32));
    let g = scale * w.norm().ln();
    let grad = (deriv / w).conj() * scale;
    Some((g, grad))
}

/// One RK4 step of the unit-speed field v = ±∇g/|∇g|².
fn rk4(
    f: &NormalizedPolynomial,
    z: Complex64,
    sign: f64,
    dh: f64,
    budget: usize,
) -> Option<Complex64> {
    let v = |p: Complex64| -> Option<Complex64> {
        let (_, grad) = green_and_gradient(f, p, budget)?;
        let n2 = grad.norm_sqr();
        if n2 == 0.0 {
            return None;
        }
        Some(grad * (sign / n2))
    };
    let k1 = v(z)?;
    let k2 = v(z + k1 * (dh / 2.0))?;
    let k3 = v(z + k2 * (dh / 2.0))?;
    let k4 = v(z + k3 * dh)?;
    Some(z + (k1 + (k2 + k3) * 2.0 + k4) * (dh / 6.0))
}

/// Core integrator; no stop-height cap so internal callers can climb in
/// one go.  Height along the output is monotone within `ctl.height_tol`.
fn integrate(
    f: &NormalizedPolynomial,
    start: Complex64,
    direction: Direction,
    stop_height: f64,
    ctl: &StepControl,
) -> Result<Flowline, FlowError> {
    let budget = DEFAULT_BUDGET;
    let (g0, grad0) = green_and_gradient(f, start, budget).ok_or(FlowError::NoEscape)?;
    let sign = match direction {
        Direction::Ascending => 1.0,
        Direction::Descending => -1.0,
    };
    let mut points = vec![start];
    let mut heights = vec![g0];
    let mut z = start;
    let mut g = g0;
    // open with a spatial displacement ~ 1e-6·(1+|z|); near a critical
    // point that means a tiny h-step, which the doubling rule then grows
    let mut step = (1e-6 * (1.0 + z.norm()) * grad0.norm())
        .clamp(ctl.min_step, ctl.max_step)
        .min((stop_height - g0).abs().max(ctl.min_step));

    for _ in 0..ctl.max_steps {
        if (g - stop_height).abs() <= ctl.height_tol {
            return Ok(Flowline {
                points,
                heights,
                termination: Termination::ReachedHeight,
            });
        }
        let (_, grad) = green_and_gradient(f, z, budget).ok_or(FlowError::NoEscape)?;
        if direction == Direction::Descending && grad.norm() < GRAD_FLOOR {
            return Ok(Flowline {
                points,
                heights,
                termination: Termination::CriticalHit { point: z, height: g },
            });
        }
        let remaining = (stop_height - g).abs();
        // cap the spatial excursion per step: |dz| ≈ dh/|∇g|, and letting
        // that grow unchecked hops straight over saddle points
        let spatial_cap = 0.2 * (1.0 + z.norm()) * grad.norm();
        let dh = step.min(remaining).min(spatial_cap);
        if dh < ctl.min_step {
            if direction == Direction::Descending && grad.norm() < 1e-5 {
                return Ok(Flowline {
                    points,
                    heights,
                    termination: Termination::CriticalHit { point: z, height: g },
                });
            }
            return Err(FlowError::StepCollapse { height: g });
        }
        let accepted = rk4(f, z, sign, dh, budget).and_then(|z_new| {
            let (g_new, _) = green_and_gradient(f, z_new, budget)?;
            let err = (g_new - (g + sign * dh)).abs();
            if err <= ctl.height_tol {
                Some((z_new, g_new, err))
            } else {
                None
            }
        });
        match accepted {
            Some((z_new, g_new, err)) => {
                z = z_new;
                g = g_new;
                points.push(z);
                heights.push(g);
                if err < ctl.height_tol / 4.0 {
                    step = (step * 2.0).min(ctl.max_step);
                }
            }
            None => {
                step /= 2.0;
                if step < ctl.min_step {
                    if direction == Direction::Descending {
                        let (_, grad) =
                            green_and_gradient(f, z, budget).ok_or(FlowError::NoEscape)?;
                        if grad.norm() < 1e-5 {
                            return Ok(Flowline {
                                points,
                                heights,
                                termination: Termination::CriticalHit { point: z, height: g },
                            });
                        }
                    }
                    return Err(FlowError::StepCollapse { height: g });
                }
            }
        }
    }
    Err(FlowError::StepCollapse { height: g })
}

/// Traces the flowline of ±∇g from `start` until Green height
/// `stop_height`.  Descending traces that run into a critical point stop
/// early and say so in the termination.
pub fn trace_flowline(
    f: &NormalizedPolynomial,
    start: Complex64,
    direction: Direction,
    stop_height: f64,
    ctl: &StepControl,
) -> Result<Flowline, FlowError> {
    let g = f.green_value(start, DEFAULT_BUDGET, DEFAULT_TOL);
    if g.value <= 0.0 {
        return Err(FlowError::NoEscape);
    }
    let max = g.value * (f.q() * f.q()) as f64;
    if stop_height <= 0.0 || stop_height >= max {
        return Err(FlowError::BadStopHeight {
            stop: stop_height,
            max,
        });
    }
    integrate(f, start, direction, stop_height, ctl)
}

/// Ascends from `z` to Green height `top` and reads the external angle
/// there.
fn ascend_to_angle(
    f: &NormalizedPolynomial,
    z: Complex64,
    top: f64,
    ctl: &StepControl,
) -> Result<f64, FlowError> {
    let line = integrate(f, z, Direction::Ascending, top, ctl)?;
    let end = *line.points.last().expect("flowline has points");
    let b = f.bottcher(end, DEFAULT_BUDGET, DEFAULT_TOL)?;
    Ok(b.theta)
}

/// Angles within one limiting cluster land far tighter than this, and
/// distinct tip angles of the leaves we trace sit far wider apart.
const CLUSTER_GAP: f64 = 5e-3;

/// Circular k-means-free clustering: sort, cut at the k widest gaps,
/// average each arc.  Returns k representatives sorted ascending.
fn cluster_angles(mut thetas: Vec<f64>, k: usize) -> Vec<f64> {
    thetas.sort_by(|a, b| a.partial_cmp(b).expect("finite angles"));
    let n = thetas.len();
    let mut gaps: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let next = thetas[(i + 1) % n] + if i + 1 == n { 1.0 } else { 0.0 };
            (next - thetas[i], i)
        })
        .collect();
    gaps.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite gaps"));
    let mut cuts: Vec<usize> = gaps.iter().take(k).map(|&(_, i)| i).collect();
    cuts.sort_unstable();
    let mut reps = Vec::with_capacity(k);
    for w in 0..k {
        let lo = (cuts[(w + k - 1) % k] + 1) % n;
        let hi = cuts[w];
        // members lo..=hi cyclically; average relative to the first
        let base = thetas[lo];
        let mut sum = 0.0;
        let mut count = 0.0;
        let mut i = lo;
        loop {
            let rel = (thetas[i] - base + 0.5).rem_euclid(1.0) - 0.5;
            sum += rel;
            count += 1.0;
            if i == hi {
                break;
            }
            i = (i + 1) % n;
        }
        reps.push((base + sum / count).rem_euclid(1.0));
    }
    reps.sort_by(|a, b| a.partial_cmp(b).expect("finite angles"));
    reps
}

/// The numeric leaf of an escaping critical point `c`: its Green height
/// together with the external angles of the m+1 ascending flowlines.
///
/// Seeds ascend from 8·(m+1) points on a circle of radius
/// 10³·√ε·(1+|c|) around c; their limiting angles cluster into the m+1
/// tips.
pub fn critical_leaf(
    f: &NormalizedPolynomial,
    c: Complex64,
    tol: f64,
) -> Result<NumericLeaf, FlowError> {
    let crits = f.critical_points(DEFAULT_TOL)?;
    let m = crits
        .iter()
        .min_by(|a, b| {
            (a.z - c)
                .norm()
                .partial_cmp(&(b.z - c).norm())
                .expect("finite")
        })
        .map(|cp| cp.multiplicity)
        .unwrap_or(1);
    leaf_at(f, c, m, tol)
}

/// Shared by critical and precritical points: `m` + 1 tips expected.
///
/// The limiting angles are grouped at every circular gap wider than
/// [`CLUSTER_GAP`].  Exactly `m + 1` groups is the clean case.  More
/// groups means some tip rides a flowline chain into a higher critical
/// point of g and the ascents also resolve that point's tips; all group
/// means are then kept as candidates and the leaf is marked collided.
fn leaf_at(
    f: &NormalizedPolynomial,
    c: Complex64,
    m: usize,
    tol: f64,
) -> Result<NumericLeaf, FlowError> {
    let g = f.green_value(c, DEFAULT_BUDGET, tol.max(1e-15));
    if g.value <= 0.0 {
        return Err(FlowError::NoEscape);
    }
    let gmax = f.max_critical_height(DEFAULT_BUDGET, DEFAULT_TOL)?;
    let top = f.q() as f64 * gmax + 1.0;
    let ctl = StepControl::default();
    let seeds = 8 * (m + 1);
    let radius = 1e3 * f64::EPSILON.sqrt() * (1.0 + c.norm());
    let mut thetas = Vec::with_capacity(seeds);
    for k in 0..seeds {
        let angle = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / seeds as f64;
        let seed = c + Complex64::from_polar(radius, angle);
        thetas.push(ascend_to_angle(f, seed, top, &ctl)?);
    }
    thetas.sort_by(|a, b| a.partial_cmp(b).expect("finite angles"));
    let n = thetas.len();
    let groups = (0..n)
        .filter(|&i| {
            let next = thetas[(i + 1) % n] + if i + 1 == n { 1.0 } else { 0.0 };
            next - thetas[i] > CLUSTER_GAP
        })
        .count();
    if groups < m + 1 {
        return Err(FlowError::AngleResolutionFailure {
            want: m + 1,
            got: groups,
        });
    }
    let tips = cluster_angles(thetas, groups);
    Ok(NumericLeaf::from_candidates(g.value, tips, m))
}

/// Numeric elamination of f down to preimage depth `depth`: the critical
/// leaves (depth 0) plus, at each deeper level, one leaf per solution of
/// f^k(w) = critical point, with heights g(c)/q^k.
///
/// Depth-k points come from iterated root finding of f(z) = w; the tips
/// of their leaves are read from ascending flowlines exactly as at the
/// critical points themselves.
pub fn numeric_elamination(
    f: &NormalizedPolynomial,
    depth: usize,
    tol: f64,
) -> Result<Vec<NumericLeaf>, FlowError> {
    let crits = f.critical_points(DEFAULT_TOL)?;
    for cp in &crits {
        if f.green_value(cp.z, DEFAULT_BUDGET, DEFAULT_TOL).value <= 0.0 {
            return Err(FlowError::NoEscape);
        }
    }
    // (point, tips-1 of its leaf)
    let mut layer: Vec<(Complex64, usize)> =
        crits.iter().map(|cp| (cp.z, cp.multiplicity)).collect();
    let mut out = Vec::new();
    for cp in &layer {
        out.push(leaf_at(f, cp.0, cp.1, tol)?);
    }
    for _ in 0..depth {
        let mut next = Vec::with_capacity(layer.len() * f.q());
        for &(w, m) in &layer {
            // roots of f(z) − w, ascending coefficients
            let q = f.q();
            let mut coeffs = vec![Complex64::new(0.0, 0.0); q + 1];
            coeffs[q] = Complex64::new(1.0, 0.0);
            for (i, &a) in f.coeffs().iter().enumerate() {
                coeffs[q - 2 - i] = a;
            }
            coeffs[0] -= w;
            let pre = crate::roots::roots(&coeffs).map_err(PolyError::from)?;
            for z in pre {
                next.push((z, m));
            }
        }
        next.sort_by(|a, b| {
            (a.0.re, a.0.im)
                .partial_cmp(&(b.0.re, b.0.im))
                .expect("finite points")
        });
        for &(z, m) in &next {
            out.push(leaf_at(f, z, m, tol)?);
        }
        layer = next;
    }
    out.sort_by(|a, b| {
        (-a.height, a.tips.first().copied().unwrap_or(0.0))
            .partial_cmp(&(-b.height, b.tips.first().copied().unwrap_or(0.0)))
            .expect("finite leaves")
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn poly(q: usize, coeffs: &[f64]) -> NormalizedPolynomial {
        NormalizedPolynomial::new(q, coeffs.iter().map(|&x| c(x, 0.0)).collect()).unwrap()
    }

    #[test]
    fn radial_descent_on_power_map() {
        let f = poly(2, &[0.0]);
        let line = trace_flowline(
            &f,
            c(4.0, 0.0),
            Direction::Descending,
            2.0f64.ln(),
            &StepControl::default(),
        )
        .unwrap();
        assert_eq!(line.termination, Termination::ReachedHeight);
        let end = line.points.last().unwrap();
        assert!((end - c(2.0, 0.0)).norm() < 1e-6, "end {end}");
    }

    #[test]
    fn heights_monotone() {
        let f = poly(2, &[4.0]);
        let line = trace_flowline(
            &f,
            c(3.0, 1.0),
            Direction::Ascending,
            4.0,
            &StepControl::default(),
        )
        .unwrap();
        for w in line.heights.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
        assert!((line.heights.last().unwrap() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn descent_into_critical_point_reports_hit() {
        let f = poly(2, &[-3.0]);
        // the 1/4-ray is the positive imaginary axis and lands at the
        // critical point 0; descend straight down it
        let g0 = f.green_value(c(0.0, 0.0), DEFAULT_BUDGET, DEFAULT_TOL).value;
        let start = c(0.0, 2.5);
        let gs = f.green_value(start, DEFAULT_BUDGET, DEFAULT_TOL).value;
        assert!(gs > g0);
        let line = trace_flowline(
            &f,
            start,
            Direction::Descending,
            g0 / 64.0,
            &StepControl::default(),
        )
        .unwrap();
        match line.termination {
            Termination::CriticalHit { point, height } => {
                assert!((height - g0).abs() < 1e-5, "hit at {height}, g0 {g0}");
                assert!(point.norm() < 1e-3, "hit near {point}");
            }
            Termination::ReachedHeight => panic!("expected a critical hit"),
        }
    }

    #[test]
    fn critical_leaf_minus_three() {
        let f = poly(2, &[-3.0]);
        let leaf = critical_leaf(&f, c(0.0, 0.0), 1e-9).unwrap();
        assert_eq!(leaf.tips.len(), 2);
        assert!((leaf.tips[0] - 0.25).abs() < 1e-6, "tips {:?}", leaf.tips);
        assert!((leaf.tips[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn critical_leaf_plus_three() {
        let f = poly(2, &[3.0]);
        let leaf = critical_leaf(&f, c(0.0, 0.0), 1e-9).unwrap();
        assert_eq!(leaf.tips.len(), 2);
        assert!(leaf.tips[0] < 1e-6, "tips {:?}", leaf.tips);
        assert!((leaf.tips[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn cubic_triple_tips_equally_spaced() {
        let f = poly(3, &[0.0, 4.0]); // z³ + 4: critical 0 (multiplicity 2) escapes
        let leaf = critical_leaf(&f, c(0.0, 0.0), 1e-9).unwrap();
        assert_eq!(leaf.tips.len(), 3);
        let d1 = leaf.tips[1] - leaf.tips[0];
        let d2 = leaf.tips[2] - leaf.tips[1];
        assert!((d1 - 1.0 / 3.0).abs() < 1e-5, "tips {:?}", leaf.tips);
        assert!((d2 - 1.0 / 3.0).abs() < 1e-5);
    }

    #[test]
    fn depth_one_pullback_of_minus_three() {
        let f = poly(2, &[-3.0]);
        let leaves = numeric_elamination(&f, 1, 1e-9).unwrap();
        assert_eq!(leaves.len(), 3);
        assert!(leaves.iter().all(|l| !l.collided), "{leaves:?}");
        let g0 = leaves[0].height;
        assert!((leaves[1].height - g0 / 2.0).abs() < 1e-9);
        // depth-1 leaves are {3/8,5/8} at −√3 and {7/8,1/8} at +√3
        let mut found = [false, false];
        for leaf in &leaves[1..] {
            let t = &leaf.tips;
            if (t[0] - 0.375).abs() < 1e-6 && (t[1] - 0.625).abs() < 1e-6 {
                found[0] = true;
            }
            if (t[0] - 0.125).abs() < 1e-6 && (t[1] - 0.875).abs() < 1e-6 {
                found[1] = true;
            }
        }
        assert!(found[0] && found[1], "{leaves:?}");
    }

    #[test]
    fn depth_one_collided_leaves_for_plus_three() {
        // the 0-ray is fixed under doubling and descends through the
        // critical point into both of its preimages: ascents from there
        // shadow the critical leaf's tips besides finding their own
        let f = poly(2, &[3.0]);
        let leaves = numeric_elamination(&f, 1, 1e-9).unwrap();
        assert_eq!(leaves.len(), 3);
        assert!(!leaves[0].collided);
        let near = |leaf: &NumericLeaf, x: f64| {
            leaf.tips.iter().any(|t| {
                let d = (t - x).abs();
                d.min(1.0 - d) < 1e-6
            })
        };
        for leaf in &leaves[1..] {
            assert!(leaf.collided, "{leaf:?}");
            assert_eq!(leaf.multiplicity, 1);
            assert!(leaf.tips.len() > 2, "{:?}", leaf.tips);
        }
        // free tips: 1/4 lands at i*sqrt(3), 3/4 at its conjugate
        assert!(leaves[1..].iter().any(|l| near(l, 0.25)), "{leaves:?}");
        assert!(leaves[1..].iter().any(|l| near(l, 0.75)), "{leaves:?}");
    }

    #[test]
    fn leaf_counts_double_with_depth() {
        let f = poly(2, &[4.0]);
        let leaves = numeric_elamination(&f, 2, 1e-9).unwrap();
        assert_eq!(leaves.len(), 1 + 2 + 4);
        let g0 = leaves[0].height;
        let at = |h: f64| {
            leaves
                .iter()
                .filter(|l| (l.height - h).abs() < 1e-8)
                .count()
        };
        assert_eq!(at(g0), 1);
        assert_eq!(at(g0 / 2.0), 2);
        assert_eq!(at(g0 / 4.0), 4);
    }

    #[test]
    fn real_coefficients_give_symmetric_tips() {
        let f = poly(2, &[-3.0]);
        let leaves = numeric_elamination(&f, 1, 1e-9).unwrap();
        for leaf in &leaves {
            for t in &leaf.tips {
                let mirrored = (1.0 - t).rem_euclid(1.0);
                let ok = leaf
                    .tips
                    .iter()
                    .any(|u| ((u - mirrored).abs()).min(1.0 - (u - mirrored).abs()) < 1e-6);
                assert!(ok, "mirror of {t} missing in {:?}", leaf.tips);
            }
        }
    }
}
