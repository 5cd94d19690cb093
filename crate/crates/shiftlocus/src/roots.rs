//! Simultaneous polynomial root finding.
//!
//! Aberth–Ehrlich iteration over all roots at once, with deterministic
//! seeded restarts when a start configuration stalls.  The degrees in this
//! crate are tiny (derivatives of degree ≤ 8 polynomials), so robustness
//! at multiple roots matters far more than speed; near-coincident roots
//! are collapsed afterwards by [`cluster`].

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
#[error("root finder did not converge (degree {degree}, {restarts} restarts)")]
pub struct RootFindingFailure {
    pub degree: usize,
    pub restarts: usize,
}

/// p(z) and p'(z) by Horner; `coeffs` ascending, constant term first.
fn eval_both(coeffs: &[Complex64], z: Complex64) -> (Complex64, Complex64) {
    let mut p = Complex64::new(0.0, 0.0);
    let mut dp = Complex64::new(0.0, 0.0);
    for &c in coeffs.iter().rev() {
        dp = dp * z + p;
        p = p * z + c;
    }
    (p, dp)
}

/// All complex roots of `coeffs[0] + coeffs[1]·z + …`, leading coefficient
/// nonzero.  Unordered, multiple roots appear as near-coincident clusters.
pub fn roots(coeffs: &[Complex64]) -> Result<Vec<Complex64>, RootFindingFailure> {
    let coeffs = trim(coeffs);
    let n = coeffs.len().saturating_sub(1);
    if n == 0 {
        return Ok(Vec::new());
    }
    let lead = coeffs[n];
    // Cauchy bound: all roots inside |z| ≤ 1 + max|c_i/c_n|.
    let bound = 1.0
        + coeffs[..n]
            .iter()
            .map(|c| (c / lead).norm())
            .fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    const RESTARTS: usize = 12;
    for attempt in 0..RESTARTS {
        let mut zs: Vec<Complex64> = (0..n)
            .map(|k| {
                let base = 2.0 * std::f64::consts::PI * (k as f64 + 0.37) / n as f64;
                let jitter = if attempt == 0 {
                    0.0
                } else {
                    rng.gen_range(-0.5..0.5)
                };
                let r = bound * (0.5 + 0.1 * attempt as f64 + 0.02 * k as f64);
                Complex64::from_polar(r, base + jitter)
            })
            .collect();

        if aberth(&coeffs, &mut zs) {
            return Ok(zs);
        }
    }
    Err(RootFindingFailure {
        degree: n,
        restarts: RESTARTS,
    })
}

fn trim(coeffs: &[Complex64]) -> Vec<Complex64> {
    let mut v = coeffs.to_vec();
    while v.len() > 1 && v.last().map_or(false, |c| c.norm() == 0.0) {
        v.pop();
    }
    v
}

fn eval_scale(coeffs: &[Complex64], z: Complex64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .map(|(i, c)| c.norm() * z.norm().max(1.0).powi(i as i32))
        .sum()
}

fn aberth(coeffs: &[Complex64], zs: &mut [Complex64]) -> bool {
    let n = zs.len();
    const MAX_ITER: usize = 400;
    for _ in 0..MAX_ITER {
        let mut done = true;
        for i in 0..n {
            let (p, dp) = eval_both(coeffs, zs[i]);
            // at the evaluation noise floor the correction is meaningless;
            // a k-fold root stalls here at distance ~ (n·ε·scale)^{1/k}
            let floor = 8.0 * n as f64 * f64::EPSILON * eval_scale(coeffs, zs[i]);
            if p.norm() <= floor {
                continue;
            }
            let newton = if dp.norm() == 0.0 {
                // sitting on a critical point of p: nudge off
                Complex64::new(1e-8, 1e-8)
            } else {
                p / dp
            };
            let mut repulsion = Complex64::new(0.0, 0.0);
            for j in 0..n {
                if j != i {
                    let d = zs[i] - zs[j];
                    if d.norm() < 1e-300 {
                        continue;
                    }
                    repulsion += d.inv();
                }
            }
            let denom = Complex64::new(1.0, 0.0) - newton * repulsion;
            let w = if denom.norm() < 1e-300 {
                newton
            } else {
                newton / denom
            };
            zs[i] -= w;
            if w.norm() > 1e-13 * (1.0 + zs[i].norm()) {
                done = false;
            }
        }
        if done {
            return residuals_ok(coeffs, zs);
        }
    }
    false
}

/// Accepts when every |p(root)| is small relative to the evaluation scale.
/// A k-fold root found to spacing δ leaves a residual ~ δ^k, so the bound
/// is loose on purpose.
fn residuals_ok(coeffs: &[Complex64], zs: &[Complex64]) -> bool {
    zs.iter().all(|&z| {
        let (p, _) = eval_both(coeffs, z);
        p.norm() <= 1e-8 * eval_scale(coeffs, z).max(1e-300)
    })
}

/// Collapses near-coincident roots into (centroid, multiplicity) pairs.
///
/// An m-fold root computed to tolerance tol scatters over a radius
/// ~ tol^{1/m}, so multiplicity hypotheses are tested top-down: link
/// points within tol^{1/m}·(1+|z|) and accept any component of size ≥ m
/// as one root.  Leftovers at the end are simple.  Output sorted by
/// (re, im).
pub fn cluster(roots: &[Complex64], tol: f64) -> Vec<(Complex64, usize)> {
    let mut remaining: Vec<Complex64> = roots.to_vec();
    let mut out: Vec<(Complex64, usize)> = Vec::new();
    for m in (2..=roots.len().max(1)).rev() {
        let radius = tol.powf(1.0 / m as f64);
        loop {
            let comps = link_components(&remaining, radius);
            let Some(comp) = comps.into_iter().find(|c| c.len() >= m) else {
                break;
            };
            let k = comp.len();
            let centroid = comp.iter().map(|&i| remaining[i]).sum::<Complex64>() / k as f64;
            let mut kill: Vec<usize> = comp;
            kill.sort_unstable_by(|a, b| b.cmp(a));
            for i in kill {
                remaining.remove(i);
            }
            out.push((centroid, k));
        }
    }
    out.extend(remaining.into_iter().map(|z| (z, 1)));
    out.sort_by(|a, b| {
        (a.0.re, a.0.im)
            .partial_cmp(&(b.0.re, b.0.im))
            .expect("finite root coordinates")
    });
    out
}

/// Single-linkage components at the given relative radius.
fn link_components(pts: &[Complex64], radius: f64) -> Vec<Vec<usize>> {
    let n = pts.len();
    let mut comp: Vec<usize> = (0..n).collect();
    fn find(comp: &mut Vec<usize>, i: usize) -> usize {
        if comp[i] != i {
            let root = find(comp, comp[i]);
            comp[i] = root;
        }
        comp[i]
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let scale = 1.0 + pts[i].norm().max(pts[j].norm());
            if (pts[i] - pts[j]).norm() <= radius * scale {
                let (a, b) = (find(&mut comp, i), find(&mut comp, j));
                comp[a] = b;
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let root = find(&mut comp, i);
        groups.entry(root).or_default().push(i);
    }
    groups.into_values().collect()
}
