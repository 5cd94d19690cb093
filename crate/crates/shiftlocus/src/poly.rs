//! Monic centered polynomials and the numeric side of the basin of
//! infinity: escape detection, Green's function, Böttcher coordinates.
//!
//! Everything here is plain f64 numerics.  Exact combinatorics live in
//! [`crate::elam`]; the two meet in [`crate::bridge`].

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::roots::{self, RootFindingFailure};

/// Default iteration budget for orbit-based routines.
pub const DEFAULT_BUDGET: usize = 1000;
/// Default numeric tolerance.
pub const DEFAULT_TOL: f64 = 1e-12;

/// Hard cap on |orbit| during refinement; beyond this every remaining
/// correction to g or θ is far below machine resolution.
const ORBIT_CAP: f64 = 1e100;

#[derive(Debug, Error)]
pub enum PolyError {
    #[error("degree {q} needs exactly {} coefficients a₂..a_q, got {got}", q - 1)]
    BadShape { q: usize, got: usize },
    #[error(transparent)]
    RootFinding(#[from] RootFindingFailure),
    #[error("point is not above every critical Green height; Böttcher coordinate unreliable")]
    UnreliableCoordinate,
    #[error("bad polynomial JSON: {0}")]
    Json(String),
}

/// f(z) = z^q + a₂z^{q−2} + … + a_q.  The z^{q−1} term is normalized away,
/// so `coeffs` holds exactly q−1 entries a₂..a_q.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedPolynomial {
    q: usize,
    coeffs: Vec<Complex64>,
}

/// A critical point of f with its multiplicity as a root of f'.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalPoint {
    pub z: Complex64,
    pub multiplicity: usize,
}

/// Result of a Green's function evaluation.  `value` is 0 exactly when the
/// orbit stayed bounded within budget (reported, not proved).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreenEvaluation {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Böttcher coordinate of an escaping point: h = log|φ(z)|,
/// theta = arg φ(z) in turns, in [0,1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BottcherCoordinate {
    pub h: f64,
    pub theta: f64,
}

/// Per-critical-point escape record inside a [`ShiftLocusVerdict`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalRecord {
    pub point: Complex64,
    pub multiplicity: usize,
    pub escaped: bool,
    /// Green height, present when the point escaped.
    pub height: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocusStatus {
    Inside,
    Outside,
    Undecided,
}

/// Verdict of the all-critical-points-escape test.
#[derive(Debug, Clone)]
pub struct ShiftLocusVerdict {
    pub status: LocusStatus,
    pub records: Vec<CriticalRecord>,
}

/// A numerically computed leaf: an escaping critical (or precritical)
/// point seen through its external angles.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericLeaf {
    pub height: f64,
    /// Tip angles in turns, sorted ascending in [0,1). A collided leaf
    /// carries every observed limiting angle, more than multiplicity + 1.
    pub tips: Vec<f64>,
    pub multiplicity: usize,
    /// Some tip sits on a flowline chain through a higher critical point
    /// of g, so the ascent split into extra angle clusters.
    pub collided: bool,
}

#[derive(Serialize, Deserialize)]
struct PolyJson {
    q: usize,
    coeffs: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct LeafJson {
    height: f64,
    tips: Vec<f64>,
    #[serde(default)]
    multiplicity: Option<usize>,
    #[serde(default)]
    collided: bool,
}

impl NormalizedPolynomial {
    pub fn new(q: usize, coeffs: Vec<Complex64>) -> Result<Self, PolyError> {
        if q < 2 || coeffs.len() != q - 1 {
            return Err(PolyError::BadShape {
                q,
                got: coeffs.len(),
            });
        }
        Ok(Self { q, coeffs })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// a₂..a_q.
    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn eval(&self, z: Complex64) -> Complex64 {
        // Horner over z^q + 0·z^{q−1} + a₂z^{q−2} + … + a_q
        let mut w = Complex64::new(1.0, 0.0);
        w = w * z; // through the missing z^{q−1} term
        for &a in &self.coeffs {
            w = w * z + a;
        }
        w
    }

    /// f'(z).
    pub fn eval_derivative(&self, z: Complex64) -> Complex64 {
        let q = self.q as f64;
        let mut w = Complex64::new(q, 0.0);
        // derivative coefficients descending: q, 0, (q−2)a₂, …, 2a_{q−2}, a_{q−1}
        w = w * z;
        for (i, &a) in self.coeffs.iter().enumerate() {
            let power = self.q - 2 - i; // exponent of z on a_i's term in f
            if power == 0 {
                break; // a_q is constant in f, gone in f'
            }
            w = w * z + a * power as f64;
        }
        w
    }

    /// Escape radius R with |z| > R ⇒ |f(z)| ≥ 2|z|: R = max(2, 2Σ|aᵢ|).
    pub fn escape_radius(&self) -> f64 {
        let s: f64 = self.coeffs.iter().map(|a| a.norm()).sum();
        (2.0 * s).max(2.0)
    }

    /// Roots of f' with multiplicities from cluster analysis, sorted by
    /// (re, im).  Multiplicities sum to q−1.
    pub fn critical_points(&self, tol: f64) -> Result<Vec<CriticalPoint>, PolyError> {
        // f' ascending: coefficient of z^j
        let mut dc = vec![Complex64::new(0.0, 0.0); self.q];
        dc[self.q - 1] = Complex64::new(self.q as f64, 0.0);
        for (i, &a) in self.coeffs.iter().enumerate() {
            let power = self.q - 2 - i;
            if power > 0 {
                dc[power - 1] += a * power as f64;
            }
        }
        let raw = roots::roots(&dc)?;
        let clustered = roots::cluster(&raw, tol);
        debug_assert_eq!(
            clustered.iter().map(|c| c.1).sum::<usize>(),
            self.q - 1,
            "multiplicities account for every root of f'"
        );
        Ok(clustered
            .into_iter()
            .map(|(z, multiplicity)| CriticalPoint { z, multiplicity })
            .collect())
    }

    /// Green's function of the basin of infinity at z.
    ///
    /// Iterates until the orbit passes the escape radius, then refines
    /// g = q^{−n}·log|f^n(z)| until successive estimates differ by < tol.
    pub fn green_value(&self, z: Complex64, budget: usize, tol: f64) -> GreenEvaluation {
        let r = self.escape_radius();
        let mut w = z;
        let mut n = 0usize;
        while n < budget && w.norm() <= r {
            w = self.eval(w);
            n += 1;
        }
        if w.norm() <= r {
            return GreenEvaluation {
                value: 0.0,
                converged: false,
                iterations: n,
            };
        }
        let qf = self.q as f64;
        let mut scale = qf.powi(-(n as i32));
        let mut est = scale * w.norm().ln();
        let mut converged = false;
        while n < budget {
            let next = self.eval(w);
            if !next.norm().is_finite() || next.norm() > ORBIT_CAP {
                // remaining corrections are ≤ q^{−n}·Σ|aᵢ|/|w|, zero at
                // this magnitude
                converged = true;
                break;
            }
            w = next;
            n += 1;
            scale /= qf;
            let new_est = scale * w.norm().ln();
            let diff = (new_est - est).abs();
            est = new_est;
            if diff < tol {
                converged = true;
                break;
            }
        }
        GreenEvaluation {
            value: est,
            converged,
            iterations: n,
        }
    }

    /// Böttcher coordinate (h, θ) of an escaping z above all critical
    /// Green heights.  θ comes from continuously unwinding the argument
    /// along the orbit: each iterate's argument is lifted to the branch
    /// nearest q times the previous lift.
    pub fn bottcher(
        &self,
        z: Complex64,
        budget: usize,
        tol: f64,
    ) -> Result<BottcherCoordinate, PolyError> {
        let g = self.green_value(z, budget, tol);
        if g.value <= 0.0 {
            return Err(PolyError::UnreliableCoordinate);
        }
        let crits = self.critical_points(DEFAULT_TOL)?;
        for c in &crits {
            let gc = self.green_value(c.z, budget, tol);
            if g.value <= gc.value {
                return Err(PolyError::UnreliableCoordinate);
            }
        }

        let tau = 2.0 * std::f64::consts::PI;
        let qf = self.q as f64;
        let mut w = z;
        let mut lift = w.arg();
        let mut scale = 1.0;
        let mut theta = lift / tau;
        for _ in 0..budget {
            let next = self.eval(w);
            if !next.norm().is_finite() || next.norm() > ORBIT_CAP {
                break;
            }
            w = next;
            let target = qf * lift;
            let t = w.arg();
            lift = t + tau * ((target - t) / tau).round();
            scale /= qf;
            let new_theta = scale * lift / tau;
            let diff = (new_theta - theta).abs();
            theta = new_theta;
            if w.norm() > self.escape_radius() && diff < tol {
                break;
            }
        }
        Ok(BottcherCoordinate {
            h: g.value,
            theta: theta.rem_euclid(1.0),
        })
    }

    /// Tests whether every critical point escapes.  A critical orbit that
    /// revisits (within 1e-10 relative) a recent iterate without escaping
    /// is certified bounded; anything else within budget is undecided.
    pub fn is_in_shift_locus(&self, budget: usize) -> ShiftLocusVerdict {
        let crits = match self.critical_points(DEFAULT_TOL) {
            Ok(c) => c,
            Err(_) => {
                return ShiftLocusVerdict {
                    status: LocusStatus::Undecided,
                    records: Vec::new(),
                }
            }
        };
        let r = self.escape_radius();
        let mut records = Vec::with_capacity(crits.len());
        let mut any_bounded = false;
        let mut all_escaped = true;
        for c in &crits {
            let mut w = c.z;
            let mut escaped = false;
            let mut bounded = false;
            let mut recent: Vec<Complex64> = Vec::with_capacity(16);
            for _ in 0..budget {
                if w.norm() > r {
                    escaped = true;
                    break;
                }
                if recent
                    .iter()
                    .any(|p| (w - p).norm() < 1e-10 * (1.0 + w.norm()))
                {
                    bounded = true;
                    break;
                }
                if recent.len() == 16 {
                    recent.remove(0);
                }
                recent.push(w);
                w = self.eval(w);
            }
            if w.norm() > r {
                escaped = true;
            }
            let height = if escaped {
                Some(self.green_value(c.z, budget, DEFAULT_TOL).value)
            } else {
                None
            };
            any_bounded |= bounded;
            all_escaped &= escaped;
            records.push(CriticalRecord {
                point: c.z,
                multiplicity: c.multiplicity,
                escaped,
                height,
            });
        }
        let status = if all_escaped {
            LocusStatus::Inside
        } else if any_bounded {
            LocusStatus::Outside
        } else {
            LocusStatus::Undecided
        };
        ShiftLocusVerdict { status, records }
    }

    /// Largest Green height among the critical points.
    pub fn max_critical_height(&self, budget: usize, tol: f64) -> Result<f64, PolyError> {
        let crits = self.critical_points(DEFAULT_TOL)?;
        Ok(crits
            .iter()
            .map(|c| self.green_value(c.z, budget, tol).value)
            .fold(0.0, f64::max))
    }

    pub fn from_json(s: &str) -> Result<Self, PolyError> {
        let j: PolyJson = serde_json::from_str(s).map_err(|e| PolyError::Json(e.to_string()))?;
        Self::new(
            j.q,
            j.coeffs
                .iter()
                .map(|&[re, im]| Complex64::new(re, im))
                .collect(),
        )
    }

    pub fn to_json(&self) -> String {
        let j = PolyJson {
            q: self.q,
            coeffs: self.coeffs.iter().map(|a| [a.re, a.im]).collect(),
        };
        serde_json::to_string(&j).expect("polynomial JSON serializes")
    }
}

impl NumericLeaf {
    /// `tips` in turns; sorted into [0,1) here.
    pub fn new(height: f64, mut tips: Vec<f64>) -> Self {
        for t in &mut tips {
            *t = t.rem_euclid(1.0);
        }
        tips.sort_by(|a, b| a.partial_cmp(b).expect("finite tip angles"));
        let multiplicity = tips.len().saturating_sub(1);
        Self {
            height,
            tips,
            multiplicity,
            collided: false,
        }
    }

    /// A leaf whose ascent resolved more limiting angles than tips: the
    /// extra ones are shadows of critical points higher on a flowline
    /// chain. All candidates are kept; `multiplicity` stays that of the
    /// underlying point.
    pub fn from_candidates(height: f64, candidates: Vec<f64>, multiplicity: usize) -> Self {
        let collided = candidates.len() != multiplicity + 1;
        Self {
            collided,
            multiplicity,
            ..Self::new(height, candidates)
        }
    }

    pub fn from_json(s: &str) -> Result<Self, PolyError> {
        let j: LeafJson = serde_json::from_str(s).map_err(|e| PolyError::Json(e.to_string()))?;
        let mult = j
            .multiplicity
            .unwrap_or_else(|| j.tips.len().saturating_sub(1));
        let mut leaf = Self::from_candidates(j.height, j.tips, mult);
        leaf.collided = j.collided;
        Ok(leaf)
    }

    pub fn to_json(&self) -> String {
        let j = LeafJson {
            height: self.height,
            tips: self.tips.clone(),
            multiplicity: Some(self.multiplicity),
            collided: self.collided,
        };
        serde_json::to_string(&j).expect("leaf JSON serializes")
    }
}
