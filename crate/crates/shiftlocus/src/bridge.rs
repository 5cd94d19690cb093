//! The bridge between floating-point and exact worlds: snap numeric
//! angles to rationals, then verify that a polynomial's numeric
//! elamination is the exact pullback of its snapped critical set.
//!
//! Heights are never snapped on their own.  Along an orbit the ratio of
//! a leaf's height to its critical leaf's height is exactly q^{−k}, so
//! heights are compared as such ratios; only the ratios *between*
//! distinct critical stacks get a rational stand-in.

use std::collections::BTreeMap;

use num_rational::Rational64;
use serde::Serialize;
use thiserror::Error;

use crate::angle::{Angle, Height};
use crate::elam::{build_dynamical, ElamError, Leaf};
use crate::flow::{numeric_elamination, FlowError};
use crate::poly::{LocusStatus, NormalizedPolynomial, NumericLeaf, DEFAULT_BUDGET, DEFAULT_TOL};

#[derive(Debug, Clone, Copy)]
pub struct SnapPolicy {
    pub max_denominator: i64,
    pub tolerance: f64,
}

impl SnapPolicy {
    pub fn new(max_denominator: i64, tolerance: f64) -> Self {
        assert!(max_denominator >= 1 && tolerance > 0.0);
        Self {
            max_denominator,
            tolerance,
        }
    }
}

impl Default for SnapPolicy {
    /// Denominators up to 3⁸·4 cover depth-8 angles for q ≤ 3.
    fn default() -> Self {
        Self::new(3i64.pow(8) * 4, 1e-8)
    }
}

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("no unambiguous rational with denominator ≤ {max_denominator} within {tolerance} of {x}")]
    SnapFailure {
        x: f64,
        max_denominator: i64,
        tolerance: f64,
    },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Elam(#[from] ElamError),
}

/// Best rational approximation to x with denominator ≤ max_den, via the
/// continued fraction with a clamped final quotient.
fn best_rational(x: f64, max_den: i64) -> (i64, i64) {
    let (mut p0, mut q0, mut p1, mut q1) = (1i64, 0i64, x.floor() as i64, 1i64);
    let mut frac = x - x.floor();
    while frac > 1e-15 {
        let r = 1.0 / frac;
        let a = r.floor() as i64;
        let (p2, q2) = (a * p1 + p0, a * q1 + q0);
        if q2 > max_den {
            // clamp: the best semiconvergent that still fits
            let t = (max_den - q0) / q1;
            let (ps, qs) = (t * p1 + p0, t * q1 + q0);
            let d1 = (x - p1 as f64 / q1 as f64).abs();
            let ds = (x - ps as f64 / qs as f64).abs();
            return if qs >= 1 && ds < d1 { (ps, qs) } else { (p1, q1) };
        }
        (p0, q0, p1, q1) = (p1, q1, p2, q2);
        frac = r - a as f64;
    }
    (p1, q1)
}

/// Snaps x ∈ [0,1) to the unique rational with denominator ≤ the policy
/// cap lying within tolerance.  Uniqueness is certified per result: an
/// error below 1/(2·d·D) leaves no room for a second candidate.
pub fn snap_angle(x: f64, policy: &SnapPolicy) -> Result<Angle, BridgeError> {
    let x = x.rem_euclid(1.0);
    let d = policy.max_denominator;
    let fail = BridgeError::SnapFailure {
        x,
        max_denominator: d,
        tolerance: policy.tolerance,
    };
    let (p, den) = best_rational(x, d);
    if den < 1 {
        return Err(fail);
    }
    let err = (x - p as f64 / den as f64).abs();
    let ambiguity = 1.0 / (2.0 * den as f64 * d as f64);
    if err > policy.tolerance || err > ambiguity {
        return Err(fail);
    }
    Ok(Angle::from_ratio(p, den))
}

/// One matched pair in a [`ConsistencyReport`].
#[derive(Debug, Clone, Serialize)]
pub struct MatchRecord {
    pub numeric_index: usize,
    pub exact_index: usize,
    /// largest circular distance between a raw tip and its snapped value
    pub angle_error: f64,
    /// |numeric height · q^k / critical height − 1| for the exact depth k
    pub height_ratio_error: f64,
    /// largest circular distance at which a shared tip of a degenerate
    /// exact leaf was witnessed among the numeric candidates; 0 when the
    /// match needed none
    pub witness_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyReport {
    pub consistent: bool,
    /// false when the polynomial was not verified inside the shift locus
    pub precondition_ok: bool,
    /// the exact pullback of the snapped critical set is a one-sided
    /// limit (some critical tip angle is periodic under q-tupling)
    pub degenerate: bool,
    pub matches: Vec<MatchRecord>,
    pub unmatched_numeric: Vec<usize>,
    pub unmatched_exact: Vec<usize>,
    pub max_angle_error: f64,
    pub max_height_ratio_error: f64,
}

impl ConsistencyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    fn precondition_violated() -> Self {
        ConsistencyReport {
            consistent: false,
            precondition_ok: false,
            degenerate: false,
            matches: Vec::new(),
            unmatched_numeric: Vec::new(),
            unmatched_exact: Vec::new(),
            max_angle_error: 0.0,
            max_height_ratio_error: 0.0,
        }
    }
}

/// Rational stand-ins for the distinct critical heights, top = 1, the
/// rest snapped from the numeric ratios with a modest denominator.
fn stack_heights(crit_heights: &[f64]) -> Result<Vec<Rational64>, BridgeError> {
    let top = crit_heights[0];
    let mut out = vec![Rational64::from_integer(1)];
    for &h in &crit_heights[1..] {
        let ratio = h / top;
        let mut chosen = None;
        for d in [729i64, 731, 733, 737, 739] {
            let (p, den) = best_rational(ratio, d);
            if den < 1 || p <= 0 {
                continue;
            }
            let r = Rational64::new(p, den);
            if (ratio - p as f64 / den as f64).abs() < 1e-3 && !out.contains(&r) {
                chosen = Some(r);
                break;
            }
        }
        out.push(chosen.ok_or(BridgeError::SnapFailure {
            x: ratio,
            max_denominator: 739,
            tolerance: 1e-3,
        })?);
    }
    Ok(out)
}

/// Circular distance between two angles in turns.
fn circ(x: f64, y: f64) -> f64 {
    let d = (x - y).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// How loosely a shared tip of a degenerate exact leaf may be witnessed:
/// the numeric shadow of a collided tip exits its saddle region at an
/// angle offset set by the seed radius, orders of magnitude inside this.
const WITNESS_TOL: f64 = 0.05;

/// Free tips (and strict matches generally) must agree this tightly.
const MATCH_TOL: f64 = 1e-6;

struct Matching {
    matches: Vec<MatchRecord>,
    unmatched_numeric: Vec<usize>,
    matched_exact: Vec<bool>,
    max_angle_error: f64,
    max_ratio_error: f64,
}

/// Generic case: numeric tips snap to exact rationals and leaves must
/// agree as exact tip sets.
fn match_strict(
    numeric: &[NumericLeaf],
    exact: &[Leaf],
    expected: &[Option<f64>],
    policy: &SnapPolicy,
) -> Result<Matching, BridgeError> {
    let mut by_tips: BTreeMap<Vec<Angle>, usize> = BTreeMap::new();
    for (i, leaf) in exact.iter().enumerate() {
        by_tips.insert(leaf.tips.clone(), i);
    }
    let mut m = Matching {
        matches: Vec::new(),
        unmatched_numeric: Vec::new(),
        matched_exact: vec![false; exact.len()],
        max_angle_error: 0.0,
        max_ratio_error: 0.0,
    };
    for (ni, leaf) in numeric.iter().enumerate() {
        if leaf.collided {
            // shadow angles have no exact counterpart here
            m.unmatched_numeric.push(ni);
            continue;
        }
        let mut tips = Vec::with_capacity(leaf.tips.len());
        let mut angle_error = 0.0f64;
        for &t in &leaf.tips {
            let a = snap_angle(t, policy)?;
            angle_error = angle_error.max(circ(t, a.as_f64()));
            tips.push(a);
        }
        tips.sort();
        let Some(&ei) = by_tips.get(&tips) else {
            m.unmatched_numeric.push(ni);
            continue;
        };
        m.matched_exact[ei] = true;
        let height_ratio_error = match expected[ei] {
            Some(e) => (leaf.height / e - 1.0).abs(),
            None => f64::INFINITY,
        };
        m.max_angle_error = m.max_angle_error.max(angle_error);
        m.max_ratio_error = m.max_ratio_error.max(height_ratio_error);
        m.matches.push(MatchRecord {
            numeric_index: ni,
            exact_index: ei,
            angle_error,
            height_ratio_error,
            witness_error: 0.0,
        });
    }
    Ok(m)
}

/// Degenerate case: leaves may share tip angles across heights and the
/// collided numeric leaves carry shadow angles, so snapped tip sets
/// cannot be compared.  A tip is *introduced* by the highest leaf using
/// its angle: the ray at that angle genuinely lands there, while deeper
/// re-users sit past the obstruction and only see a one-sided shadow of
/// it.  An exact leaf is matched to the numeric leaf at its height
/// holding all its introduced tips to [`MATCH_TOL`]; each inherited tip
/// must then be witnessed among that leaf's candidates to
/// [`WITNESS_TOL`].  A leaf with no introduced tips, or with several
/// numeric leaves fitting it, stays unmatched.
fn match_degenerate(
    numeric: &[NumericLeaf],
    exact: &[Leaf],
    expected: &[Option<f64>],
) -> Matching {
    let mut highest: BTreeMap<Angle, Height> = BTreeMap::new();
    for leaf in exact {
        for &t in &leaf.tips {
            let h = highest.entry(t).or_insert(leaf.height);
            *h = (*h).max(leaf.height);
        }
    }
    let mut m = Matching {
        matches: Vec::new(),
        unmatched_numeric: Vec::new(),
        matched_exact: vec![false; exact.len()],
        max_angle_error: 0.0,
        max_ratio_error: 0.0,
    };
    let mut numeric_used = vec![false; numeric.len()];
    for (ei, ex) in exact.iter().enumerate() {
        let free: Vec<f64> = ex
            .tips
            .iter()
            .filter(|t| highest[t] == ex.height)
            .map(|t| t.as_f64())
            .collect();
        let shared: Vec<f64> = ex
            .tips
            .iter()
            .filter(|t| highest[t] != ex.height)
            .map(|t| t.as_f64())
            .collect();
        let Some(eh) = expected[ei] else { continue };
        if free.is_empty() {
            continue; // nothing to match on; stays unmatched
        }
        let hits: Vec<usize> = (0..numeric.len())
            .filter(|&ni| {
                let nl = &numeric[ni];
                !numeric_used[ni]
                    && (nl.height / eh - 1.0).abs() < 1e-6
                    && free
                        .iter()
                        .all(|&ft| nl.tips.iter().any(|&t| circ(t, ft) < MATCH_TOL))
            })
            .collect();
        let [ni] = hits[..] else { continue };
        let nl = &numeric[ni];
        let witness_error = shared
            .iter()
            .map(|&st| {
                nl.tips
                    .iter()
                    .map(|&t| circ(t, st))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max);
        if witness_error > WITNESS_TOL {
            continue;
        }
        let angle_error = free
            .iter()
            .map(|&ft| {
                nl.tips
                    .iter()
                    .map(|&t| circ(t, ft))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max);
        numeric_used[ni] = true;
        m.matched_exact[ei] = true;
        let height_ratio_error = (nl.height / eh - 1.0).abs();
        m.max_angle_error = m.max_angle_error.max(angle_error);
        m.max_ratio_error = m.max_ratio_error.max(height_ratio_error);
        m.matches.push(MatchRecord {
            numeric_index: ni,
            exact_index: ei,
            angle_error,
            height_ratio_error,
            witness_error,
        });
    }
    m.unmatched_numeric = numeric_used
        .iter()
        .enumerate()
        .filter(|(_, &u)| !u)
        .map(|(i, _)| i)
        .collect();
    m
}

/// Checks that the numeric elamination of f agrees leaf-by-leaf with the
/// exact pullback of its snapped critical set.
///
/// Matching is by exact tip-set equality after snapping; heights are
/// compared as the exact q-power ratios the two sides independently
/// assign.  An f not verified inside the shift locus yields a report
/// with `precondition_ok = false` rather than an error.
///
/// When the exact pullback is degenerate (a critical tip angle is
/// periodic under q-tupling, so leaves share angles across heights), the
/// leafwise comparison switches to free-tip matching with loose
/// witnesses for the shared tips; see [`match_degenerate`].  The report
/// says which mode ran in its `degenerate` field.
pub fn consistency_check(
    f: &NormalizedPolynomial,
    depth: u32,
    policy: &SnapPolicy,
) -> Result<ConsistencyReport, BridgeError> {
    if f.is_in_shift_locus(DEFAULT_BUDGET).status != LocusStatus::Inside {
        return Ok(ConsistencyReport::precondition_violated());
    }
    let numeric = numeric_elamination(f, depth as usize, DEFAULT_TOL)?;

    // critical leaves = the distinct top heights among numeric leaves
    let mut crit_heights: Vec<f64> = Vec::new();
    let crits = f.critical_points(DEFAULT_TOL).map_err(FlowError::Poly)?;
    for c in &crits {
        let g = f.green_value(c.z, DEFAULT_BUDGET, DEFAULT_TOL).value;
        if !crit_heights.iter().any(|&h| (h - g).abs() < 1e-9) {
            crit_heights.push(g);
        }
    }
    crit_heights.sort_by(|a, b| b.partial_cmp(a).expect("finite heights"));
    let stacks = stack_heights(&crit_heights)?;

    // snap the numeric critical leaves (those at a critical height)
    let mut exact_criticals: Vec<Leaf> = Vec::new();
    for leaf in &numeric {
        let Some(s) = crit_heights
            .iter()
            .position(|&h| (leaf.height - h).abs() < 1e-9 * (1.0 + h))
        else {
            continue;
        };
        let mut tips = Vec::with_capacity(leaf.tips.len());
        for &t in &leaf.tips {
            tips.push(snap_angle(t, policy)?);
        }
        exact_criticals.push(
            Leaf::new(Height::new(stacks[s]), tips, 0, true).map_err(BridgeError::Elam)?,
        );
    }
    let exact = build_dynamical(f.q() as u32, &exact_criticals, depth)?;

    // expected numeric height of each exact leaf: the g-value of its
    // stack divided down by its depth
    let expected: Vec<Option<f64>> = exact
        .leaves
        .iter()
        .map(|ex| {
            crit_heights
                .iter()
                .zip(&stacks)
                .find(|(_, &r)| {
                    let mut h = Height::new(r);
                    for _ in 0..ex.depth {
                        h = h.div_q(f.q() as u32);
                    }
                    ex.height == h
                })
                .map(|(&g, _)| g / (f.q() as f64).powi(ex.depth as i32))
        })
        .collect();

    let m = if exact.degenerate {
        match_degenerate(&numeric, &exact.leaves, &expected)
    } else {
        match_strict(&numeric, &exact.leaves, &expected, policy)?
    };
    let unmatched_exact: Vec<usize> = m
        .matched_exact
        .iter()
        .enumerate()
        .filter(|(_, &x)| !x)
        .map(|(i, _)| i)
        .collect();
    let consistent = m.unmatched_numeric.is_empty()
        && unmatched_exact.is_empty()
        && m.max_ratio_error < 1e-6;
    Ok(ConsistencyReport {
        consistent,
        precondition_ok: true,
        degenerate: exact.degenerate,
        matches: m.matches,
        unmatched_numeric: m.unmatched_numeric,
        unmatched_exact,
        max_angle_error: m.max_angle_error,
        max_height_ratio_error: m.max_ratio_error,
    })
}
