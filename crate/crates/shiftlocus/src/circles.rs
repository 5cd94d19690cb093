//! Cut structure of a finite lamination on the circle.
//!
//! A set of pairwise unlinked leaves (each an ideal polygon with >= 2 tips)
//! cuts the circle into arcs and the disk into faces. Walking the boundary
//! of a face alternates arcs and polygon sides: after the arc arriving at a
//! tip `t` of leaf `L`, the boundary continues along `L` and re-emerges at
//! the tip *preceding* `t` in `L`'s circular order, on the arc leaving that
//! tip. Cycles of this successor map are exactly the faces.
//!
//! Collapsing every leaf to a point turns each face boundary into a circle
//! whose circumference is the total angular length of the face's arcs;
//! these are the quotient circles used by the sausage construction.

use crate::angle::Angle;
use num_rational::Rational64;
use num_traits::One;

/// Faces and arcs of the circle cut along a set of unlinked leaves.
#[derive(Clone, Debug)]
pub struct CircleCuts {
    /// All tips, sorted ascending. Arc `i` runs ccw from `tips[i]` to
    /// `tips[(i+1) % n]`; with no tips at all there is a single full-circle
    /// face and no arcs.
    tips: Vec<Angle>,
    /// Index of the owning leaf for each tip.
    leaf_of_tip: Vec<usize>,
    /// Successor permutation on arcs (see module docs).
    succ: Vec<usize>,
    face_of_arc: Vec<usize>,
    /// Arcs of each face, in boundary order starting from its smallest arc
    /// index.
    faces: Vec<Vec<usize>>,
    face_len: Vec<Rational64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DuplicateTip(pub Angle);

impl CircleCuts {
    /// Builds the cut structure. Every leaf needs >= 2 tips, and no angle
    /// may appear twice (within one leaf or across leaves).
    pub fn new(leaves: &[Vec<Angle>]) -> Result<Self, DuplicateTip> {
        let mut tagged: Vec<(Angle, usize)> = Vec::new();
        for (li, leaf) in leaves.iter().enumerate() {
            assert!(leaf.len() >= 2, "leaf needs at least two tips");
            for &t in leaf {
                tagged.push((t, li));
            }
        }
        tagged.sort();
        for w in tagged.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(DuplicateTip(w[0].0));
            }
        }
        let n = tagged.len();
        let tips: Vec<Angle> = tagged.iter().map(|&(t, _)| t).collect();
        let leaf_of_tip: Vec<usize> = tagged.iter().map(|&(_, l)| l).collect();

        // within each leaf, tip indices in circular (sorted) order
        let mut leaf_tips: Vec<Vec<usize>> = vec![Vec::new(); leaves.len()];
        for (i, &l) in leaf_of_tip.iter().enumerate() {
            leaf_tips[l].push(i); // ascending since tips are sorted
        }
        // prev_in_leaf[tip] = the preceding tip of the same leaf
        let mut prev_in_leaf = vec![0usize; n];
        for lt in &leaf_tips {
            for (k, &ti) in lt.iter().enumerate() {
                prev_in_leaf[ti] = lt[(k + lt.len() - 1) % lt.len()];
            }
        }
        let mut succ = vec![0usize; n];
        for arc in 0..n {
            let arrives_at = (arc + 1) % n;
            succ[arc] = prev_in_leaf[arrives_at];
        }

        // faces = cycles of succ
        let mut face_of_arc = vec![usize::MAX; n];
        let mut faces = Vec::new();
        for start in 0..n {
            if face_of_arc[start] != usize::MAX {
                continue;
            }
            let f = faces.len();
            let mut cycle = Vec::new();
            let mut a = start;
            while face_of_arc[a] == usize::MAX {
                face_of_arc[a] = f;
                cycle.push(a);
                a = succ[a];
            }
            debug_assert_eq!(a, start, "succ must be a permutation");
            faces.push(cycle);
        }
        if n == 0 {
            faces.push(Vec::new());
        }

        let arc_len = |i: usize| tips[i].dist_ccw(tips[(i + 1) % n]);
        let face_len: Vec<Rational64> = faces
            .iter()
            .map(|cycle| {
                if cycle.is_empty() {
                    Rational64::one()
                } else {
                    cycle.iter().map(|&a| arc_len(a)).sum()
                }
            })
            .collect();

        Ok(CircleCuts {
            tips,
            leaf_of_tip,
            succ,
            face_of_arc,
            faces,
            face_len,
        })
    }

    pub fn n_tips(&self) -> usize {
        self.tips.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn tips(&self) -> &[Angle] {
        &self.tips
    }

    pub fn leaf_of_tip(&self, tip: usize) -> usize {
        self.leaf_of_tip[tip]
    }

    pub fn succ_arc(&self, arc: usize) -> usize {
        self.succ[arc]
    }

    /// Arcs of face `f` in boundary order.
    pub fn face_arcs(&self, f: usize) -> &[usize] {
        &self.faces[f]
    }

    /// Total angular length of the arcs of face `f`.
    pub fn face_length(&self, f: usize) -> Rational64 {
        self.face_len[f]
    }

    /// All face lengths, indexed by face id.
    pub fn face_lengths(&self) -> &[Rational64] {
        &self.face_len
    }

    /// The arc `(tips[i], tips[i+1])` containing `x`, or `None` when `x`
    /// is itself a tip.
    pub fn arc_of_angle(&self, x: Angle) -> Option<usize> {
        let n = self.tips.len();
        if n == 0 {
            return Some(0); // no cuts: treat the whole circle as arc 0 of face 0
        }
        match self.tips.binary_search(&x) {
            Ok(_) => None,
            // partition_point semantics: idx of first tip > x
            Err(idx) => Some((idx + n - 1) % n),
        }
    }

    /// The face whose boundary contains `x`, or `None` when `x` is a tip.
    pub fn face_of_angle(&self, x: Angle) -> Option<usize> {
        if self.tips.is_empty() {
            return Some(0);
        }
        self.arc_of_angle(x).map(|a| self.face_of_arc[a])
    }

    pub fn face_of_arc(&self, arc: usize) -> usize {
        self.face_of_arc[arc]
    }

    /// Index of `x` among the tips, when it is one.
    pub fn tip_index(&self, x: Angle) -> Option<usize> {
        self.tips.binary_search(&x).ok()
    }

    /// The arc starting at tip `i`.
    pub fn arc_leaving(&self, tip: usize) -> usize {
        tip
    }

    /// The arc ending at tip `i`.
    pub fn arc_arriving(&self, tip: usize) -> usize {
        (tip + self.tips.len() - 1) % self.tips.len()
    }

    /// Endpoints of arc `a` as (start, end) going ccw.
    pub fn arc_endpoints(&self, a: usize) -> (Angle, Angle) {
        let n = self.tips.len();
        (self.tips[a], self.tips[(a + 1) % n])
    }

    /// A point in the interior of arc `a` (its midpoint).
    pub fn arc_midpoint(&self, a: usize) -> Angle {
        if self.tips.is_empty() {
            return Angle::zero();
        }
        let (s, e) = self.arc_endpoints(a);
        s.offset(s.dist_ccw(e) / Rational64::from_integer(2))
    }

    /// Whether every angle in `xs` lies in one face (none may be a tip).
    /// Returns that face, or `None` if they straddle faces or hit a tip.
    pub fn common_face(&self, xs: &[Angle]) -> Option<usize> {
        let mut it = xs.iter();
        let first = self.face_of_angle(*it.next()?)?;
        for &x in it {
            if self.face_of_angle(x)? != first {
                return None;
            }
        }
        Some(first)
    }
}
