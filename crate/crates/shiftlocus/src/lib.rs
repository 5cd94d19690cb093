//! Tools for the shift locus of monic centered polynomials
//! `f(z) = z^q + a_2 z^{q-2} + ... + a_q`.
//!
//! A polynomial lies in the shift locus when every critical point escapes to
//! infinity. The escape dynamics are recorded by two complementary
//! structures, both implemented here:
//!
//! * **Elaminations** ([`elam`]): finite systems of leaves, each leaf a
//!   height together with a set of external angles. The landing pattern of
//!   gradient flowlines of the Green's function produces one leaf per
//!   critical point, and pulling leaves back under angle multiplication
//!   builds the full dynamical elamination.
//! * **Sausage trees** ([`sausage`]): cutting the plane into annular bands
//!   between consecutive half-integer powers of `q` of the squared Green's
//!   function, and collapsing each piece, yields a forest of "sausages"
//!   whose combinatorics classify the polynomial up to deformation.
//!
//! Exact data (angles, heights, leaf structure) uses rational arithmetic
//! throughout. Numeric routines ([`poly`], [`flow`]) compute Green's
//! functions, Böttcher coordinates and flowlines in floating point, and
//! [`bridge`] snaps their output back onto the exact side with explicit
//! tolerances.
//!
//! The [`taut`] module builds the tautological elaminations of the cubic
//! family and counts their leaves by length; see `examples/` for end-to-end
//! runs of each pipeline.

pub mod angle;
pub mod bridge;
pub mod circles;
pub mod poly;
pub mod roots;
pub mod elam;
pub mod flow;
pub mod taut;

pub use angle::{Angle, Height};
pub use elam::{Elamination, Leaf};
