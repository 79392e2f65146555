//! Numerical kernels for delocalized (Enskog/Povzner-type) collision integrals.
//!
//! The library evaluates collision operators in which the two colliding
//! particles sit at *different* spatial points, together with the structures
//! that make their conservation laws local:
//!
//! * [`kinematics`]: elastic pair collisions along a unit direction, and the
//!   block rotations used by the current construction.
//! * [`kernels`]: the four supported collision kernels (Povzner, soft sphere,
//!   Enskog shell, revised Enskog) and their radial tail integrals.
//! * [`distributions`]: analytic Gaussian-type states and periodic slab grids,
//!   with closed-form densities and velocity moments where available.
//! * [`quadrature`]: deterministic tensor rules (Gauss-Legendre, 26-point
//!   spherical) and reproducible Monte Carlo sweeps whose results do not
//!   depend on the worker count.
//! * [`collision_op`]: strong (pointwise) and weak (integrated) evaluation of
//!   the collision operator, plus conservation residuals.
//! * [`currents`]: the vector fields whose space/velocity divergences
//!   reproduce the weighted collision operator, making momentum and energy
//!   balance local.
//! * [`entropy`]: entropy production, the two H-functionals, the entropy flux
//!   pair (K, L), and residuals for the local entropy identity/inequality.
//! * [`dynamics`]: free transport, a Strang-split kinetic step on slab grids,
//!   and local conservation residuals along trajectories.
//!
//! Everything that reports a Monte Carlo value carries a standard error, and
//! every sweep is seeded and counter-based: the same configuration and seed
//! reproduce results bit-for-bit regardless of thread count.

pub mod collision_op;
pub mod currents;
pub mod distributions;
pub mod dynamics;
pub mod entropy;
pub mod error;
pub mod kernels;
pub mod kinematics;
pub mod quadrature;
pub mod testfns;

pub use error::{Error, Result};
pub use kinematics::Vec3;
