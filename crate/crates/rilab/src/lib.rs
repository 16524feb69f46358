//! rilab: a Monte Carlo laboratory for the geometry of random interlacements
//! on Z^d at low intensity.
//!
//! The crate samples the interlacement graph restricted to finite windows via
//! the local construction (Poisson number of trajectories started from the
//! normalized equilibrium measure of the window), and measures chemical
//! distances, capacities, cut-point densities, annulus cluster structure, and
//! renormalization statistics at desk scale.
//!
//! Modules follow the pipeline:
//! - [`lattice`]: points, boxes, boundaries, the *-connected planar grid
//! - [`randomness`]: keyed reproducible streams and elementary samplers
//! - [`walk`]: simple-random-walk simulation, stopping times, cut-times
//! - [`capacity`]: equilibrium measure / capacity estimation and calibration
//! - [`greenref`]: slow independent reference solvers used for cross-checks
//! - [`interlacements`]: the local construction and graph assembly
//! - [`chemdist`]: chemical-distance queries and scaling experiments
//! - [`annulus`]: cluster decomposition and ring statistics
//! - [`renorm`]: good boxes, the exploration algorithm, multi-scale recursion

pub mod annulus;
pub mod capacity;
pub mod chemdist;
pub mod greenref;
pub mod interlacements;
pub mod lattice;
pub mod randomness;
pub mod renorm;
pub mod util;
pub mod walk;
