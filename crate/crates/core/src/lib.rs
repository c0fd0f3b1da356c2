//! Numerical closing of geodesic orbits on flat-topology tori.
//!
//! A recurrent unit-speed geodesic of a periodic metric g is turned into a
//! periodic orbit of a nearby metric e^f g, with f small in C^1 and built
//! explicitly from a connecting curve inside a thin tube.

pub mod closer;
pub mod connector;
pub mod error;
pub mod factor;
pub mod flow;
pub mod interp;
pub mod metric;
pub mod nonfinite;
pub mod obstacle;
pub mod ode;
pub mod quad;
pub mod reparam;
pub mod smooth;
pub mod tube_bump;

pub use error::{GeoError, Result};
