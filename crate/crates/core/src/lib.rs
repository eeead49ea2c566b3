//! Extended Kalman filtering with image-valued measurements.
//!
//! The filter in [`filter`] consumes an entire camera frame as one
//! measurement: instead of stacking every pixel into a huge vector and
//! inverting a pixel-count-sized matrix, the update works with fields
//! sampled on a grid. The gain is built from the measurement Jacobian
//! field and the (stationary) noise model, either pointwise for white
//! noise or through FFTs for correlated noise, and the only matrix ever
//! inverted has the dimension of the state.
//!
//! [`camera`] and [`drone`] provide the concrete models for a
//! downward-looking camera over a known map and an IMU-driven rigid body;
//! [`sim`] generates synthetic datasets for closed-loop evaluation.

pub mod assumptions;
pub mod camera;
pub mod drone;
pub mod error;
pub mod fft;
pub mod field;
pub mod filter;
pub mod grid;
pub mod noise;
pub mod preprocess;
pub mod sim;

pub use error::{FilterError, Result};
pub use field::{GainField, ImageField, JacobianField};
pub use grid::FieldGrid;
