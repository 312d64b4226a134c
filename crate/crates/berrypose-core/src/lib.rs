//! Core math for single-shot 6DoF pose and 3D size estimation of
//! rotation-symmetric fruit.
//!
//! Everything in this crate is pure computation over value types: box and
//! camera geometry, the grid tensor codec, the training loss, the PnP pose
//! solver and the detection-matching / average-precision machinery. There is
//! no I/O here; images, datasets, the network and the CLI live in the
//! companion `berrypose` crate.
//!
//! The crate is `no_std` (with `alloc`) so the geometry and codec can be
//! reused on targets without an operating system.
//!
//! # Conventions
//!
//! - Camera frame: x right, y down, z forward (optical axis). All poses are
//!   object-in-camera unless stated otherwise.
//! - Pixel coordinates are continuous with pixel centers at integer
//!   positions: pixel `(0, 0)` is centered at `(0.0, 0.0)` and a `W`-pixel
//!   row spans `[-0.5, W - 0.5)`. A horizontal mirror is `u -> W - 1 - u`.
//! - Boxes measure `h` along the local y axis (the symmetry axis), `w`
//!   along x and `l` along z. See [`geometry::OrientedBox3D::corners`] for
//!   the frozen corner ordering.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod codec;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod math;
pub mod pnp;

pub use geometry::{CameraIntrinsics, OrientedBox3D, Pose, Rotation, Size3D};
