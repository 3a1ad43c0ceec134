//! Shared geometry, the 7-DoF pose record and seeded randomness.
//!
//! Every other module speaks in [`ActionState`]: it is both the commanded
//! end-effector target (an action) and the measured end-effector pose (a state).

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gripper flag. Tokenized as `0.0` (closed) and `1.0` (open).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gripper {
    Closed,
    Open,
}

impl Gripper {
    pub fn as_f64(self) -> f64 {
        match self {
            Gripper::Closed => 0.0,
            Gripper::Open => 1.0,
        }
    }

    /// Thresholds a continuous value at 0.5.
    pub fn from_level(level: f64) -> Self {
        if level >= 0.5 {
            Gripper::Open
        } else {
            Gripper::Closed
        }
    }

    pub fn is_open(self) -> bool {
        self == Gripper::Open
    }
}

/// End-effector position (meters), Euler orientation (radians) and gripper flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub phi: f64,
    pub theta: f64,
    pub psi: f64,
    pub gripper: Gripper,
}

impl ActionState {
    pub const DIMS: usize = 7;

    pub fn new(x: f64, y: f64, z: f64, psi: f64, gripper: Gripper) -> Self {
        ActionState {
            x,
            y,
            z,
            phi: 0.0,
            theta: 0.0,
            psi,
            gripper,
        }
    }

    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn with_position(mut self, p: [f64; 3]) -> Self {
        self.x = p[0];
        self.y = p[1];
        self.z = p[2];
        self
    }

    pub fn with_gripper(mut self, gripper: Gripper) -> Self {
        self.gripper = gripper;
        self
    }

    /// Field values in token order `(x, y, z, phi, theta, psi, g)`.
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.x,
            self.y,
            self.z,
            self.phi,
            self.theta,
            self.psi,
            self.gripper.as_f64(),
        ]
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        ActionState {
            x: v[0],
            y: v[1],
            z: v[2],
            phi: v[3],
            theta: v[4],
            psi: v[5],
            gripper: Gripper::from_level(v[6]),
        }
    }

    pub fn distance_to(&self, other: &ActionState) -> f64 {
        distance(self.position(), other.position())
    }

    /// Checks the record invariants against `w`.
    pub fn validate(&self, w: &Workspace) -> Result<()> {
        for (axis, (v, r)) in ["x", "y", "z"]
            .iter()
            .zip(self.position().iter().zip(w.axes().iter()))
        {
            if !v.is_finite() || *v < r.min || *v > r.max {
                return Err(Error::invalid(format!(
                    "{axis} = {v} outside workspace [{}, {}]",
                    r.min, r.max
                )));
            }
        }
        for (name, a) in [("phi", self.phi), ("theta", self.theta), ("psi", self.psi)] {
            if !a.is_finite() || !(-PI..=PI).contains(&a) {
                return Err(Error::invalid(format!("{name} = {a} outside [-pi, pi]")));
            }
        }
        Ok(())
    }
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

pub fn horizontal_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = (a + PI).rem_euclid(two_pi) - PI;
    // rem_euclid can return exactly two_pi for tiny negative inputs
    if r >= PI {
        r -= two_pi;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Range { min, max }
    }

    pub fn span(&self) -> f64 {
        self.max - self.min
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn shrink(&self, margin: f64) -> Range {
        Range::new(self.min + margin, self.max - margin)
    }
}

/// Axis-aligned reachable volume in the robot base frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workspace {
    pub x: Range,
    pub y: Range,
    pub z: Range,
    /// Inset applied on every axis to obtain the safe sub-region.
    pub safe_margin: f64,
}

impl Default for Workspace {
    fn default() -> Self {
        Workspace {
            x: Range::new(-0.5, 0.5),
            y: Range::new(0.0, 0.5),
            z: Range::new(0.0, 0.5),
            safe_margin: 0.02,
        }
    }
}

impl Workspace {
    pub fn axes(&self) -> [Range; 3] {
        [self.x, self.y, self.z]
    }

    pub fn safe(&self) -> [Range; 3] {
        self.axes().map(|r| r.shrink(self.safe_margin))
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.axes().iter().zip(p).all(|(r, v)| r.contains(v))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in ["x", "y", "z"].iter().zip(self.axes()) {
            if !(r.min.is_finite() && r.max.is_finite() && r.min < r.max) {
                return Err(Error::invalid(format!(
                    "workspace axis {name} needs min < max, got [{}, {}]",
                    r.min, r.max
                )));
            }
            if !(self.safe_margin >= 0.0 && 2.0 * self.safe_margin < r.span()) {
                return Err(Error::invalid(format!(
                    "safe margin {} does not fit inside axis {name}",
                    self.safe_margin
                )));
            }
        }
        Ok(())
    }
}

/// Clamps the position into `w` and wraps the three angles. The gripper flag is untouched.
pub fn clamp_to_workspace(p: ActionState, w: &Workspace) -> ActionState {
    ActionState {
        x: w.x.clamp(p.x),
        y: w.y.clamp(p.y),
        z: w.z.clamp(p.z),
        phi: wrap_angle(p.phi),
        theta: wrap_angle(p.theta),
        psi: wrap_angle(p.psi),
        gripper: p.gripper,
    }
}

/// A named, reproducible source of randomness.
///
/// Equal `(seed, index)` pairs yield identical sequences; distinct indices map to
/// distinct ChaCha streams under the same key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub index: u64,
}

pub fn derive_stream(master: u64, index: u64) -> RngStream {
    RngStream {
        seed: master,
        index,
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.index);
        rng
    }

    /// Derives a nested stream, e.g. `(task, repeat, episode)` from a run stream.
    pub fn child(&self, index: u64) -> RngStream {
        RngStream {
            seed: splitmix64(self.seed ^ splitmix64(self.index.wrapping_add(0x5851_f42d))),
            index,
        }
    }

    /// A 64-bit seed summarizing this stream, for records and metadata.
    pub fn fingerprint(&self) -> u64 {
        splitmix64(self.seed ^ splitmix64(self.index))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn home() -> ActionState {
        ActionState::new(0.0, 0.25, 0.3, 0.0, Gripper::Open)
    }

    #[test]
    fn in_bounds_pose_is_unchanged() {
        let w = Workspace::default();
        assert_eq!(clamp_to_workspace(home(), &w), home());
    }

    #[test]
    fn x_beyond_max_is_clamped() {
        let w = Workspace::default();
        let mut p = home();
        p.x = w.x.max + 0.1;
        let c = clamp_to_workspace(p, &w);
        assert_eq!(c.x, w.x.max);
        assert_eq!(ActionState { x: p.x, ..c }, p);
    }

    #[test]
    fn three_half_pi_wraps_to_minus_half_pi() {
        let w = Workspace::default();
        let mut p = home();
        p.phi = 1.5 * PI;
        let c = clamp_to_workspace(p, &w);
        let oracle = 1.5 * PI - 2.0 * PI;
        assert!((c.phi - oracle).abs() < 1e-12, "{} vs {}", c.phi, oracle);
    }

    #[test]
    fn wrap_is_half_open() {
        assert_eq!(wrap_angle(PI), -PI);
        assert_eq!(wrap_angle(-PI), -PI);
        assert!(wrap_angle(-1e-300) < PI);
    }

    #[test]
    fn default_workspace_is_valid() {
        Workspace::default().validate().unwrap();
        let mut w = Workspace::default();
        w.y = Range::new(0.3, 0.3);
        assert!(w.validate().is_err());
    }

    #[test]
    fn equal_streams_agree_for_1000_draws() {
        let a: Vec<u64> = {
            let mut r = derive_stream(42, 0).rng();
            (0..1000).map(|_| r.random()).collect()
        };
        let b: Vec<u64> = {
            let mut r = derive_stream(42, 0).rng();
            (0..1000).map(|_| r.random()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_indices_differ() {
        let a: u64 = derive_stream(42, 0).rng().random();
        let b: u64 = derive_stream(42, 1).rng().random();
        assert_ne!(a, b);
    }

    #[test]
    fn stream_is_reproducible_across_runs() {
        // Frozen from a previous run; guards against generator or seeding changes.
        let v: u64 = derive_stream(42, 7).rng().random();
        assert_eq!(v, FROZEN_42_7);
    }

    const FROZEN_42_7: u64 = 2370525664269707216;

    proptest! {
        #[test]
        fn wrap_is_idempotent(a in -100.0f64..100.0) {
            let w = wrap_angle(a);
            prop_assert!((-PI..PI).contains(&w));
            prop_assert_eq!(wrap_angle(w), w);
        }

        #[test]
        fn clamp_is_idempotent_and_valid(
            x in -2.0f64..2.0, y in -2.0f64..2.0, z in -2.0f64..2.0,
            phi in -10.0f64..10.0, psi in -10.0f64..10.0, open: bool,
        ) {
            let w = Workspace::default();
            let g = if open { Gripper::Open } else { Gripper::Closed };
            let p = ActionState { x, y, z, phi, theta: 0.0, psi, gripper: g };
            let c = clamp_to_workspace(p, &w);
            prop_assert!(c.validate(&w).is_ok());
            prop_assert_eq!(clamp_to_workspace(c, &w), c);
            prop_assert_eq!(c.gripper, g);
        }
    }
}
