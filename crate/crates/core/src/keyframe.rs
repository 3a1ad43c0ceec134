//! Keyframe selection over dense end-effector trajectories.
//!
//! A frame is a keyframe when the end effector is momentarily static or when the
//! gripper flag changes around it. The first and last frames are always kept.

use serde::{Deserialize, Serialize};

use crate::common::{distance, Gripper};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeConfig {
    /// Static threshold on the summed displacement to both neighbours, meters.
    pub epsilon: f64,
    /// After a static keyframe, further static selections are suppressed for this many frames.
    pub window: usize,
}

impl Default for KeyframeConfig {
    fn default() -> Self {
        KeyframeConfig {
            epsilon: 0.002,
            window: 4,
        }
    }
}

impl KeyframeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "keyframe epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if self.window == 0 {
            return Err(Error::invalid("keyframe window must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub position: [f64; 3],
    pub gripper: Gripper,
}

pub fn extract(frames: &[TrajectoryPoint], cfg: &KeyframeConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    if frames.len() < 2 {
        return Err(Error::invalid(format!(
            "keyframe extraction needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let n = frames.len() - 1;
    let mut keep = vec![0];
    let mut last_static: Option<usize> = None;
    for i in 1..n {
        let (prev, cur, next) = (&frames[i - 1], &frames[i], &frames[i + 1]);
        let motion = distance(cur.position, prev.position) + distance(next.position, cur.position);
        let suppressed = last_static.is_some_and(|j| i - j <= cfg.window);
        let is_static = motion < cfg.epsilon && !suppressed;
        if is_static {
            last_static = Some(i);
        }
        let gripper_edge = cur.gripper != prev.gripper || cur.gripper != next.gripper;
        if is_static || gripper_edge {
            keep.push(i);
        }
    }
    keep.push(n);
    Ok(keep)
}
