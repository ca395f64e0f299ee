//! Per-joint health and the degradation model.
//!
//! A joint with health `h` (weakness `w = 1 - h`) delivers only `h` of every
//! commanded joint step, and its reachable interval shrinks to `h` times the
//! nominal width around the nominal midpoint. `h = 0` locks the joint at the
//! midpoint; `h = 1` is indistinguishable from an undegraded joint.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Health of every arm joint, each in `[0, 1]`. The gripper is not included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct HealthVector(Vec<f64>);

impl HealthVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for (joint, &value) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::HealthOutOfRange { joint, value });
            }
        }
        Ok(Self(values))
    }

    pub fn healthy(joints: usize) -> Self {
        Self(vec![1.0; joints])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, joint: usize) -> f64 {
        self.0[joint]
    }

    /// `1 - h_j`.
    pub fn weakness(&self, joint: usize) -> f64 {
        1.0 - self.0[joint]
    }

    pub fn is_fully_healthy(&self) -> bool {
        self.0.iter().all(|&h| h == 1.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn check_len(&self, joints: usize) -> Result<()> {
        if self.0.len() != joints {
            return Err(Error::dim("health vector", joints, self.0.len()));
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for HealthVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<HealthVector> for Vec<f64> {
    fn from(h: HealthVector) -> Self {
        h.0
    }
}

/// Which joints are weakened, and by how much. Unlisted joints are healthy.
///
/// Serializes as `{"weakness": {"1": 0.7}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationConfig {
    #[serde(default)]
    pub weakness: BTreeMap<usize, f64>,
}

impl DegradationConfig {
    pub fn healthy() -> Self {
        Self::default()
    }

    pub fn single(joint: usize, weakness: f64) -> Self {
        let mut weakness_map = BTreeMap::new();
        weakness_map.insert(joint, weakness);
        Self {
            weakness: weakness_map,
        }
    }

    pub fn is_healthy(&self) -> bool {
        self.weakness.values().all(|&w| w == 0.0)
    }

    pub fn validate(&self, joints: usize) -> Result<()> {
        for (&index, &value) in &self.weakness {
            if index >= joints {
                return Err(Error::JointOutOfRange { index, joints });
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::WeaknessOutOfRange {
                    joint: index,
                    value,
                });
            }
        }
        Ok(())
    }

    pub fn to_health_vector(&self, joints: usize) -> Result<HealthVector> {
        to_health_vector(self, joints)
    }
}

impl fmt::Display for DegradationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_healthy() {
            return f.write_str("healthy");
        }
        let parts: Vec<String> = self
            .weakness
            .iter()
            .map(|(j, w)| format!("J{j}:w={w}"))
            .collect();
        f.write_str(&parts.join(","))
    }
}

/// `h_j = 1 - w_j` for assigned joints, `1` elsewhere.
pub fn to_health_vector(config: &DegradationConfig, joints: usize) -> Result<HealthVector> {
    config.validate(joints)?;
    let mut values = vec![1.0; joints];
    for (&joint, &w) in &config.weakness {
        values[joint] = 1.0 - w;
    }
    HealthVector::new(values)
}

fn check_health(h: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&h) {
        return Err(Error::HealthOutOfRange {
            joint: usize::MAX,
            value: h,
        });
    }
    Ok(())
}

/// Scales a commanded joint step by the joint's health.
pub fn apply_gain(h: f64, commanded_delta: f64) -> Result<f64> {
    check_health(h)?;
    Ok(commanded_delta * h)
}

/// Shrinks a nominal `(min, max)` interval to `h` of its width around its midpoint.
pub fn degraded_limits(nominal: (f64, f64), h: f64) -> Result<(f64, f64)> {
    let (min, max) = nominal;
    if !(min < max) {
        return Err(Error::InvalidInterval { min, max });
    }
    check_health(h)?;
    if h == 1.0 {
        return Ok(nominal);
    }
    let mid = 0.5 * (min + max);
    let half = 0.5 * (max - min) * h;
    Ok((mid - half, mid + half))
}
