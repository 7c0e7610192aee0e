use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of discrete yaw bins.
pub const N_POSES: usize = 13;
/// Yaw grid in ascending order.
pub const POSE_GRID: [i32; N_POSES] = [-90, -75, -60, -45, -30, -15, 0, 15, 30, 45, 60, 75, 90];
/// Index of the frontal bin (0 degrees).
pub const FRONTAL_INDEX: usize = 6;
pub const POSE_STEP_DEGREES: f64 = 15.0;

/// Yaw label on the 15-degree grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i32", into = "i32")]
pub struct PoseLabel(i32);

impl PoseLabel {
    pub const FRONTAL: PoseLabel = PoseLabel(0);

    pub fn new(degrees: i32) -> Result<Self> {
        pose_to_index(degrees).map(|_| Self(degrees))
    }

    pub fn from_index(index: usize) -> Result<Self> {
        index_to_degrees(index).map(Self)
    }

    pub fn degrees(self) -> i32 {
        self.0
    }

    pub fn index(self) -> usize {
        pose_to_index(self.0).expect("validated on construction")
    }

    pub fn is_frontal(self) -> bool {
        self.0 == 0
    }

    pub fn all() -> impl Iterator<Item = PoseLabel> {
        POSE_GRID.iter().map(|&d| PoseLabel(d))
    }
}

impl TryFrom<i32> for PoseLabel {
    type Error = Error;

    fn try_from(degrees: i32) -> Result<Self> {
        Self::new(degrees)
    }
}

impl From<PoseLabel> for i32 {
    fn from(p: PoseLabel) -> i32 {
        p.0
    }
}

/// Position of `degrees` in [`POSE_GRID`].
pub fn pose_to_index(degrees: i32) -> Result<usize> {
    POSE_GRID
        .iter()
        .position(|&d| d == degrees)
        .ok_or(Error::InvalidPose(degrees))
}

pub fn index_to_degrees(index: usize) -> Result<i32> {
    POSE_GRID.get(index).copied().ok_or(Error::InvalidIndex(index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints_and_interior() {
        assert_eq!(pose_to_index(-90).unwrap(), 0);
        assert_eq!(pose_to_index(90).unwrap(), 12);
        assert_eq!(pose_to_index(30).unwrap(), 8);
        assert_eq!(pose_to_index(0).unwrap(), FRONTAL_INDEX);
        assert!(matches!(pose_to_index(100), Err(Error::InvalidPose(100))));
        assert!(matches!(pose_to_index(7), Err(Error::InvalidPose(7))));
    }

    #[test]
    fn index_round_trip_is_identity() {
        for i in 0..N_POSES {
            assert_eq!(pose_to_index(index_to_degrees(i).unwrap()).unwrap(), i);
        }
        assert!(index_to_degrees(13).is_err());
        // independent enumeration of -90..=90 step 15
        let enumerated: Vec<i32> = (-90..=90).step_by(15).collect();
        assert_eq!(enumerated, POSE_GRID.to_vec());
    }

    #[test]
    fn serde_rejects_off_grid() {
        assert!(serde_json::from_str::<PoseLabel>("45").is_ok());
        assert!(serde_json::from_str::<PoseLabel>("44").is_err());
    }
}
