use crate::dataset::pose::{PoseLabel, N_POSES, POSE_GRID, POSE_STEP_DEGREES};
use crate::error::{Error, Result};

/// Pose-control vector fed to the editor: one weight per yaw bin,
/// non-negative and summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct RemoteCode {
    weights: [f64; N_POSES],
}

const SUM_TOLERANCE: f64 = 1e-6;

impl RemoteCode {
    /// Validating constructor.
    pub fn from_weights(weights: [f64; N_POSES]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter("remote code weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidParameter(format!("remote code weights sum to {total}, expected 1")));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f64; N_POSES] {
        &self.weights
    }

    /// `Some(index)` when exactly one entry is 1.
    pub fn one_hot_index(&self) -> Option<usize> {
        let mut hot = self.weights.iter().enumerate().filter(|(_, &w)| w != 0.0);
        match (hot.next(), hot.next()) {
            (Some((i, &1.0)), None) => Some(i),
            _ => None,
        }
    }

    /// Yaw implied by the code: weighted mean of the bin angles.
    pub fn degrees(&self) -> f64 {
        self.weights.iter().zip(POSE_GRID).map(|(w, d)| w * d as f64).sum()
    }
}

pub fn make_remote_code(target_index: usize) -> Result<RemoteCode> {
    if target_index >= N_POSES {
        return Err(Error::InvalidIndex(target_index));
    }
    let mut weights = [0.0; N_POSES];
    weights[target_index] = 1.0;
    Ok(RemoteCode { weights })
}

pub fn code_for_pose(pose: PoseLabel) -> RemoteCode {
    make_remote_code(pose.index()).expect("grid pose")
}

/// `(1 - alpha) * a + alpha * b`.
pub fn interpolate_codes(a: &RemoteCode, b: &RemoteCode, alpha: f64) -> Result<RemoteCode> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!("alpha {alpha} outside [0, 1]")));
    }
    if alpha == 0.0 {
        return Ok(a.clone());
    }
    if alpha == 1.0 {
        return Ok(b.clone());
    }
    let mut weights = [0.0; N_POSES];
    for (w, (x, y)) in weights.iter_mut().zip(a.weights.iter().zip(&b.weights)) {
        *w = (1.0 - alpha) * x + alpha * y;
    }
    Ok(RemoteCode { weights })
}

/// Code for an arbitrary yaw in [-90, 90]: the grid code when on the grid,
/// otherwise a linear blend of the two bracketing grid codes.
pub fn code_for_degrees(degrees: f64) -> Result<RemoteCode> {
    if !degrees.is_finite() || !(-90.0..=90.0).contains(&degrees) {
        return Err(Error::InvalidRequest(format!("target yaw {degrees} outside [-90, 90]")));
    }
    let pos = (degrees + 90.0) / POSE_STEP_DEGREES;
    let lo = (pos.floor() as usize).min(N_POSES - 1);
    let frac = pos - lo as f64;
    if frac == 0.0 {
        return make_remote_code(lo);
    }
    interpolate_codes(&make_remote_code(lo)?, &make_remote_code(lo + 1)?, frac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_hot_construction() {
        let c = make_remote_code(6).unwrap();
        let mut want = [0.0; N_POSES];
        want[6] = 1.0;
        assert_eq!(c.weights(), &want);
        assert_eq!(make_remote_code(0).unwrap().one_hot_index(), Some(0));
        assert!(matches!(make_remote_code(13), Err(Error::InvalidIndex(13))));
    }

    #[test]
    fn seven_and_a_half_degrees_is_the_average_of_zero_and_fifteen() {
        let a = code_for_pose(PoseLabel::new(0).unwrap());
        let b = code_for_pose(PoseLabel::new(15).unwrap());
        let mid = interpolate_codes(&a, &b, 0.5).unwrap();
        let mut want = [0.0; N_POSES];
        want[6] = 0.5;
        want[7] = 0.5;
        assert_eq!(mid.weights(), &want);
        assert_eq!(code_for_degrees(7.5).unwrap(), mid);
        assert_eq!(interpolate_codes(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate_codes(&a, &b, 1.0).unwrap(), b);
        assert!(interpolate_codes(&a, &b, 1.5).is_err());
        assert!(interpolate_codes(&a, &b, -0.1).is_err());
    }

    #[test]
    fn degrees_to_code_grid_and_range() {
        assert_eq!(code_for_degrees(-90.0).unwrap().one_hot_index(), Some(0));
        assert_eq!(code_for_degrees(90.0).unwrap().one_hot_index(), Some(12));
        assert!(matches!(code_for_degrees(95.0), Err(Error::InvalidRequest(_))));
        let c = code_for_degrees(-22.5).unwrap();
        assert_eq!(c.weights()[4], 0.5);
        assert_eq!(c.weights()[5], 0.5);
        assert!((c.degrees() + 22.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn produced_codes_are_distributions(i in 0usize..13, j in 0usize..13, alpha in 0.0f64..=1.0) {
            let c = interpolate_codes(&make_remote_code(i).unwrap(), &make_remote_code(j).unwrap(), alpha).unwrap();
            prop_assert!(c.weights().iter().all(|&w| w >= 0.0));
            prop_assert!((c.weights().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn off_grid_codes_touch_only_bracketing_bins(deg in -90.0f64..=90.0) {
            let c = code_for_degrees(deg).unwrap();
            let nonzero: Vec<usize> = (0..N_POSES).filter(|&k| c.weights()[k] > 0.0).collect();
            prop_assert!(!nonzero.is_empty() && nonzero.len() <= 2);
            if nonzero.len() == 2 {
                prop_assert_eq!(nonzero[1], nonzero[0] + 1);
            }
            prop_assert!((c.degrees() - deg).abs() < 1e-9);
            prop_assert!(RemoteCode::from_weights(*c.weights()).is_ok());
        }
    }
}
