use lbgan_nn::{Scalar, Tensor};

use crate::dataset::image::{LandmarkSet, Point};

/// Eye patch side at the reference resolution of 96 pixels.
pub const EYE_PATCH_96: usize = 15;
/// Mouth patch side at the reference resolution of 96 pixels.
pub const MOUTH_PATCH_96: usize = 20;
const REFERENCE_SIZE: f64 = 96.0;

/// Binary `size x size` mask marking the facial regions the masked L2
/// attends to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    bits: Vec<u8>,
}

impl AttentionMask {
    pub fn ones(size: usize) -> Self {
        Self { size, bits: vec![1; size * size] }
    }

    pub fn zeros(size: usize) -> Self {
        Self { size, bits: vec![0; size * size] }
    }

    pub fn from_bits(size: usize, bits: Vec<u8>) -> Option<Self> {
        (bits.len() == size * size && bits.iter().all(|&b| b <= 1)).then_some(Self { size, bits })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.size + col] == 1
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Mark a `side x side` square centered at `center`, clipped to the frame.
    pub fn add_patch(&mut self, center: Point, side: usize) {
        let start = |c: f64| (c - (side as f64 - 1.0) / 2.0 + 0.5).floor() as i64;
        let (r0, c0) = (start(center[0]), start(center[1]));
        let n = self.size as i64;
        for r in r0.max(0)..(r0 + side as i64).min(n) {
            for c in c0.max(0)..(c0 + side as i64).min(n) {
                self.bits[(r * n + c) as usize] = 1;
            }
        }
    }

    /// `[1, 1, size, size]` tensor, broadcastable across channels.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.bits.iter().map(|&b| if b == 1 { T::one() } else { T::zero() }).collect();
        Tensor::new(vec![1, 1, self.size, self.size], data).expect("mask shape")
    }
}

/// Round `v` to the nearest positive integer with the given parity; ties go
/// to the larger value.
fn round_with_parity(v: f64, odd: bool) -> usize {
    let base = if odd { 1.0 } else { 2.0 };
    let k = ((v - base) / 2.0 + 0.5).floor().max(0.0);
    (base + 2.0 * k) as usize
}

/// Patch sides `(eye, mouth)` at `image_size`, scaled from 15 and 20 at 96
/// pixels and rounded preserving parity.
pub fn patch_sizes(image_size: usize) -> (usize, usize) {
    if image_size == REFERENCE_SIZE as usize {
        return (EYE_PATCH_96, MOUTH_PATCH_96);
    }
    let scale = image_size as f64 / REFERENCE_SIZE;
    (
        round_with_parity(EYE_PATCH_96 as f64 * scale, EYE_PATCH_96 % 2 == 1),
        round_with_parity(MOUTH_PATCH_96 as f64 * scale, MOUTH_PATCH_96 % 2 == 1),
    )
}

/// Union of one eye patch per eye and one mouth patch.
pub fn build_mask(landmarks: &LandmarkSet, image_size: usize) -> AttentionMask {
    let (eye, mouth) = patch_sizes(image_size);
    let mut m = AttentionMask::zeros(image_size);
    m.add_patch(landmarks.left_eye, eye);
    m.add_patch(landmarks.right_eye, eye);
    m.add_patch(landmarks.mouth_center, mouth);
    m
}
