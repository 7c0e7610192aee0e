//! Procedural multi-view faces.
//!
//! A face is a cylinder of radius [`FEATURE_RADIUS`] seen from the front:
//! a feature at angle `phi` on the cylinder appears at column
//! `center + R * sin(phi + yaw)` and is foreshortened by `cos(phi + yaw)`.
//! Features on the image center line (nose, mouth) therefore move by an
//! amount proportional to `sin(yaw)`. The eye farther from the camera is
//! hidden beyond 60 degrees of yaw, and the head contour narrows while hair
//! covers its back side.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::image::{LandmarkSet, RgbImage, TEMPLATE_EYE_ROW, TEMPLATE_MOUTH_ROW};
use crate::dataset::pose::PoseLabel;

pub const FEATURE_RADIUS: f64 = 0.26;
const HEAD_HALF_WIDTH: f64 = 0.31;
const HEAD_HALF_HEIGHT: f64 = 0.40;
const HEAD_CENTER_ROW: f64 = 0.50;
const HEAD_SHIFT: f64 = 0.04;
const FAR_EYE_HIDDEN_BEYOND: f64 = 60.0;
const SUPERSAMPLE: usize = 4;
const HAIR: [f64; 3] = [0.20, 0.13, 0.09];
const IRIS: [f64; 3] = [0.10, 0.07, 0.06];
const SCLERA: [f64; 3] = [0.95, 0.95, 0.93];
const LIPS: [f64; 3] = [0.72, 0.26, 0.27];
const BACKGROUND: [f64; 3] = [0.42, 0.45, 0.50];
const NOISE_GRID: usize = 5;
const NOISE_AMPLITUDE: f64 = 0.04;

/// Appearance parameters of one synthetic identity. All lengths are
/// fractions of the image side.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFaceSpec {
    pub identity_seed: u64,
    /// Position on a light-to-dark skin-tone ramp, in [0, 1].
    pub face_hue: f64,
    /// Frontal horizontal distance from the face center line to each eye.
    pub eye_spacing: f64,
    pub eye_size: f64,
    /// Frontal half-width of the mouth.
    pub mouth_width: f64,
    /// Vertical extent of the nose below the eye line.
    pub nose_length: f64,
    pub background_seed: u64,
}

impl SyntheticFaceSpec {
    pub fn from_seed(identity_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(identity_seed);
        Self {
            identity_seed,
            face_hue: rng.random_range(0.0..1.0),
            eye_spacing: rng.random_range(0.15..0.22),
            eye_size: rng.random_range(0.035..0.065),
            mouth_width: rng.random_range(0.06..0.13),
            nose_length: rng.random_range(0.12..0.24),
            background_seed: rng.random(),
        }
    }

    /// A face whose frontal landmarks sit exactly on the alignment template.
    pub fn canonical() -> Self {
        Self {
            identity_seed: 0,
            face_hue: 0.5,
            eye_spacing: 0.19,
            eye_size: 0.05,
            mouth_width: 0.1,
            nose_length: 0.18,
            background_seed: 0,
        }
    }

    fn skin(&self) -> [f64; 3] {
        let light = [0.93, 0.78, 0.66];
        let dark = [0.50, 0.34, 0.24];
        let t = self.face_hue;
        [0, 1, 2].map(|c| light[c] * (1.0 - t) + dark[c] * t)
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Geometry {
    yaw: f64,
    center_col: f64,
    head_half_width: f64,
    eye_angle: f64,
}

impl Geometry {
    fn new(spec: &SyntheticFaceSpec, yaw_degrees: f64) -> Self {
        let yaw = yaw_degrees.to_radians();
        Self {
            yaw,
            center_col: 0.5 - HEAD_SHIFT * yaw.sin(),
            head_half_width: HEAD_HALF_WIDTH * (0.9 + 0.1 * yaw.cos()),
            eye_angle: (spec.eye_spacing / FEATURE_RADIUS).clamp(-1.0, 1.0).asin(),
        }
    }

    /// Column and visibility (cosine) of a cylinder point at angle `phi`.
    fn project(&self, phi: f64) -> (f64, f64) {
        let a = phi + self.yaw;
        (self.center_col + FEATURE_RADIUS * a.sin(), a.cos())
    }

    fn in_head(&self, u: f64, v: f64) -> bool {
        let du = (u - self.center_col) / self.head_half_width;
        let dv = (v - HEAD_CENTER_ROW) / HEAD_HALF_HEIGHT;
        du * du + dv * dv <= 1.0
    }
}

fn in_ellipse(u: f64, v: f64, cu: f64, cv: f64, ru: f64, rv: f64) -> bool {
    if ru <= 0.0 || rv <= 0.0 {
        return false;
    }
    let du = (u - cu) / ru;
    let dv = (v - cv) / rv;
    du * du + dv * dv <= 1.0
}

fn scale(c: [f64; 3], k: f64) -> [f64; 3] {
    c.map(|x| x * k)
}

struct Eye {
    col: f64,
    visible: f64,
    shown: bool,
}

fn eyes(g: &Geometry, yaw_degrees: f64) -> [Eye; 2] {
    [-1.0, 1.0].map(|side: f64| {
        let (col, visible) = g.project(side * g.eye_angle);
        let far = yaw_degrees != 0.0 && side.signum() == yaw_degrees.signum();
        let hidden = far && yaw_degrees.abs() > FAR_EYE_HIDDEN_BEYOND;
        Eye { col, visible, shown: !hidden && visible > 0.1 }
    })
}

fn shade(spec: &SyntheticFaceSpec, g: &Geometry, eyes: &[Eye; 2], noise: &[f64], u: f64, v: f64) -> [f64; 3] {
    let skin = spec.skin();
    let sin_yaw = g.yaw.sin();

    let n = sample_noise(noise, u, v);
    let mut color = [0, 1, 2].map(|c| BACKGROUND[c] + (v - 0.5) * 0.15 + n);

    // neck
    if v > 0.78 && (u - g.center_col).abs() < 0.12 {
        color = scale(skin, 0.85);
    }
    if g.in_head(u, v) {
        color = skin;
        let back = (u - g.center_col) * sin_yaw.signum();
        let hairline = g.head_half_width * (1.0 - 0.9 * sin_yaw.abs());
        if v < HEAD_CENTER_ROW - HEAD_HALF_HEIGHT * 0.55 || (sin_yaw != 0.0 && back < -hairline) {
            color = HAIR;
        }
    }

    let eye_row = TEMPLATE_EYE_ROW;
    for eye in eyes.iter().filter(|e| e.shown) {
        let width = spec.eye_size * (0.3 + 0.7 * eye.visible);
        let brow_row = eye_row - spec.eye_size * 1.5 - 0.025;
        if in_ellipse(u, v, eye.col, brow_row, width * 1.6, 0.018) {
            color = HAIR;
        }
        if in_ellipse(u, v, eye.col, eye_row, width * 1.6, spec.eye_size * 0.85) {
            color = SCLERA;
        }
        if in_ellipse(u, v, eye.col, eye_row, width * 0.8, spec.eye_size * 0.8) {
            color = IRIS;
        }
    }

    // nose bridge and tip; the tip protrudes past the cylinder
    let nose_top = eye_row + 0.02;
    let nose_tip = eye_row + spec.nose_length;
    if v >= nose_top && v <= nose_tip {
        let t = (v - nose_top) / (nose_tip - nose_top);
        let col = g.center_col + (FEATURE_RADIUS + 0.05 * t) * sin_yaw;
        let half = 0.018 + 0.02 * t * sin_yaw.abs();
        if (u - col).abs() <= half {
            color = scale(skin, 0.72);
        }
    }
    let tip_col = g.center_col + (FEATURE_RADIUS + 0.05) * sin_yaw;
    if in_ellipse(u, v, tip_col, nose_tip, 0.03, 0.02) {
        color = scale(skin, 0.5);
    }

    let (mouth_col, mouth_vis) = g.project(0.0);
    if mouth_vis > -1e-9 {
        let half = spec.mouth_width * mouth_vis.max(0.2);
        if in_ellipse(u, v, mouth_col, TEMPLATE_MOUTH_ROW, half, 0.03) {
            color = LIPS;
        }
    }
    color
}

fn make_noise(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..NOISE_GRID * NOISE_GRID)
        .map(|_| rng.random_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE))
        .collect()
}

fn sample_noise(grid: &[f64], u: f64, v: f64) -> f64 {
    let last = (NOISE_GRID - 1) as f64;
    let (x, y) = ((u * last).clamp(0.0, last), (v * last).clamp(0.0, last));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(NOISE_GRID - 1), (y0 + 1).min(NOISE_GRID - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |r: usize, c: usize| grid[r * NOISE_GRID + c];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Analytic landmark positions of `spec` at `yaw_degrees`, in pixel
/// coordinates, clipped to the frame.
pub fn landmarks(spec: &SyntheticFaceSpec, yaw_degrees: f64, image_size: usize) -> LandmarkSet {
    let g = Geometry::new(spec, yaw_degrees);
    let s = image_size as f64;
    let to_px = |v: f64, u: f64| [(v * s - 0.5).clamp(0.0, s - 1.0), (u * s - 0.5).clamp(0.0, s - 1.0)];
    let (left, _) = g.project(-g.eye_angle);
    let (right, _) = g.project(g.eye_angle);
    let (mouth, _) = g.project(0.0);
    LandmarkSet {
        left_eye: to_px(TEMPLATE_EYE_ROW, left),
        right_eye: to_px(TEMPLATE_EYE_ROW, right),
        mouth_center: to_px(TEMPLATE_MOUTH_ROW, mouth),
    }
}

/// Render `spec` at a continuous yaw. Pure in `(spec, yaw, image_size)`.
pub fn render_yaw(spec: &SyntheticFaceSpec, yaw_degrees: f64, image_size: usize) -> (RgbImage, LandmarkSet) {
    let g = Geometry::new(spec, yaw_degrees);
    let eyes = eyes(&g, yaw_degrees);
    let noise = make_noise(mix_seed(spec.background_seed, yaw_degrees.to_bits()));
    let s = image_size as f64;
    let mut data = Vec::with_capacity(image_size * image_size * 3);
    let ss = SUPERSAMPLE as f64;
    for r in 0..image_size {
        for c in 0..image_size {
            let mut acc = [0.0; 3];
            for sr in 0..SUPERSAMPLE {
                for sc in 0..SUPERSAMPLE {
                    let v = (r as f64 + (sr as f64 + 0.5) / ss) / s;
                    let u = (c as f64 + (sc as f64 + 0.5) / ss) / s;
                    let col = shade(spec, &g, &eyes, &noise, u, v);
                    for k in 0..3 {
                        acc[k] += col[k];
                    }
                }
            }
            for a in acc {
                data.push((a / (ss * ss) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let img = RgbImage::new(image_size, image_size, data).expect("render buffer");
    (img, landmarks(spec, yaw_degrees, image_size))
}

pub fn render(spec: &SyntheticFaceSpec, pose: PoseLabel, image_size: usize) -> (RgbImage, LandmarkSet) {
    render_yaw(spec, pose.degrees() as f64, image_size)
}
