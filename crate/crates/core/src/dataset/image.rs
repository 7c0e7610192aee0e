use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use lbgan_nn::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit RGB raster, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::InvalidInput(format!(
                "{}x{} RGB image needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| Error::format(path, e))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::format(path, "image too large"))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e))?;
        buf.truncate(info.buffer_size());
        let (w, h) = (info.width as usize, info.height as usize);
        let data = match info.color_type {
            png::ColorType::Rgb => buf,
            png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            other => return Err(Error::format(path, format!("unsupported PNG color type {other:?}"))),
        };
        Self::new(w, h, data)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(|e| Error::format(path, e))?;
        writer.write_image_data(&self.data).map_err(|e| Error::format(path, e))?;
        writer.finish().map_err(|e| Error::format(path, e))
    }
}

/// Pixel coordinate `(row, col)`; pixel `i` has its center at coordinate `i`.
pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub left_eye: Point,
    pub right_eye: Point,
    #[serde(rename = "mouth")]
    pub mouth_center: Point,
}

impl LandmarkSet {
    pub fn points(&self) -> [Point; 3] {
        [self.left_eye, self.right_eye, self.mouth_center]
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Self {
        Self {
            left_eye: f(self.left_eye),
            right_eye: f(self.right_eye),
            mouth_center: f(self.mouth_center),
        }
    }

    pub fn within(&self, height: usize, width: usize) -> bool {
        self.points().iter().all(|p| {
            p[0].is_finite()
                && p[1].is_finite()
                && p[0] >= 0.0
                && p[1] >= 0.0
                && p[0] <= (height - 1) as f64
                && p[1] <= (width - 1) as f64
        })
    }

    /// Canonical alignment target at `size x size`: eyes at
    /// (0.42, 0.31)/(0.42, 0.69) and mouth at (0.75, 0.50) of the frame.
    pub fn template(size: usize) -> Self {
        let s = size as f64;
        let at = |fr: f64, fc: f64| [fr * s - 0.5, fc * s - 0.5];
        Self {
            left_eye: at(TEMPLATE_EYE_ROW, TEMPLATE_LEFT_EYE_COL),
            right_eye: at(TEMPLATE_EYE_ROW, TEMPLATE_RIGHT_EYE_COL),
            mouth_center: at(TEMPLATE_MOUTH_ROW, TEMPLATE_MOUTH_COL),
        }
    }
}

pub const TEMPLATE_EYE_ROW: f64 = 0.42;
pub const TEMPLATE_LEFT_EYE_COL: f64 = 0.31;
pub const TEMPLATE_RIGHT_EYE_COL: f64 = 0.69;
pub const TEMPLATE_MOUTH_ROW: f64 = 0.75;
pub const TEMPLATE_MOUTH_COL: f64 = 0.50;

/// Normalized face: `[3, size, size]` with every value in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct FaceImage<T> {
    tensor: Tensor<T>,
}

/// Exact linear intensity map `v / 127.5 - 1`.
pub fn intensity_to_unit(v: f64) -> f64 {
    v / 127.5 - 1.0
}

pub fn unit_to_intensity(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

impl<T: Scalar> FaceImage<T> {
    pub fn from_tensor(tensor: Tensor<T>) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != s[2] || s[1] == 0 {
            return Err(Error::InvalidInput(format!("face image must be [3, n, n], got {s:?}")));
        }
        let lo = -T::one();
        if tensor.data().iter().any(|v| !(*v >= lo && *v <= T::one())) {
            return Err(Error::InvalidInput("face image values must lie in [-1, 1]".into()));
        }
        Ok(Self { tensor })
    }

    /// Map a square RGB raster to [-1, 1] without geometric change.
    pub fn from_rgb(img: &RgbImage) -> Result<Self> {
        if img.width != img.height {
            return Err(Error::InvalidInput(format!(
                "expected a square image, got {}x{}",
                img.width, img.height
            )));
        }
        let area = img.width * img.height;
        let mut data = vec![T::zero(); 3 * area];
        for (p, px) in img.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * area + p] = T::lit(intensity_to_unit(px[c] as f64));
            }
        }
        Ok(Self { tensor: Tensor::new(vec![3, img.height, img.width], data)? })
    }

    pub fn to_rgb(&self) -> RgbImage {
        let n = self.size();
        let area = n * n;
        let d = self.tensor.data();
        let mut data = Vec::with_capacity(area * 3);
        for p in 0..area {
            for c in 0..3 {
                data.push(unit_to_intensity(d[c * area + p].to_f64_lossy()));
            }
        }
        RgbImage { width: n, height: n, data }
    }

    pub fn size(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn cast<U: Scalar>(&self) -> FaceImage<U> {
        FaceImage { tensor: self.tensor.cast() }
    }
}

/// Similarity transform `p -> a * p + b` on complex numbers `col + i*row`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

fn cmul(x: [f64; 2], y: [f64; 2]) -> [f64; 2] {
    [x[0] * y[0] - x[1] * y[1], x[0] * y[1] + x[1] * y[0]]
}

impl Similarity {
    pub fn apply(&self, p: Point) -> Point {
        let z = cmul(self.a, [p[1], p[0]]);
        [z[1] + self.b[1], z[0] + self.b[0]]
    }

    pub fn inverse(&self) -> Similarity {
        let n = self.a[0] * self.a[0] + self.a[1] * self.a[1];
        let ai = [self.a[0] / n, -self.a[1] / n];
        let nb = cmul(ai, self.b);
        Similarity { a: ai, b: [-nb[0], -nb[1]] }
    }

    /// Least-squares similarity taking `src` points onto `dst` points.
    pub fn fit(src: &[Point], dst: &[Point]) -> Result<Similarity> {
        let n = src.len() as f64;
        let z: Vec<[f64; 2]> = src.iter().map(|p| [p[1], p[0]]).collect();
        let w: Vec<[f64; 2]> = dst.iter().map(|p| [p[1], p[0]]).collect();
        let mean = |v: &[[f64; 2]]| {
            let s = v.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
            [s[0] / n, s[1] / n]
        };
        let (zm, wm) = (mean(&z), mean(&w));
        let mut num = [0.0, 0.0];
        let mut den = 0.0;
        for (zi, wi) in z.iter().zip(&w) {
            let dz = [zi[0] - zm[0], -(zi[1] - zm[1])]; // conjugate
            let dw = [wi[0] - wm[0], wi[1] - wm[1]];
            let prod = cmul(dz, dw);
            num = [num[0] + prod[0], num[1] + prod[1]];
            den += dz[0] * dz[0] + dz[1] * dz[1];
        }
        if den < 1e-12 {
            return Err(Error::Alignment("landmarks are degenerate".into()));
        }
        let a = [num[0] / den, num[1] / den];
        let az = cmul(a, zm);
        Ok(Similarity { a, b: [wm[0] - az[0], wm[1] - az[1]] })
    }
}

/// Align a raw face to the canonical template at `image_size`, resample
/// bilinearly (edge-clamped), and map intensities to [-1, 1]. Returns the
/// aligned image and the landmarks in the aligned frame.
pub fn preprocess<T: Scalar>(
    raw: &RgbImage,
    landmarks: &LandmarkSet,
    image_size: usize,
) -> Result<(FaceImage<T>, LandmarkSet)> {
    if image_size == 0 {
        return Err(Error::InvalidParameter("image_size must be positive".into()));
    }
    if !landmarks.within(raw.height, raw.width) {
        return Err(Error::InvalidInput("landmarks outside the raw image".into()));
    }
    let [le, re] = [landmarks.left_eye, landmarks.right_eye];
    if (le[0] - re[0]).hypot(le[1] - re[1]) < 1e-6 {
        return Err(Error::Alignment("eye landmarks coincide".into()));
    }
    let template = LandmarkSet::template(image_size);
    let fwd = Similarity::fit(&landmarks.points(), &template.points())?;
    let inv = fwd.inverse();
    let area = image_size * image_size;
    let mut data = vec![T::zero(); 3 * area];
    for r in 0..image_size {
        for c in 0..image_size {
            let src = inv.apply([r as f64, c as f64]);
            let px = bilinear(raw, src[0], src[1]);
            for ch in 0..3 {
                data[ch * area + r * image_size + c] = T::lit(intensity_to_unit(px[ch]).clamp(-1.0, 1.0));
            }
        }
    }
    let img = FaceImage { tensor: Tensor::new(vec![3, image_size, image_size], data)? };
    Ok((img, landmarks.map(|p| fwd.apply(p))))
}

fn bilinear(img: &RgbImage, row: f64, col: f64) -> [f64; 3] {
    let r = row.clamp(0.0, (img.height - 1) as f64);
    let c = col.clamp(0.0, (img.width - 1) as f64);
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(img.height - 1), (c0 + 1).min(img.width - 1));
    let (fr, fc) = (r - r0 as f64, c - c0 as f64);
    let mut out = [0.0; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        let p = |rr: usize, cc: usize| img.pixel(rr, cc)[ch] as f64;
        let top = p(r0, c0) * (1.0 - fc) + p(r0, c1) * fc;
        let bottom = p(r1, c0) * (1.0 - fc) + p(r1, c1) * fc;
        *o = top * (1.0 - fr) + bottom * fr;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intensity_endpoints() {
        assert_eq!(intensity_to_unit(0.0), -1.0);
        assert_eq!(intensity_to_unit(255.0), 1.0);
        for v in 0..=255u8 {
            assert_eq!(unit_to_intensity(intensity_to_unit(v as f64)), v);
        }
    }

    #[test]
    fn similarity_fit_recovers_known_transform() {
        let t = Similarity { a: [0.8, 0.3], b: [5.0, -2.0] };
        let src = [[10.0, 12.0], [11.0, 30.0], [25.0, 20.0]];
        let dst: Vec<Point> = src.iter().map(|&p| t.apply(p)).collect();
        let fit = Similarity::fit(&src, &dst).unwrap();
        for k in 0..2 {
            assert!((fit.a[k] - t.a[k]).abs() < 1e-12);
            assert!((fit.b[k] - t.b[k]).abs() < 1e-10);
        }
        let back = fit.inverse().apply(fit.apply([3.0, 4.0]));
        assert!((back[0] - 3.0).abs() < 1e-12 && (back[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn constant_image_maps_to_range() {
        let raw = RgbImage::new(40, 50, vec![255; 40 * 50 * 3]).unwrap();
        let lm = LandmarkSet { left_eye: [20.0, 12.0], right_eye: [21.0, 28.0], mouth_center: [35.0, 20.0] };
        let (img, out_lm) = preprocess::<f64>(&raw, &lm, 24).unwrap();
        assert!(img.tensor().data().iter().all(|&v| v == 1.0));
        assert_eq!(img.size(), 24);
        assert!(out_lm.left_eye[0].is_finite());
        let black = RgbImage::new(40, 50, vec![0; 40 * 50 * 3]).unwrap();
        let (img, _) = preprocess::<f32>(&black, &lm, 24).unwrap();
        assert!(img.tensor().data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn coincident_eyes_fail_alignment() {
        let raw = RgbImage::new(10, 10, vec![0; 300]).unwrap();
        let lm = LandmarkSet { left_eye: [4.0, 4.0], right_eye: [4.0, 4.0], mouth_center: [8.0, 4.0] };
        assert!(matches!(preprocess::<f64>(&raw, &lm, 8), Err(Error::Alignment(_))));
    }

    #[test]
    fn face_image_range_is_enforced() {
        let t = Tensor::<f64>::full(&[3, 4, 4], 1.5);
        assert!(FaceImage::from_tensor(t).is_err());
        let t = Tensor::<f64>::full(&[1, 4, 4], 0.0);
        assert!(FaceImage::from_tensor(t).is_err());
    }
}
