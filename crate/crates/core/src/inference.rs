//! Synthesis with a frozen bundle: frontalization, rotation to any yaw in
//! [-90, 90], pose sweeps and identity morphs.

use lbgan_nn::{Graph, Scalar, Tensor};

use crate::dataset::{code_for_degrees, code_for_pose, preprocess, FaceImage, LandmarkSet, PoseLabel, RemoteCode, RgbImage};
use crate::error::{Error, Result};
use crate::networks::{code_tensor, decode_representation, extract_identity_representation, interpolate_identities};
use crate::training::ModelBundle;

/// Images per forward pass in the batched helpers.
const CHUNK: usize = 64;

#[derive(Clone, Debug)]
pub struct RotationRequest<T> {
    pub input: FaceImage<T>,
    /// When present the input is first aligned to the canonical landmark
    /// template.
    pub landmarks: Option<LandmarkSet>,
    pub target_degrees: f64,
}

impl<T: Scalar> RotationRequest<T> {
    pub fn new(input: FaceImage<T>, target_degrees: f64) -> Result<Self> {
        code_for_degrees(target_degrees)?;
        Ok(Self { input, landmarks: None, target_degrees })
    }
}

fn check<T: Scalar>(bundle: &ModelBundle<T>, x: &FaceImage<T>) -> Result<()> {
    let s = bundle.config.network.image_size;
    if x.size() != s {
        return Err(Error::Config(format!("image size {} does not match the model's {s}", x.size())));
    }
    Ok(())
}

fn stack<T: Scalar>(xs: &[FaceImage<T>]) -> Result<Tensor<T>> {
    Ok(Tensor::stack(&xs.iter().map(|x| x.tensor()).collect::<Vec<_>>())?)
}

fn unstack<T: Scalar>(t: &Tensor<T>) -> Result<Vec<FaceImage<T>>> {
    t.unstack().into_iter().map(FaceImage::from_tensor).collect()
}

/// G_N on a list of images.
pub fn frontalize_batch<T: Scalar>(bundle: &ModelBundle<T>, xs: &[FaceImage<T>]) -> Result<Vec<FaceImage<T>>> {
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(CHUNK) {
        chunk.iter().try_for_each(|x| check(bundle, x))?;
        let mut g = Graph::new();
        let p = bundle.gn.bind(&mut g, false);
        let x = g.input(stack(chunk)?);
        let y = bundle.gn.normalize(&mut g, &p, x)?;
        out.extend(unstack(g.value(y))?);
    }
    Ok(out)
}

/// Full pipeline `G_E(x, G_N(x), c)` with one code per image.
pub fn rotate_batch<T: Scalar>(bundle: &ModelBundle<T>, xs: &[FaceImage<T>], codes: &[RemoteCode]) -> Result<Vec<FaceImage<T>>> {
    if xs.len() != codes.len() {
        return Err(Error::InvalidInput(format!("{} images but {} codes", xs.len(), codes.len())));
    }
    let mut out = Vec::with_capacity(xs.len());
    for (chunk, cs) in xs.chunks(CHUNK).zip(codes.chunks(CHUNK)) {
        chunk.iter().try_for_each(|x| check(bundle, x))?;
        let mut g = Graph::new();
        let pn = bundle.gn.bind(&mut g, false);
        let pe = bundle.ge.bind(&mut g, false);
        let x = g.input(stack(chunk)?);
        let c = g.input(code_tensor(&cs.iter().collect::<Vec<_>>()));
        let xf = bundle.gn.normalize(&mut g, &pn, x)?;
        let y = bundle.ge.edit(&mut g, &pe, x, xf, c)?;
        out.extend(unstack(g.value(y))?);
    }
    Ok(out)
}

pub fn frontalize<T: Scalar>(bundle: &ModelBundle<T>, x: &FaceImage<T>) -> Result<FaceImage<T>> {
    Ok(frontalize_batch(bundle, std::slice::from_ref(x))?.remove(0))
}

pub fn rotate<T: Scalar>(bundle: &ModelBundle<T>, request: &RotationRequest<T>) -> Result<FaceImage<T>> {
    let code = code_for_degrees(request.target_degrees)?;
    let x = match &request.landmarks {
        Some(lm) => {
            let rgb = request.input.to_rgb();
            preprocess::<T>(&rgb, lm, bundle.config.network.image_size)?.0
        }
        None => request.input.clone(),
    };
    Ok(rotate_batch(bundle, &[x], &[code])?.remove(0))
}

/// Tiles laid out row-major without padding; every tile must be the same
/// size and every row the same length.
pub fn tile_grid<T: Scalar>(rows: &[Vec<FaceImage<T>>]) -> Result<RgbImage> {
    let cols = rows.first().map_or(0, |r| r.len());
    let size = rows.first().and_then(|r| r.first()).map(|x| x.size()).unwrap_or(0);
    if cols == 0 || rows.iter().any(|r| r.len() != cols || r.iter().any(|x| x.size() != size)) {
        return Err(Error::InvalidInput("grid rows must be non-empty, equally long, with equal tiles".into()));
    }
    let (w, h) = (cols * size, rows.len() * size);
    let mut data = vec![0u8; w * h * 3];
    for (ri, row) in rows.iter().enumerate() {
        for (ci, tile) in row.iter().enumerate() {
            let rgb = tile.to_rgb();
            for y in 0..size {
                let dst = ((ri * size + y) * w + ci * size) * 3;
                data[dst..dst + size * 3].copy_from_slice(&rgb.data[y * size * 3..(y + 1) * size * 3]);
            }
        }
    }
    RgbImage::new(w, h, data)
}

/// The input followed by its rotation to each target.
pub fn pose_sweep_grid<T: Scalar>(bundle: &ModelBundle<T>, x: &FaceImage<T>, targets: &[f64]) -> Result<RgbImage> {
    check(bundle, x)?;
    let codes = targets.iter().map(|&d| code_for_degrees(d)).collect::<Result<Vec<_>>>()?;
    let mut row = vec![x.clone()];
    row.extend(rotate_batch(bundle, &vec![x.clone(); codes.len()], &codes)?);
    tile_grid(&[row])
}

/// `x1`, then `n_steps` decodes of `(1 - a) r1 + a r2` for evenly spaced
/// `a = k / (n_steps - 1)`, then `x2`. Representations come from the editor
/// bottleneck with each input's own frontalization.
pub fn identity_morph_tiles<T: Scalar>(
    bundle: &ModelBundle<T>,
    x1: &FaceImage<T>,
    x2: &FaceImage<T>,
    n_steps: usize,
    code: Option<&RemoteCode>,
) -> Result<Vec<FaceImage<T>>> {
    if n_steps < 2 {
        return Err(Error::InvalidParameter(format!("n_steps must be at least 2, got {n_steps}")));
    }
    check(bundle, x1)?;
    check(bundle, x2)?;
    let frontal = code_for_pose(PoseLabel::FRONTAL);
    let code = code.unwrap_or(&frontal);
    let f = frontalize_batch(bundle, &[x1.clone(), x2.clone()])?;
    let r1 = extract_identity_representation(&bundle.ge, x1, &f[0])?;
    let r2 = extract_identity_representation(&bundle.ge, x2, &f[1])?;
    let mut tiles = vec![x1.clone()];
    for k in 0..n_steps {
        let alpha = k as f64 / (n_steps - 1) as f64;
        let r = interpolate_identities(&r1, &r2, alpha)?;
        tiles.push(decode_representation(&bundle.ge, &r, code)?);
    }
    tiles.push(x2.clone());
    Ok(tiles)
}

pub fn identity_morph_grid<T: Scalar>(
    bundle: &ModelBundle<T>,
    x1: &FaceImage<T>,
    x2: &FaceImage<T>,
    n_steps: usize,
    code: Option<&RemoteCode>,
) -> Result<RgbImage> {
    tile_grid(&[identity_morph_tiles(bundle, x1, x2, n_steps, code)?])
}

/// `prefix_+030.png` for whole degrees, `prefix_-007.5.png` otherwise.
pub fn rotation_filename(prefix: &str, degrees: f64) -> String {
    let sign = if degrees < 0.0 { '-' } else { '+' };
    let a = degrees.abs();
    let whole = a.trunc() as u32;
    if a.fract() == 0.0 {
        format!("{prefix}_{sign}{whole:03}.png")
    } else {
        let frac = format!("{:.6}", a.fract());
        let frac = frac.trim_start_matches('0').trim_end_matches('0');
        format!("{prefix}_{sign}{whole:03}{frac}.png")
    }
}
