use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use lbgan_nn::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::image::{FaceImage, LandmarkSet, RgbImage};
use crate::dataset::mask::{build_mask, AttentionMask};
use crate::dataset::pose::{PoseLabel, N_POSES};
use crate::dataset::synth::{mix_seed, render, SyntheticFaceSpec};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_DIR: &str = "images";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn salt(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0000,
            Split::Test => 0x7465_7374_0000_0000,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidParameter(format!("unknown split {other:?}"))),
        }
    }
}

/// Identity label in `0..n_id`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdentityLabel(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    /// Image path relative to the manifest's directory.
    pub path: String,
    pub id: IdentityLabel,
    pub pose_degrees: PoseLabel,
    pub landmarks: LandmarkSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub n_id: usize,
    pub image_size: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Config(format!("unsupported manifest version {}", self.version)));
        }
        for r in &self.records {
            if r.id.0 >= self.n_id {
                return Err(Error::Config(format!("record {} has id {} >= n_id {}", r.path, r.id.0, self.n_id)));
            }
            if !r.landmarks.within(self.image_size, self.image_size) {
                return Err(Error::Config(format!("record {} has landmarks outside the image", r.path)));
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = manifest_path(dir);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = manifest_path(dir);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Indices of records eligible under `restrict_frontal`.
    pub fn eligible(&self, restrict_frontal: bool) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| !restrict_frontal || self.records[i].pose_degrees.is_frontal())
            .collect()
    }

    /// Uniform sampling with replacement from all records, or only frontal
    /// ones when `restrict_frontal`.
    pub fn sample_indices<R: Rng>(&self, batch_size: usize, restrict_frontal: bool, rng: &mut R) -> Result<Vec<usize>> {
        let pool = self.eligible(restrict_frontal);
        if pool.is_empty() {
            return Err(Error::Sampling(if restrict_frontal {
                "no frontal records to sample from".into()
            } else {
                "manifest has no records".into()
            }));
        }
        Ok((0..batch_size).map(|_| pool[rng.random_range(0..pool.len())]).collect())
    }
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

/// Render every identity at every pose, write PNGs under `out_dir/images`
/// and the manifest at `out_dir/manifest.json`. Identities of different
/// splits are drawn from disjoint seed streams.
pub fn generate_synthetic_dataset(
    n_identities: usize,
    seed: u64,
    image_size: usize,
    split: Split,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_identities < 2 {
        return Err(Error::InvalidParameter("need at least 2 identities".into()));
    }
    if image_size < 8 {
        return Err(Error::InvalidParameter("image_size must be at least 8".into()));
    }
    let images = out_dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(n_identities * N_POSES);
    for id in 0..n_identities {
        let spec = SyntheticFaceSpec::from_seed(identity_seed(seed, split, id));
        for pose in PoseLabel::all() {
            let (img, landmarks) = render(&spec, pose, image_size);
            let name = format!("id{id:04}_yaw{:+03}.png", pose.degrees());
            img.write_png(&images.join(&name))?;
            records.push(Record {
                path: format!("{IMAGES_DIR}/{name}"),
                id: IdentityLabel(id),
                pose_degrees: pose,
                landmarks,
            });
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        n_id: n_identities,
        image_size,
        split,
        seed: Some(seed),
        records,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

pub fn identity_seed(seed: u64, split: Split, id: usize) -> u64 {
    mix_seed(mix_seed(seed, split.salt()), id as u64)
}

/// Manifest with its images decoded and masks precomputed.
#[derive(Clone, Debug)]
pub struct LoadedDataset<T> {
    pub manifest: DatasetManifest,
    pub images: Vec<FaceImage<T>>,
    pub masks: Vec<AttentionMask>,
    by_pair: HashMap<(usize, usize), usize>,
}

/// Batched view of sampled records.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    /// `[n, 3, size, size]`.
    pub images: Tensor<T>,
    pub ids: Vec<IdentityLabel>,
    pub poses: Vec<PoseLabel>,
    pub landmarks: Vec<LandmarkSet>,
}

impl<T: Scalar> LoadedDataset<T> {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let images = manifest
            .records
            .iter()
            .map(|r| {
                let path = dir.join(&r.path);
                let rgb = RgbImage::read_png(&path)?;
                if rgb.width != manifest.image_size || rgb.height != manifest.image_size {
                    return Err(Error::format(&path, format!("expected {0}x{0} pixels", manifest.image_size)));
                }
                FaceImage::from_rgb(&rgb)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(manifest, images)
    }

    pub fn from_parts(manifest: DatasetManifest, images: Vec<FaceImage<T>>) -> Result<Self> {
        manifest.validate()?;
        if images.len() != manifest.records.len() {
            return Err(Error::InvalidInput("one image per record required".into()));
        }
        let masks = manifest.records.iter().map(|r| build_mask(&r.landmarks, manifest.image_size)).collect();
        let by_pair = manifest
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.id.0, r.pose_degrees.index()), i))
            .collect();
        Ok(Self { manifest, images, masks, by_pair })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.manifest.image_size
    }

    pub fn n_id(&self) -> usize {
        self.manifest.n_id
    }

    pub fn record(&self, i: usize) -> &Record {
        &self.manifest.records[i]
    }

    /// Record index of `(identity, pose index)` if the dataset holds it.
    pub fn find(&self, id: IdentityLabel, pose_index: usize) -> Option<usize> {
        self.by_pair.get(&(id.0, pose_index)).copied()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch<T>> {
        let tensors: Vec<&Tensor<T>> = indices.iter().map(|&i| self.images[i].tensor()).collect();
        Ok(Batch {
            indices: indices.to_vec(),
            images: Tensor::stack(&tensors)?,
            ids: indices.iter().map(|&i| self.record(i).id).collect(),
            poses: indices.iter().map(|&i| self.record(i).pose_degrees).collect(),
            landmarks: indices.iter().map(|&i| self.record(i).landmarks).collect(),
        })
    }

    pub fn sample_batch<R: Rng>(&self, batch_size: usize, restrict_frontal: bool, rng: &mut R) -> Result<Batch<T>> {
        let idx = self.manifest.sample_indices(batch_size, restrict_frontal, rng)?;
        self.batch(&idx)
    }
}

/// Stack per-sample masks into a `[n, 1, size, size]` tensor.
pub fn stack_masks<T: Scalar>(masks: &[&AttentionMask]) -> Tensor<T> {
    let size = masks.first().map_or(0, |m| m.size());
    let mut data = Vec::with_capacity(masks.len() * size * size);
    for m in masks {
        data.extend(m.bits().iter().map(|&b| if b == 1 { T::one() } else { T::zero() }));
    }
    Tensor::new(vec![masks.len(), 1, size, size], data).expect("mask stack")
}
