use lbgan_core::dataset::{code_for_degrees, make_remote_code, render, FaceImage, PoseLabel, SyntheticFaceSpec};
use lbgan_core::inference::*;
use lbgan_core::networks::{
    decode_representation, editor_forward, extract_identity_representation, normalizer_forward, EncoderConfig,
};
use lbgan_core::training::{ModelBundle, TrainConfig};
use lbgan_core::Error;

fn bundle() -> ModelBundle<f64> {
    let cfg = TrainConfig {
        network: EncoderConfig { image_size: 16, base_channels: 4, n_blocks: 2, bottleneck_dim: 8 },
        seed: 5,
        ..TrainConfig::desk()
    };
    ModelBundle::new(cfg, 3).unwrap()
}

fn face(seed: u64, deg: i32) -> FaceImage<f64> {
    FaceImage::from_rgb(&render(&SyntheticFaceSpec::from_seed(seed), PoseLabel::new(deg).unwrap(), 16).0).unwrap()
}

fn max_diff(a: &FaceImage<f64>, b: &FaceImage<f64>) -> f64 {
    a.tensor().data().iter().zip(b.tensor().data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn on_grid_rotation_equals_the_editor_forward() {
    let b = bundle();
    let x = face(1, 45);
    for deg in [-90.0, 0.0, 30.0, 75.0] {
        let y = rotate(&b, &RotationRequest::new(x.clone(), deg).unwrap()).unwrap();
        let xf = normalizer_forward(&b.gn, &x).unwrap();
        let idx = lbgan_core::dataset::pose_to_index(deg as i32).unwrap();
        let direct = editor_forward(&b.ge, &x, &xf, &make_remote_code(idx).unwrap()).unwrap();
        assert_eq!(y, direct, "{deg}");
    }
}

#[test]
fn off_grid_rotation_uses_the_blended_code() {
    let b = bundle();
    let x = face(2, 0);
    let y = rotate(&b, &RotationRequest::new(x.clone(), 7.5).unwrap()).unwrap();
    let code = code_for_degrees(7.5).unwrap();
    let w = code.weights();
    assert_eq!((w[6], w[7]), (0.5, 0.5));
    assert_eq!(w.iter().filter(|&&v| v != 0.0).count(), 2);
    let direct = editor_forward(&b.ge, &x, &normalizer_forward(&b.gn, &x).unwrap(), &code).unwrap();
    assert_eq!(y, direct);
    let on_grid = rotate(&b, &RotationRequest::new(x, 0.0).unwrap()).unwrap();
    assert!(max_diff(&y, &on_grid) > 0.0);
}

#[test]
fn out_of_range_targets_are_invalid_requests() {
    for deg in [95.0, -90.5, f64::NAN] {
        assert!(matches!(RotationRequest::new(face(1, 0), deg), Err(Error::InvalidRequest(_))));
    }
}

#[test]
fn inference_leaves_the_bundle_untouched() {
    let b = bundle();
    let before = b.digests();
    let x = face(3, -30);
    frontalize(&b, &x).unwrap();
    rotate(&b, &RotationRequest::new(x.clone(), 15.0).unwrap()).unwrap();
    identity_morph_tiles(&b, &x, &face(4, 0), 3, None).unwrap();
    assert_eq!(b.digests(), before);
    assert_eq!(frontalize(&b, &x).unwrap(), frontalize(&b, &x).unwrap());
}

#[test]
fn frontalize_is_the_normalizer() {
    let b = bundle();
    let x = face(6, 60);
    assert_eq!(frontalize(&b, &x).unwrap(), normalizer_forward(&b.gn, &x).unwrap());
    assert!(frontalize(&b, &x).unwrap().tensor().data().iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn batched_and_single_rotations_agree() {
    let b = bundle();
    let xs: Vec<_> = (0..5).map(|i| face(i, 15 * (i as i32 - 2))).collect();
    let codes: Vec<_> = (0..5).map(|i| make_remote_code(i * 3).unwrap()).collect();
    let batch = rotate_batch(&b, &xs, &codes).unwrap();
    for ((x, c), y) in xs.iter().zip(&codes).zip(&batch) {
        let single = rotate_batch(&b, std::slice::from_ref(x), std::slice::from_ref(c)).unwrap();
        assert!(max_diff(&single[0], y) < 1e-12);
    }
    assert!(matches!(rotate_batch(&b, &xs, &codes[..2]), Err(Error::InvalidInput(_))));
}

#[test]
fn sweep_grids_have_one_tile_per_target_plus_input() {
    let b = bundle();
    let x = face(1, 0);
    let all: Vec<f64> = (-6..=6).map(|k| 15.0 * k as f64).collect();
    let g = pose_sweep_grid(&b, &x, &all).unwrap();
    assert_eq!((g.width, g.height), (14 * 16, 16));
    let single = pose_sweep_grid(&b, &x, &[]).unwrap();
    assert_eq!((single.width, single.height), (16, 16));
    assert_eq!(single.data, x.to_rgb().data);
    assert!(matches!(pose_sweep_grid(&b, &x, &[100.0]), Err(Error::InvalidRequest(_))));
}

#[test]
fn morph_endpoints_decode_the_unmixed_representations() {
    let b = bundle();
    let (x1, x2) = (face(1, 30), face(2, -45));
    let tiles = identity_morph_tiles(&b, &x1, &x2, 4, None).unwrap();
    assert_eq!(tiles.len(), 6);
    assert_eq!(tiles[0], x1);
    assert_eq!(tiles[5], x2);
    let frontal = make_remote_code(6).unwrap();
    let r1 = extract_identity_representation(&b.ge, &x1, &normalizer_forward(&b.gn, &x1).unwrap()).unwrap();
    let r2 = extract_identity_representation(&b.ge, &x2, &normalizer_forward(&b.gn, &x2).unwrap()).unwrap();
    assert_eq!(tiles[1], decode_representation(&b.ge, &r1, &frontal).unwrap());
    assert_eq!(tiles[4], decode_representation(&b.ge, &r2, &frontal).unwrap());
    assert!(max_diff(&tiles[2], &tiles[1]) > 0.0);

    let same = identity_morph_tiles(&b, &x1, &x1, 3, None).unwrap();
    assert_eq!(same[1], same[2]);
    assert_eq!(same[2], same[3]);
    assert!(matches!(identity_morph_tiles(&b, &x1, &x2, 1, None), Err(Error::InvalidParameter(_))));
    let grid = identity_morph_grid(&b, &x1, &x2, 2, None).unwrap();
    assert_eq!((grid.width, grid.height), (4 * 16, 16));
}

#[test]
fn rotation_filenames_encode_signed_degrees() {
    assert_eq!(rotation_filename("out", 30.0), "out_+030.png");
    assert_eq!(rotation_filename("out", -7.5), "out_-007.5.png");
    assert_eq!(rotation_filename("out", 0.0), "out_+000.png");
    assert_eq!(rotation_filename("face", -90.0), "face_-090.png");
    assert_eq!(rotation_filename("out", 22.5), "out_+022.5.png");
}

#[test]
fn mismatched_image_sizes_are_rejected() {
    let b = bundle();
    let big = FaceImage::from_rgb(&render(&SyntheticFaceSpec::from_seed(1), PoseLabel::FRONTAL, 32).0).unwrap();
    assert!(matches!(frontalize(&b, &big), Err(Error::Config(_))));
}
