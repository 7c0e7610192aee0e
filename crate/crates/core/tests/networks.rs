use lbgan_core::dataset::{code_for_pose, interpolate_codes, FaceImage, PoseLabel};
use lbgan_core::losses::finite_difference_check;
use lbgan_core::networks::*;
use lbgan_core::Error;
use lbgan_nn::{Graph, ParamSet, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> EncoderConfig {
    EncoderConfig { image_size: 16, base_channels: 4, n_blocks: 2, bottleneck_dim: 8 }
}

fn random_face(size: usize, seed: u64) -> FaceImage<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * size * size).map(|_| rng.random_range(-1.0..1.0)).collect();
    FaceImage::from_tensor(Tensor::new(vec![3, size, size], data).unwrap()).unwrap()
}

fn in_range(x: &FaceImage<f64>) -> bool {
    x.tensor().data().iter().all(|v| (-1.0..=1.0).contains(v))
}

#[test]
fn generators_preserve_shape_and_range() {
    for cfg in [EncoderConfig::paper(), EncoderConfig::desk(), tiny()] {
        let s = cfg.image_size;
        let gn = GeneratorParams::<f64>::new(GeneratorRole::Normalizer, cfg, 1).unwrap();
        let ge = GeneratorParams::<f64>::new(GeneratorRole::Editor, cfg, 2).unwrap();
        let x = random_face(s, 3);
        let f = normalizer_forward(&gn, &x).unwrap();
        assert_eq!(f.tensor().shape(), &[3, s, s]);
        assert!(in_range(&f));
        let y = editor_forward(&ge, &x, &f, &code_for_pose(PoseLabel::new(30).unwrap())).unwrap();
        assert_eq!(y.tensor().shape(), &[3, s, s]);
        assert!(in_range(&y));
    }
}

#[test]
fn round_trip_spatial_dims_for_supported_sizes() {
    for (size, blocks) in [(8, 1), (16, 2), (32, 3), (48, 4), (64, 4), (96, 5)] {
        let cfg = EncoderConfig { image_size: size, base_channels: 2, n_blocks: blocks, bottleneck_dim: 4 };
        let gn = GeneratorParams::<f32>::new(GeneratorRole::Normalizer, cfg, 0).unwrap();
        let x = random_face(size, 1).cast::<f32>();
        assert_eq!(normalizer_forward(&gn, &x).unwrap().size(), size);
    }
}

#[test]
fn invalid_configs_and_shapes_are_rejected() {
    let bad = EncoderConfig { image_size: 20, base_channels: 4, n_blocks: 3, bottleneck_dim: 8 };
    assert!(matches!(GeneratorParams::<f64>::new(GeneratorRole::Normalizer, bad, 0), Err(Error::Config(_))));
    let zero = EncoderConfig { bottleneck_dim: 0, ..tiny() };
    assert!(matches!(DiscriminatorParams::<f64>::new(zero, DiscriminatorHeadConfig::normalizer(2), 0), Err(Error::Config(_))));

    let gn = GeneratorParams::<f64>::new(GeneratorRole::Normalizer, tiny(), 0).unwrap();
    let wrong = random_face(32, 0);
    assert!(matches!(normalizer_forward(&gn, &wrong), Err(Error::Config(_))));
    let dn = DiscriminatorParams::<f64>::new(tiny(), DiscriminatorHeadConfig::normalizer(2), 0).unwrap();
    assert!(matches!(disc_n_forward(&dn, &wrong), Err(Error::Config(_))));
    let ge = GeneratorParams::<f64>::new(GeneratorRole::Editor, tiny(), 0).unwrap();
    let ok = random_face(16, 0);
    let c = code_for_pose(PoseLabel::FRONTAL);
    assert!(matches!(editor_forward(&ge, &ok, &wrong, &c), Err(Error::Config(_))));
    // The normalizer cannot be used as an editor.
    assert!(matches!(editor_forward(&gn, &ok, &ok, &c), Err(Error::Config(_))));
}

#[test]
fn forward_passes_are_pure() {
    let gn = GeneratorParams::<f64>::new(GeneratorRole::Normalizer, tiny(), 5).unwrap();
    let x = random_face(16, 9);
    assert_eq!(normalizer_forward(&gn, &x).unwrap(), normalizer_forward(&gn, &x).unwrap());
    let dn1 = DiscriminatorParams::<f64>::new(tiny(), DiscriminatorHeadConfig::normalizer(2), 7).unwrap();
    let dn2 = DiscriminatorParams::<f64>::new(tiny(), DiscriminatorHeadConfig::normalizer(2), 7).unwrap();
    let p = disc_n_forward(&dn1, &x).unwrap();
    assert_eq!(p.len(), 3);
    assert_eq!(p, disc_n_forward(&dn2, &x).unwrap());
}

#[test]
fn discriminator_heads_share_the_trunk() {
    let mut de = DiscriminatorParams::<f64>::new(tiny(), DiscriminatorHeadConfig::editor(4), 3).unwrap();
    let x = random_face(16, 4);
    let (id0, pose0) = disc_e_forward(&de, &x).unwrap();
    assert_eq!((id0.len(), pose0.len()), (5, 13));
    assert!((id0.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    assert!((pose0.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    // Slot 0 is the first trunk convolution.
    de.params.tensors_mut()[0].data_mut()[0] += 0.5;
    let (id1, pose1) = disc_e_forward(&de, &x).unwrap();
    assert_ne!(id0, id1);
    assert_ne!(pose0, pose1);
}

#[test]
fn representation_factorizes_the_editor() {
    let ge = GeneratorParams::<f64>::new(GeneratorRole::Editor, tiny(), 11).unwrap();
    let (x, xf) = (random_face(16, 1), random_face(16, 2));
    let rep = extract_identity_representation(&ge, &x, &xf).unwrap();
    assert_eq!(rep.vector.len(), tiny().bottleneck_dim);
    assert!(rep.vector.iter().all(|v| v.is_finite()));
    let half = interpolate_codes(&code_for_pose(PoseLabel::FRONTAL), &code_for_pose(PoseLabel::new(15).unwrap()), 0.5)
        .unwrap();
    for c in [code_for_pose(PoseLabel::new(-60).unwrap()), half] {
        assert_eq!(decode_representation(&ge, &rep, &c).unwrap(), editor_forward(&ge, &x, &xf, &c).unwrap());
    }
}

#[test]
fn identity_interpolation() {
    let r1 = IdentityRepresentation { vector: vec![1.0, -2.0, 0.5] };
    let r2 = IdentityRepresentation { vector: vec![3.0, 2.0, 0.1] };
    assert_eq!(interpolate_identities(&r1, &r2, 0.0).unwrap(), r1);
    assert_eq!(interpolate_identities(&r1, &r2, 1.0).unwrap(), r2);
    let mid = interpolate_identities(&r1, &r2, 0.5).unwrap();
    for ((m, a), b) in mid.vector.iter().zip(&r1.vector).zip(&r2.vector) {
        assert!((m - (a + b) / 2.0).abs() < 1e-15);
    }
    let short = IdentityRepresentation { vector: vec![1.0] };
    assert!(matches!(interpolate_identities(&r1, &short, 0.5), Err(Error::InvalidInput(_))));
    assert!(interpolate_identities(&r1, &r2, 1.5).is_err());
}

#[test]
fn loaded_parameters_must_match_the_architecture() {
    let gn = GeneratorParams::<f64>::new(GeneratorRole::Normalizer, tiny(), 0).unwrap();
    let other = EncoderConfig { bottleneck_dim: 9, ..tiny() };
    assert!(GeneratorParams::with_params(GeneratorRole::Normalizer, tiny(), gn.params.clone()).is_ok());
    assert!(matches!(
        GeneratorParams::with_params(GeneratorRole::Normalizer, other, gn.params.clone()),
        Err(Error::Config(_))
    ));
}

fn scaled(p: &ParamSet<f64>, k: f64) -> ParamSet<f64> {
    let mut p = p.clone();
    for t in p.tensors_mut() {
        *t = t.map(|v| v * k);
    }
    p
}

fn probe(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = g.shape(v).iter().product();
    let w = Tensor::new(g.shape(v).to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let m = g.mul_const(v, w).unwrap();
    let s = g.sum_per_sample(m);
    g.mean(s)
}

fn batch_input(g: &mut Graph<f64>, seeds: &[u64], channels: usize) -> Var {
    let mut data = Vec::new();
    for &s in seeds {
        for _ in 0..channels / 3 {
            data.extend_from_slice(random_face(16, s).tensor().data());
        }
    }
    g.input(Tensor::new(vec![seeds.len(), channels, 16, 16], data).unwrap())
}

#[test]
fn normalizer_gradients_match_finite_differences() {
    let gn = GeneratorParams::<f64>::new(GeneratorRole::Normalizer, tiny(), 21).unwrap();
    let params = gn.params.clone();
    let err = finite_difference_check(&params, 1e-5, 6, |g, b| {
        let x = batch_input(g, &[1, 2], 3);
        let y = gn.normalize(g, b, x)?;
        Ok(probe(g, y, 3))
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn editor_gradients_match_finite_differences() {
    let ge = GeneratorParams::<f64>::new(GeneratorRole::Editor, tiny(), 22).unwrap();
    let params = ge.params.clone();
    let err = finite_difference_check(&params, 1e-5, 6, |g, b| {
        let x = batch_input(g, &[4, 5], 3);
        let xf = batch_input(g, &[6, 7], 3);
        let codes = g.input(code_tensor(&[&code_for_pose(PoseLabel::new(45).unwrap()), &code_for_pose(PoseLabel::FRONTAL)]));
        let y = ge.edit(g, b, x, xf, codes)?;
        Ok(probe(g, y, 8))
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn discriminator_gradients_match_finite_differences() {
    let de = DiscriminatorParams::<f64>::new(tiny(), DiscriminatorHeadConfig::editor(3), 23).unwrap();
    let params = de.params.clone();
    let err = finite_difference_check(&params, 1e-5, 6, |g, b| {
        let x = batch_input(g, &[8, 9], 3);
        let out = de.forward(g, b, x)?;
        let a = g.pick_neg_log(out.identity, &[1, 3], 1e-12)?;
        let p = g.pick_neg_log(out.pose.unwrap(), &[0, 12], 1e-12)?;
        let s = g.add(a, p)?;
        Ok(g.mean(s))
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn outputs_stay_in_range_and_heads_normalize(seed in any::<u64>(), img in any::<u64>(), scale in 1.0f64..40.0) {
        let gn = GeneratorParams::<f64>::new(GeneratorRole::Normalizer, tiny(), seed).unwrap();
        let gn = GeneratorParams::with_params(GeneratorRole::Normalizer, tiny(), scaled(&gn.params, scale)).unwrap();
        let x = random_face(16, img);
        prop_assert!(in_range(&normalizer_forward(&gn, &x).unwrap()));
        let de = DiscriminatorParams::<f64>::new(tiny(), DiscriminatorHeadConfig::editor(5), seed).unwrap();
        let de = DiscriminatorParams::with_params(tiny(), DiscriminatorHeadConfig::editor(5), scaled(&de.params, scale)).unwrap();
        let (id, pose) = disc_e_forward(&de, &x).unwrap();
        prop_assert!((id.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        prop_assert!((pose.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        prop_assert!(id.iter().chain(&pose).all(|&p| p >= 0.0));
    }
}
