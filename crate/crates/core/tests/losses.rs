use lbgan_core::dataset::{AttentionMask, FaceImage};
use lbgan_core::losses::*;
use lbgan_nn::{Graph, ParamSet, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn normalizer_discriminator_loss_examples() {
    let v = d_n_loss(&[0.7, 0.2, 0.1], 0, &[0.2, 0.3, 0.5]).unwrap();
    assert!(close(v, -(0.7f64.ln() + 0.5f64.ln()), 1e-12) && close(v, 1.0498, 1e-4), "{v}");
    assert_eq!(d_n_loss(&[1.0, 0.0, 0.0], 0, &[0.0, 0.0, 1.0]).unwrap(), 0.0);
    let u = [1.0 / 3.0; 3];
    let v = d_n_loss(&u, 1, &u).unwrap();
    assert!(close(v, -2.0 * (1.0f64 / 3.0).ln(), 1e-12) && close(v, 2.1972, 1e-4));
    // The fake slot is not a valid identity label.
    assert!(d_n_loss(&u, 2, &u).is_err());
    assert!(d_n_loss(&[0.5, 0.6, 0.1], 0, &u).is_err());
}

#[test]
fn normalizer_generator_loss_examples() {
    assert!(close(g_n_loss(&[0.6, 0.3, 0.1], 0).unwrap(), 0.5108, 1e-4));
    assert_eq!(g_n_loss(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
    let capped = g_n_loss(&[0.0, 0.0, 1.0], 0).unwrap();
    assert!(close(capped, -(1e-12f64).ln(), 1e-9) && close(capped, 27.63, 1e-2));
}

#[test]
fn editor_losses_examples() {
    let h = [0.5, 0.25, 0.25];
    let pose: Vec<f64> = std::iter::once(0.5).chain(std::iter::repeat_n(0.5 / 12.0, 12)).collect();
    let fake = [0.25, 0.25, 0.5];
    let v = d_e_loss(&h, 0, &pose, 0, &fake).unwrap();
    assert!(close(v, 3.0 * 2f64.ln(), 1e-12) && close(v, 2.0794, 1e-4));
    let mut one_pose = vec![0.0; 13];
    one_pose[4] = 1.0;
    assert_eq!(d_e_loss(&[1.0, 0.0, 0.0], 0, &one_pose, 4, &[0.0, 0.0, 1.0]).unwrap(), 0.0);
    assert!(d_e_loss(&[0.0, 1.0, 0.0], 0, &one_pose, 0, &[1.0, 0.0, 0.0]).unwrap().is_finite());

    let mut p = vec![0.75 / 12.0; 13];
    p[6] = 0.25;
    let v = g_e_loss(&p, 6, &[0.5, 0.25, 0.25], 0).unwrap();
    assert!(close(v, -(0.25f64.ln() + 0.5f64.ln()), 1e-12) && close(v, 2.0794, 1e-4));
    assert_eq!(g_e_loss(&one_pose, 4, &[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
    assert!(g_e_loss(&one_pose, 4, &[0.0, 1.0, 0.0], 2).is_err());
}

fn mask_from(size: usize, bits: &[u8]) -> AttentionMask {
    AttentionMask::from_bits(size, bits.to_vec()).unwrap()
}

#[test]
fn attention_l2_examples() {
    let x = Tensor::<f64>::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let zero = Tensor::zeros(&[1, 2, 2]);
    let m = mask_from(2, &[1, 0, 0, 1]);
    let v = attention_l2_tensor(&x, &zero, &m).unwrap();
    assert!(close(v, 17f64.sqrt(), 1e-12) && close(v, 4.1231, 1e-4));
    assert_eq!(attention_l2_tensor(&x, &x, &m).unwrap(), 0.0);

    let mut bits = vec![0u8; 96 * 96];
    bits.iter_mut().step_by(10).take(850).for_each(|b| *b = 1);
    let m = mask_from(96, &bits);
    assert_eq!(m.count(), 850);
    let ones = Tensor::<f64>::full(&[1, 96, 96], 1.0);
    let v = attention_l2_tensor(&ones, &Tensor::zeros(&[1, 96, 96]), &m).unwrap();
    assert!(close(v, 850f64.sqrt(), 1e-10) && close(v, 29.1548, 1e-4));

    assert!(attention_l2_tensor(&x, &Tensor::zeros(&[1, 3, 3]), &m).is_err());
}

#[test]
fn csc_examples() {
    let (x, y) = (face(4, 1), face(4, 2));
    let m = AttentionMask::ones(4);
    assert_eq!(csc_loss(&x, &y, &m, 3, 5).unwrap(), 0.0);
    assert_eq!(csc_loss(&x, &x, &m, 5, 5).unwrap(), 0.0);
    assert_eq!(csc_loss(&x, &y, &m, 5, 5).unwrap(), attention_l2(&x, &y, &m).unwrap());
}

fn face(size: usize, seed: u64) -> FaceImage<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * size * size).map(|_| rng.random_range(-1.0..1.0)).collect();
    FaceImage::from_tensor(Tensor::new(vec![3, size, size], data).unwrap()).unwrap()
}

fn random_mask(size: usize, seed: u64) -> AttentionMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mask_from(size, &(0..size * size).map(|_| rng.random_range(0..2u8)).collect::<Vec<_>>())
}

#[test]
fn per_pixel_masked_l2_is_rms_over_masked_entries() {
    let x = FaceImage::from_tensor(Tensor::<f64>::full(&[3, 4, 4], 0.5)).unwrap();
    let y = FaceImage::from_tensor(Tensor::<f64>::full(&[3, 4, 4], 0.2)).unwrap();
    let m = random_mask(4, 3);
    assert!(close(per_pixel_masked_l2(&x, &y, &m).unwrap(), 0.3, 1e-12));
    assert_eq!(per_pixel_masked_l2(&x, &y, &AttentionMask::zeros(4)).unwrap(), 0.0);
}

fn two_leaf_params(a: &FaceImage<f64>, b: &FaceImage<f64>) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    p.push("x", a.tensor().clone().reshape(&[1, 3, 8, 8]).unwrap());
    p.push("x_hat", b.tensor().clone().reshape(&[1, 3, 8, 8]).unwrap());
    p
}

#[test]
fn attention_l2_gradient_matches_finite_differences() {
    let m = random_mask(8, 7);
    let params = two_leaf_params(&face(8, 1), &face(8, 2));
    let err = finite_difference_check(&params, 1e-5, usize::MAX, |g, b| {
        attention_l2_term(g, b.var(0), b.var(1), m.to_tensor())
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn csc_mismatch_has_exactly_zero_gradient() {
    let m = random_mask(8, 8);
    let params = two_leaf_params(&face(8, 3), &face(8, 4));
    let build = |g: &mut Graph<f64>, b: &lbgan_nn::BoundParams| csc_term(g, b.var(0), b.var(1), m.to_tensor(), &[2], &[9]);
    let mut g = Graph::new();
    let b = params.bind(&mut g, true);
    let v = build(&mut g, &b).unwrap();
    assert_eq!(g.item(v), 0.0);
    let mut grads = g.backward(v);
    for t in params.collect_grads(&b, &mut grads) {
        assert!(t.data().iter().all(|&d| d == 0.0));
    }
    assert_eq!(finite_difference_check(&params, 1e-5, usize::MAX, build).unwrap(), 0.0);
}

#[test]
fn d_n_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = ParamSet::new();
    // Logits, so that the probabilities stay valid under perturbation.
    for name in ["real", "fake"] {
        p.push(name, Tensor::new(vec![3, 4], (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap());
    }
    let err = finite_difference_check(&p, 1e-5, usize::MAX, |g, b| {
        let (r, f) = (g.softmax(b.var(0))?, g.softmax(b.var(1))?);
        d_n_term(g, r, &[0, 2, 1], f)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

/// Hand-computed two-sample batch through every generator term.
#[test]
fn total_generator_loss_matches_componentwise_oracle() {
    let ids = [0usize, 1];
    let poses = [6usize, 2];
    let c_star = [6usize, 9];
    let dn = [[0.6, 0.3, 0.1], [0.2, 0.5, 0.3]];
    let de_id = [[0.4, 0.4, 0.2], [0.1, 0.8, 0.1]];
    let mut de_pose = [[1.0 / 13.0; 13]; 2];
    de_pose[0] = [0.0; 13];
    de_pose[0][6] = 0.7;
    de_pose[0][0] = 0.3;
    let (x, x_hat, target) = (face(4, 10), face(4, 11), face(4, 12));
    let (mx, mt) = (random_mask(4, 13), random_mask(4, 14));
    let w = LossWeights { lambda_rec: 3.0, lambda_csc: 7.0 };

    // Oracle in plain arithmetic.
    let nll = |p: f64| -p.max(1e-12).ln();
    let masked = |a: &[f64], b: &[f64], m: &AttentionMask| -> f64 {
        let s2 = 16;
        (0..a.len()).filter(|i| m.bits()[i % s2] == 1).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
    };
    let g_n = (nll(dn[0][0]) + nll(dn[1][1])) / 2.0;
    let g_e_pose = (nll(de_pose[0][6]) + nll(de_pose[1][9])) / 2.0;
    let g_e_id = (nll(de_id[0][0]) + nll(de_id[1][1])) / 2.0;
    let (xd, hd, td) = (x.tensor().data(), x_hat.tensor().data(), target.tensor().data());
    // Sample 1 uses the same images as sample 0.
    let rec = masked(td, hd, &mt);
    let csc = masked(xd, hd, &mx) / 2.0;
    let total = g_n + g_e_pose + g_e_id + w.lambda_rec * rec + w.lambda_csc * csc;

    let mut g = Graph::new();
    let mat = |g: &mut Graph<f64>, rows: Vec<Vec<f64>>| {
        let k = rows[0].len();
        g.input(Tensor::new(vec![rows.len(), k], rows.concat()).unwrap())
    };
    let dn_v = mat(&mut g, dn.iter().map(|r| r.to_vec()).collect());
    let id_v = mat(&mut g, de_id.iter().map(|r| r.to_vec()).collect());
    let pose_v = mat(&mut g, de_pose.iter().map(|r| r.to_vec()).collect());
    let pair = |img: &FaceImage<f64>| Tensor::stack(&[img.tensor(), img.tensor()]).unwrap();
    let stack2 = |m: &AttentionMask| {
        let t = m.to_tensor::<f64>().reshape(&[1, 4, 4]).unwrap();
        Tensor::stack(&[&t, &t]).unwrap()
    };
    let xv = g.input(pair(&x));
    let hv = g.input(pair(&x_hat));
    let tv = g.input(pair(&target));
    let inputs = GeneratorLossInputs {
        dn_probs_fake: dn_v,
        de_id_fake: id_v,
        de_pose_fake: pose_v,
        ids: &ids,
        poses: &poses,
        c_star: &c_star,
        x: xv,
        x_hat: hv,
        input_masks: Some(stack2(&mx)),
        paired_target: Some((tv, stack2(&mt))),
    };
    let (v, report) = total_generator_loss(&mut g, inputs, &w).unwrap();
    for (got, want) in [
        (report.g_n, g_n),
        (report.g_e_pose, g_e_pose),
        (report.g_e_id, g_e_id),
        (report.rec, rec),
        (report.csc, csc),
        (report.total_g, total),
        (g.item(v), total),
    ] {
        assert!(close(got, want, 1e-10), "{got} vs {want}");
    }
    assert!(close(report.generator_sum(&w), report.total_g, 1e-10));
}

#[test]
fn zero_weights_and_missing_target_reduce_to_adversarial_terms() {
    let mut g = Graph::new();
    let p = g.input(Tensor::new(vec![1, 3], vec![0.5, 0.25, 0.25]).unwrap());
    let mut pose = vec![0.0; 13];
    pose[3] = 1.0;
    let pv = g.input(Tensor::new(vec![1, 13], pose).unwrap());
    let (x, y) = (face(4, 1), face(4, 2));
    let xv = g.input(x.tensor().clone().reshape(&[1, 3, 4, 4]).unwrap());
    let yv = g.input(y.tensor().clone().reshape(&[1, 3, 4, 4]).unwrap());
    let mk = || AttentionMask::ones(4).to_tensor::<f64>();
    let make = |target| GeneratorLossInputs {
        dn_probs_fake: p,
        de_id_fake: p,
        de_pose_fake: pv,
        ids: &[0],
        poses: &[3],
        c_star: &[3],
        x: xv,
        x_hat: yv,
        input_masks: Some(mk()),
        paired_target: target,
    };
    let (_, r) = total_generator_loss(&mut g, make(None), &LossWeights { lambda_rec: 5.0, lambda_csc: 0.0 }).unwrap();
    assert_eq!(r.rec, 0.0);
    assert!(r.csc > 0.0);
    assert!(close(r.total_g, 2.0 * 2f64.ln(), 1e-12));
    let (_, r) = total_generator_loss(&mut g, make(Some((xv, mk()))), &LossWeights { lambda_rec: 0.0, lambda_csc: 0.0 }).unwrap();
    assert!(r.rec > 0.0);
    assert!(close(r.total_g, r.g_n + r.g_e_pose + r.g_e_id, 1e-15));
    let mut no_csc = make(None);
    no_csc.input_masks = None;
    let (_, r) = total_generator_loss(&mut g, no_csc, &LossWeights::default()).unwrap();
    assert_eq!((r.rec, r.csc), (0.0, 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_l2_properties(a in any::<u64>(), b in any::<u64>(), ms in any::<u64>(), pix in 0usize..48, delta in -1.0f64..1.0) {
        let (x, y, m) = (face(4, a), face(4, b), random_mask(4, ms));
        let v = attention_l2(&x, &y, &m).unwrap();
        prop_assert!(v >= 0.0);
        prop_assert_eq!(v, attention_l2(&y, &x, &m).unwrap());
        prop_assert_eq!(attention_l2(&x, &x, &m).unwrap(), 0.0);

        // Perturbing an unmasked pixel changes neither value nor gradient.
        let (c, r) = (pix / 16, pix % 16);
        if m.bits()[r] == 0 {
            let mut t = y.tensor().clone();
            t.data_mut()[c * 16 + r] = (t.data()[c * 16 + r] + delta).clamp(-1.0, 1.0);
            let y2 = FaceImage::from_tensor(t).unwrap();
            prop_assert_eq!(attention_l2(&x, &y2, &m).unwrap(), v);
            let grad = |yy: &FaceImage<f64>| {
                let mut g = Graph::new();
                let xv = g.input(x.tensor().clone().reshape(&[1, 3, 4, 4]).unwrap());
                let yv = g.leaf(yy.tensor().clone().reshape(&[1, 3, 4, 4]).unwrap(), true);
                let l = attention_l2_term(&mut g, xv, yv, m.to_tensor()).unwrap();
                g.backward(l).get(yv).cloned().unwrap()
            };
            prop_assert_eq!(grad(&y), grad(&y2));
        }
    }

    #[test]
    fn adversarial_losses_are_finite_and_non_negative(raw in proptest::collection::vec(0.0f64..1.0, 3), hot in 0usize..2) {
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = if s > 0.0 { raw.iter().map(|v| v / s).collect() } else { vec![0.0, 0.0, 1.0] };
        let v = d_n_loss(&p, hot, &p).unwrap();
        prop_assert!(v.is_finite() && v >= 0.0);
        let v = g_n_loss(&p, hot).unwrap();
        prop_assert!(v.is_finite() && v >= 0.0);
        let mut one = vec![0.0; 3];
        one[hot] = 1.0;
        prop_assert_eq!(g_n_loss(&one, hot).unwrap(), 0.0);
    }
}
