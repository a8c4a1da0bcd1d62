use aop_core::dataset::DiseaseLabel;
use aop_core::image::{Image, MaskImage};
use aop_core::losses::{self, SsimConfig};
use aop_core::metrics::{accuracy, adversarial_losses, confusion_matrix, f1_score, mae_loss, precision_recall_f1, ssim, ssim_loss};
use candle_core::{DType, Device, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn image_strategy(side: usize, channels: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0f32..=1f32, side * side * channels).prop_map(move |v| Image::new(side, side, channels, v).unwrap())
}

fn label_strategy() -> impl Strategy<Value = DiseaseLabel> {
    (0usize..8).prop_map(|i| DiseaseLabel::from_index(i).unwrap())
}

#[test]
fn constant_images_follow_the_closed_form() {
    let cfg = SsimConfig::default();
    let (a, b) = (0.3f64, 0.7f64);
    let c1 = (0.01f64 * 1.0).powi(2);
    // both variances and the covariance vanish, so the contrast term is C2/C2
    let expected = (2.0 * a * b + c1) / (a * a + b * b + c1);
    let x = Image::constant(16, 16, 3, a as f32);
    let y = Image::constant(16, 16, 3, b as f32);
    let got = ssim(&x, &y, &cfg).unwrap();
    // the pixels are stored as f32, so compare against the rounded inputs too
    let (af, bf) = (a as f32 as f64, b as f32 as f64);
    let expected_f32 = (2.0 * af * bf + c1) / (af * af + bf * bf + c1);
    assert!((got - expected_f32).abs() < 1e-9, "{got} vs {expected_f32}");
    assert!((got - expected).abs() < 1e-6);
    assert!((got - 0.7243).abs() < 2e-4);
    assert!((ssim_loss(&x, &y, &cfg).unwrap() - (1.0 - expected)).abs() < 1e-6);
    assert!((ssim_loss(&x, &y, &cfg).unwrap() - 0.2757).abs() < 2e-4);
}

/// Central finite differences of a scalar loss against autograd at sampled coordinates.
fn check_gradient(loss: impl Fn(&Tensor) -> Tensor, pred: Vec<f64>, dims: (usize, usize, usize, usize), seed: u64) {
    let dev = Device::Cpu;
    let var = Var::from_tensor(&Tensor::from_vec(pred.clone(), dims, &dev).unwrap()).unwrap();
    let grads = loss(var.as_tensor()).backward().unwrap();
    let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let eval = |v: &[f64]| loss(&Tensor::from_vec(v.to_vec(), dims, &dev).unwrap()).to_scalar::<f64>().unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    for _ in 0..40 {
        let i = rng.random_range(0..pred.len());
        let mut plus = pred.clone();
        let mut minus = pred.clone();
        plus[i] += h;
        minus[i] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let scale = numeric.abs().max(analytic[i].abs()).max(1e-6);
        let rel = (numeric - analytic[i]).abs() / scale;
        assert!(rel < 1e-4, "coordinate {i}: analytic {} numeric {numeric} rel {rel}", analytic[i]);
    }
}

fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>()).collect()
}

#[test]
fn ssim_loss_gradient_matches_finite_differences() {
    let dims = (1, 3, 16, 16);
    let n = 3 * 16 * 16;
    let dev = Device::Cpu;
    let target = Tensor::from_vec(random_vec(n, 1), dims, &dev).unwrap();
    let cfg = SsimConfig::default();
    check_gradient(|p| losses::ssim_loss(p, &target, &cfg).unwrap(), random_vec(n, 2), dims, 3);
    // and with respect to the second argument, through the symmetric form
    check_gradient(|p| losses::ssim(&target, p, &cfg).unwrap(), random_vec(n, 4), dims, 5);
}

#[test]
fn mae_gradient_matches_finite_differences() {
    let dims = (1, 3, 16, 16);
    let n = 3 * 16 * 16;
    let target = Tensor::from_vec(random_vec(n, 6), dims, &Device::Cpu).unwrap();
    check_gradient(|p| losses::mae(p, &target).unwrap(), random_vec(n, 7), dims, 8);
}

#[test]
fn tensor_and_image_ssim_agree() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let x = Image::from_fn(20, 18, 3, |_, _, _| rng.random());
    let y = Image::from_fn(20, 18, 3, |_, _, _| rng.random());
    let dev = Device::Cpu;
    let tx = x.to_tensor(&dev).unwrap().unsqueeze(0).unwrap();
    let ty = y.to_tensor(&dev).unwrap().unsqueeze(0).unwrap();
    let f32_value = losses::ssim(&tx, &ty, &SsimConfig::default()).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
    assert!((f32_value - ssim(&x, &y, &SsimConfig::default()).unwrap()).abs() < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn ssim_is_bounded_symmetric_and_maximal_on_identity(x in image_strategy(16, 3), y in image_strategy(16, 3)) {
        let cfg = SsimConfig::default();
        let s = ssim(&x, &y, &cfg).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(s, ssim(&y, &x, &cfg).unwrap());
        prop_assert!((ssim(&x, &x, &cfg).unwrap() - 1.0).abs() < 1e-6);
        let l = ssim_loss(&x, &y, &cfg).unwrap();
        prop_assert!((0.0..=2.0).contains(&l));
    }

    #[test]
    fn mae_is_nonnegative_and_zero_only_on_identity(x in image_strategy(4, 3), y in image_strategy(4, 3)) {
        let m = mae_loss(&x, &y).unwrap();
        prop_assert!(m >= 0.0);
        prop_assert_eq!(m == 0.0, x == y);
        prop_assert_eq!(mae_loss(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn f1_is_the_harmonic_mean(pred in prop::collection::vec(any::<bool>(), 36), truth in prop::collection::vec(any::<bool>(), 36)) {
        let p = MaskImage::from_fn(6, 6, |y, x| pred[y * 6 + x]);
        let t = MaskImage::from_fn(6, 6, |y, x| truth[y * 6 + x]);
        let s = precision_recall_f1(&p, &t).unwrap();
        let tp = pred.iter().zip(&truth).filter(|(a, b)| **a && **b).count() as f64;
        let pp = pred.iter().filter(|a| **a).count() as f64;
        let tt = truth.iter().filter(|a| **a).count() as f64;
        prop_assert_eq!(s.precision, if pp > 0.0 { tp / pp } else { 0.0 });
        prop_assert_eq!(s.recall, if tt > 0.0 { tp / tt } else { 0.0 });
        if s.precision > 0.0 && s.recall > 0.0 {
            prop_assert!((s.f1 - 2.0 / (1.0 / s.precision + 1.0 / s.recall)).abs() < 1e-12);
        }
        prop_assert_eq!(s.f1, f1_score(s.precision, s.recall));
    }

    #[test]
    fn confusion_rows_and_trace_match_direct_counts(pairs in prop::collection::vec((label_strategy(), label_strategy()), 1..60)) {
        let (preds, truths): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let c = confusion_matrix(&preds, &truths).unwrap();
        for label in DiseaseLabel::ALL {
            prop_assert_eq!(c.row_sum(label), truths.iter().filter(|t| **t == label).count() as u64);
        }
        let mut hits = 0;
        for i in 0..preds.len() {
            if preds[i] == truths[i] {
                hits += 1;
            }
        }
        let acc = accuracy(&preds, &truths).unwrap();
        prop_assert_eq!(acc, hits as f64 / preds.len() as f64);
        prop_assert!((c.accuracy() - acc).abs() < 1e-12);
    }

    #[test]
    fn permuted_predictions_score_by_direct_count(labels in prop::collection::vec(label_strategy(), 1..40), rot in 0usize..40) {
        let k = rot % labels.len();
        let mut shifted = labels.clone();
        shifted.rotate_left(k);
        let count = labels.iter().zip(&shifted).filter(|(a, b)| a == b).count();
        prop_assert_eq!(accuracy(&shifted, &labels).unwrap(), count as f64 / labels.len() as f64);
    }

    #[test]
    fn generator_term_exceeds_ln2_for_losing_fakes(fake in prop::collection::vec(0f64..=0.5, 1..30), real in prop::collection::vec(0f64..=1.0, 1..30)) {
        let (g, d) = adversarial_losses(&real, &fake).unwrap();
        prop_assert!(g >= 2f64.ln() - 1e-12);
        prop_assert!(d >= 0.0);
    }
}
