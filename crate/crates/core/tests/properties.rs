use ndarray::Array1;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use traj_diffuse::denoisers::dataset::{BlobDataset, BlobSpec};
use traj_diffuse::denoisers::toy::{ToyConfig, ToyDenoiser};
use traj_diffuse::denoisers::train::{noise_mse, train_toy_denoiser, TrainConfig};
use traj_diffuse::denoisers::GaussianVideoModel;
use traj_diffuse::eval::iou;
use traj_diffuse::masknorm::{efdm_match, RankMatchPolicy};
use traj_diffuse::masks::{masks_active, BBox};
use traj_diffuse::schedule::{coefficients_for, NoiseSchedule, ScheduleParams};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..20.0f64, 0.0..20.0f64, 0.5..10.0f64, 0.5..10.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    // For z ~ N(0, (1 - a) I) the score is -z / (1 - a), so one update gives
    // (1 - gamma) z + eta_k e, whose variance must stay at 1 - a.
    #[test]
    fn coefficients_preserve_gaussian_variance(ab in 0.0..0.999f64, gamma in 0.001..0.999f64) {
        let c = coefficients_for(ab, gamma).unwrap();
        let v = 1.0 - ab;
        let decay = 1.0 - c.eta_l / v;
        prop_assert!((decay * decay * v + c.eta_k * c.eta_k - v).abs() < 1e-12);
    }

    #[test]
    fn matching_ignores_the_order_of_the_source(v in prop::collection::vec(-5.0..5.0f64, 1..40), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let n = v.len();
        let a_m = Array1::from_iter((0..n).map(|i| (i as f64 * 0.37).sin()));
        let mut shuffled = v.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = efdm_match(a_m.view(), Array1::from(v).view(), RankMatchPolicy::StableIndex).unwrap();
        let b = efdm_match(a_m.view(), Array1::from(shuffled).view(), RankMatchPolicy::StableIndex).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn schedule_is_monotone(steps in 2usize..200, lo in 1e-5..1e-2f64, span in 1e-3..0.5f64) {
        let s = NoiseSchedule::linear(steps, lo, lo + span).unwrap();
        let ab = s.alpha_bars();
        prop_assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        prop_assert_eq!(s.alpha_bar_prev(0).unwrap(), 1.0);
    }

    #[test]
    fn masks_cover_exactly_the_frozen_steps(total in 1usize..100, frozen in 0usize..120) {
        let active = (0..total).filter(|&t| masks_active(t, total, frozen)).count();
        prop_assert_eq!(active, frozen.min(total));
        prop_assert!(!masks_active(total, total, frozen));
    }
}

#[test]
fn gaussian_samples_have_the_stated_moments() {
    let (r, s2) = (0.7, 2.0);
    let mean = ndarray::Array4::from_elem((6, 1, 40, 40), 0.5);
    let model = GaussianVideoModel::new(mean, r, s2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut m, mut var, mut lag, mut n) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..50 {
        let d = model.sample(&mut rng) - 0.5;
        m += d.sum();
        var += d.mapv(|v| v * v).sum();
        n += d.len() as f64;
        lag += (&d.slice(ndarray::s![1.., .., .., ..]) * &d.slice(ndarray::s![..-1, .., .., ..])).sum();
    }
    let (m, var) = (m / n, var / n);
    let lag = lag / (n * 5.0 / 6.0) / var;
    assert!(m.abs() < 0.02, "{m}");
    assert!((var / s2 - 1.0).abs() < 0.02, "{var}");
    assert!((lag - r).abs() < 0.02, "{lag}");
}

#[test]
fn a_short_training_run_beats_the_untrained_model() {
    let spec = BlobSpec::default();
    let data = BlobDataset::generate(spec, 48, 3).unwrap();
    let schedule = ScheduleParams::toy().build().unwrap();
    let mut model = ToyDenoiser::new(ToyConfig::default(), &schedule, 9).unwrap();
    let before = noise_mse(&model, &data, 64, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    train_toy_denoiser(&mut model, &data, &cfg).unwrap();
    let after = noise_mse(&model, &data, 64, 1).unwrap();
    assert!(after < 0.9 * before, "{before} -> {after}");
}
