use mcdm::diffusion::{self, make_schedule, ScheduleKind};
use mcdm::evalmetrics::{self, FeatureSet, ScoredLabels};
use mcdm::features::cosine_distance;
use mcdm::losses::{total_loss, TrainingConfig};
use mcdm::masks::{self, brush_walk, generate_random_mask, Mask, MaskGenParams};
use mcdm::{seed, ImageTensor};
use proptest::prelude::*;

fn vec_pair(len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-100.0..100.0f64, len),
        prop::collection::vec(-100.0..100.0f64, len),
    )
}

fn nonzero(v: &[f64]) -> bool {
    v.iter().any(|x| x.abs() > 1e-3)
}

fn image_and_mask() -> impl Strategy<Value = (ImageTensor, Mask)> {
    (1usize..4, 1usize..12, 1usize..12).prop_flat_map(|(c, h, w)| {
        (
            prop::collection::vec(-1.0..1.0f64, c * h * w),
            prop::collection::vec(0u8..2, h * w),
        )
            .prop_map(move |(data, cells)| {
                (
                    ImageTensor::from_vec(c, h, w, data).unwrap(),
                    Mask::from_cells(h, w, cells).unwrap(),
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_symmetric_and_bounded((u, v) in (1usize..32).prop_flat_map(vec_pair)) {
        prop_assume!(nonzero(&u) && nonzero(&v));
        let d = cosine_distance(&u, &v).unwrap();
        prop_assert_eq!(d, cosine_distance(&v, &u).unwrap());
        prop_assert!((0.0..=2.0).contains(&d));
    }

    #[test]
    fn cosine_power_of_two_scaling_is_exact(
        (u, v) in (1usize..32).prop_flat_map(vec_pair),
        ea in -20i32..20,
        eb in -20i32..20,
    ) {
        prop_assume!(nonzero(&u) && nonzero(&v));
        let (a, b) = (2f64.powi(ea), 2f64.powi(eb));
        let au: Vec<f64> = u.iter().map(|x| a * x).collect();
        let bv: Vec<f64> = v.iter().map(|x| b * x).collect();
        prop_assert_eq!(cosine_distance(&au, &bv).unwrap(), cosine_distance(&u, &v).unwrap());
    }

    #[test]
    fn cosine_positive_scaling((u, v) in (1usize..32).prop_flat_map(vec_pair), a in 1e-3..1e3f64, b in 1e-3..1e3f64) {
        prop_assume!(nonzero(&u) && nonzero(&v));
        let au: Vec<f64> = u.iter().map(|x| a * x).collect();
        let bv: Vec<f64> = v.iter().map(|x| b * x).collect();
        let diff = (cosine_distance(&au, &bv).unwrap() - cosine_distance(&u, &v).unwrap()).abs();
        prop_assert!(diff < 1e-12);
    }

    #[test]
    fn auc_invariant_under_monotone_transform(
        data in prop::collection::vec((0u32..10, 0u8..2), 2..64),
        shift in -5.0..5.0f64,
        scale in 0.1..10.0f64,
    ) {
        let labels: Vec<u8> = data.iter().map(|d| d.1).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let scores: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
        let base = ScoredLabels::new(scores.clone(), labels.clone()).unwrap();
        let moved: Vec<f64> = scores.iter().map(|s| (scale * s + shift).exp()).collect();
        let moved = ScoredLabels::new(moved, labels).unwrap();
        prop_assert_eq!(evalmetrics::auc(&base), evalmetrics::auc(&moved));
    }

    #[test]
    fn auc_label_flip(data in prop::collection::vec((0u32..6, 0u8..2), 2..64)) {
        let labels: Vec<u8> = data.iter().map(|d| d.1).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
        let pairs = pos * (labels.len() as f64 - pos);
        let s = ScoredLabels::new(data.iter().map(|d| d.0 as f64).collect(), labels).unwrap();
        let u = evalmetrics::mann_whitney_u(&s);
        prop_assert_eq!(evalmetrics::mann_whitney_u(&s.flipped()), pairs - u);
        let a = evalmetrics::auc(&s);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((evalmetrics::auc(&s.flipped()) - (1.0 - a)).abs() <= f64::EPSILON);
    }

    #[test]
    fn fid_symmetric(seed_a in any::<u64>(), seed_b in any::<u64>(), dim in 1usize..6) {
        let set = |s: u64| {
            let t = ImageTensor::standard_normal(1, 20, dim, s);
            FeatureSet::new(t.as_slice().chunks(dim).map(<[f64]>::to_vec).collect()).unwrap()
        };
        let (a, b) = (set(seed_a), set(seed_b));
        let ab = evalmetrics::fid(&a, &b, 1e-6).unwrap();
        let ba = evalmetrics::fid(&b, &a, 1e-6).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8);
        prop_assert!(evalmetrics::fid(&a, &a, 1e-6).unwrap() <= 1e-6);
    }

    #[test]
    fn masks_binary_deterministic_and_bounded(s in any::<u64>(), side in 8usize..48) {
        let params = MaskGenParams::for_image(side, side, s);
        let m = generate_random_mask(&params).unwrap();
        prop_assert_eq!(&m, &generate_random_mask(&params).unwrap());
        prop_assert!(m.cells().iter().all(|&c| c <= 1));
        let cov = m.coverage();
        prop_assert!(cov >= params.coverage_bounds.0 && cov <= params.coverage_bounds.1);
    }

    #[test]
    fn mask_strokes_only_add_cells(s in any::<u64>(), side in 8usize..40, angle in 0.0..=std::f64::consts::FRAC_PI_2) {
        let params = MaskGenParams { max_angle: angle, ..MaskGenParams::for_image(side, side, s) };
        let mut rng = seed::rng(s);
        let mut before = Mask::zeros(side, side);
        masks::fill_square(&mut before, 0, 0, side / 3);
        let mut after = before.clone();
        let path = brush_walk(&mut after, (side as f64 / 2.0, 0.0), &params, &mut rng);
        prop_assert!(path.len() <= params.max_strokes + 1);
        prop_assert!(before.cells().iter().zip(after.cells()).all(|(b, a)| a >= b));
        let with_square = masks::add_random_square(&after, params.square_side_bounds, &mut rng).unwrap();
        prop_assert!(after.cells().iter().zip(with_square.cells()).all(|(b, a)| a >= b));
    }

    #[test]
    fn mask_rle_roundtrip(h in 1usize..20, w in 1usize..20, cells in prop::collection::vec(0u8..2, 400)) {
        let m = Mask::from_cells(h, w, cells[..h * w].to_vec()).unwrap();
        prop_assert_eq!(Mask::from_rle(&m.to_rle()).unwrap(), m);
    }

    #[test]
    fn combine_preserves_outside((x0, mask) in image_and_mask(), t in 1usize..=100, s in any::<u64>()) {
        let sched = make_schedule(100, ScheduleKind::Cosine, 1e-4, 0.999).unwrap();
        let (c, h, w) = x0.shape();
        let eps = ImageTensor::standard_normal(c, h, w, s);
        let xt = diffusion::make_xt(&x0, &mask, t, &eps, &sched).unwrap();
        prop_assert_eq!(evalmetrics::outside_mask_error(&x0, &xt, &mask).unwrap(), 0.0);
        let c0 = diffusion::make_condition(&x0, &mask, s).unwrap();
        prop_assert_eq!(evalmetrics::outside_mask_error(&x0, &c0, &mask).unwrap(), 0.0);
        let est = diffusion::estimate_x0(&xt, &eps, t, &sched, &mask, &x0).unwrap();
        prop_assert_eq!(evalmetrics::outside_mask_error(&x0, &est, &mask).unwrap(), 0.0);
        let worst = est.as_slice().iter().zip(x0.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(worst <= 1e-5);
    }

    #[test]
    fn schedules_monotone(steps in 1usize..400, lo in 1e-5..0.01f64, span in 0.0..0.5f64, cosine in any::<bool>()) {
        let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
        let s = make_schedule(steps, kind, lo, lo + span).unwrap();
        prop_assert_eq!(s.alpha_bars().len(), steps);
        prop_assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
        prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        prop_assert_eq!(s.alpha_bar(1), s.alpha(1));
    }

    #[test]
    fn total_loss_is_linear_in_lambdas(lp in 0.0..10.0f64, lf in 0.0..2.0f64, l1 in 0.0..4.0f64, l2 in 0.001..4.0f64) {
        let cfg = TrainingConfig { lambda1: l1, lambda2: l2, ..TrainingConfig::default() };
        let doubled = TrainingConfig { lambda2: 2.0 * l2, ..cfg.clone() };
        let base = total_loss(lp, lf, &cfg).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert_eq!(base, l1 * lp + l2 * lf);
        prop_assert_eq!(total_loss(0.0, lf, &doubled).unwrap(), 2.0 * total_loss(0.0, lf, &cfg).unwrap());
        prop_assert_eq!(total_loss(lp, 0.0, &cfg).unwrap(), l1 * lp);
        prop_assert_eq!(total_loss(0.0, lf, &cfg).unwrap(), l2 * lf);
    }
}
