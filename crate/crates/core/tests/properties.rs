use nalgebra::DMatrix;
use proptest::prelude::*;

use neurodec::eval::pairwise_accuracy;
use neurodec::model::BetaMatrix;
use neurodec::ndm::NdmMatrix;
use neurodec::ridge::{fit_ridge, predict};
use neurodec::roi::{apply_mask, named_mask, AtlasAssignment, Hemisphere, RoiName};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn system() -> impl Strategy<Value = (DMatrix<f64>, DMatrix<f64>)> {
    (4usize..30, 2usize..60, 1usize..5).prop_flat_map(|(n, p, d)| (matrix(n, p), matrix(n, d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn larger_alpha_never_grows_weights((x, y) in system(), lo in 0usize..4) {
        let a = fit_ridge(&x, &y, 10f64.powi(lo as i32 + 3)).unwrap();
        let b = fit_ridge(&x, &y, 10f64.powi(lo as i32 + 4)).unwrap();
        prop_assert!(b.weights.norm() <= a.weights.norm() * (1.0 + 1e-12));
    }

    #[test]
    fn ridge_beats_perturbed_weights((x, y) in system(), eps in -1e-3f64..1e-3, alpha in 1e3f64..1e5) {
        let d = fit_ridge(&x, &y, alpha).unwrap();
        let loss = |w: &DMatrix<f64>| {
            let mut m = d.clone();
            m.weights = w.clone();
            let r = predict(&m, &x).unwrap() - &y;
            r.norm_squared() + alpha * w.norm_squared()
        };
        let base = loss(&d.weights);
        let shifted = d.weights.map(|v| v + eps);
        prop_assert!(loss(&shifted) >= base - 1e-9 * base.max(1.0));
    }

    #[test]
    fn pairwise_accuracy_ignores_positive_row_scale(
        (p, t) in (2usize..12, 1usize..6).prop_flat_map(|(n, d)| (matrix(n, d), matrix(n, d))),
        exps in prop::collection::vec(-30i32..30, 12),
    ) {
        prop_assume!(p.row_iter().chain(t.row_iter()).all(|r| r.norm() > 1e-9));
        let base = pairwise_accuracy(&p, &t).unwrap();
        let mut scaled = p.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= 2f64.powi(exps[i]);
        }
        prop_assert_eq!(pairwise_accuracy(&scaled, &t).unwrap(), base);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn masking_twice_changes_nothing(labels in prop::collection::vec((any::<bool>(), 1u32..76), 10..80)) {
        let mut atlas = AtlasAssignment::default();
        for (v, (left, id)) in labels.iter().enumerate() {
            atlas.insert(v as u32 * 3, if *left { Hemisphere::L } else { Hemisphere::R }, *id);
        }
        let ids: Vec<u32> = (0..labels.len() as u32).map(|v| v * 3).collect();
        let values = DMatrix::from_fn(3, ids.len(), |r, c| (r * 100 + c) as f32);
        let b = BetaMatrix::new(values, vec!["a".into(), "b".into(), "c".into()], ids).unwrap();
        for roi in RoiName::NAMED {
            let Ok(mask) = named_mask(roi, &atlas) else { continue };
            let once = apply_mask(&b, &mask).unwrap();
            let twice = apply_mask(&once, &mask).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.voxel_ids().windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn ndm_bytes_round_trip(
        rows in 0usize..6,
        cols in 0usize..6,
        named in any::<bool>(),
        seed in any::<u32>(),
    ) {
        let data: Vec<f32> = (0..rows * cols).map(|i| (i as f32 - 7.5) * (seed % 97) as f32 / 3.0).collect();
        let ids = if named { (0..rows).map(|r| format!("stim-{r}")).collect() } else { vec![] };
        let m = NdmMatrix::new(rows, cols, data, ids).unwrap();
        let mut bytes = vec![];
        m.write_to(&mut bytes).unwrap();
        prop_assert_eq!(NdmMatrix::from_bytes(&bytes).unwrap(), m);
    }
}
