use glimpse::keyframe::{
    blur_stats_from_variances, laplacian_variance, select_blur_variances, select_centroid,
    CentroidMetric, GrayFrame,
};
use glimpse::tensor::Tensor;
use proptest::prelude::*;

fn variances() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..500.0, 1..8)
}

proptest! {
    #[test]
    fn blur_index_is_in_window(v in variances(), t in 0.0f64..500.0) {
        let c = select_blur_variances(&v, t);
        prop_assert!(c.index < v.len());
        prop_assert_eq!(c.too_blurry, v.iter().all(|&x| x <= t));
    }

    #[test]
    fn older_frames_do_not_matter(v in variances(), older in variances(), t in 0.0f64..500.0) {
        let c = select_blur_variances(&v, t);
        let mut longer = older.clone();
        longer.extend(&v);
        let c2 = select_blur_variances(&longer, t);
        if !c.too_blurry {
            prop_assert_eq!(c2.index, c.index + older.len());
        }
    }

    #[test]
    fn raising_threshold_never_lowers_too_blurry(
        windows in prop::collection::vec(variances(), 1..20),
        t in 0.0f64..400.0,
        dt in 0.0f64..100.0,
    ) {
        let lo = blur_stats_from_variances(windows.iter().map(Vec::as_slice), t).unwrap();
        let hi = blur_stats_from_variances(windows.iter().map(Vec::as_slice), t + dt).unwrap();
        prop_assert!(hi.percent_too_blurry >= lo.percent_too_blurry);
        prop_assert!(lo.min <= lo.mean && lo.mean <= lo.max);
        prop_assert!((0.0..=100.0).contains(&lo.percent_updated));
    }

    #[test]
    fn centroid_index_is_in_window(rows in prop::collection::vec(prop::collection::vec(0.1f64..5.0, 3), 1..6)) {
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let e = Tensor::from_rows(&refs);
        for m in [CentroidMetric::L2, CentroidMetric::Cosine] {
            prop_assert!(select_centroid(&e, m).unwrap() < rows.len());
        }
    }

    #[test]
    fn laplacian_ignores_intensity_offset(
        w in 3usize..8, h in 3usize..8, seed in prop::collection::vec(0.0f64..0.5, 64), c in 0.0f64..0.5
    ) {
        let base: Vec<f64> = seed.iter().cycle().take(w * h).copied().collect();
        let f = GrayFrame::new(w, h, base.clone()).unwrap();
        let g = GrayFrame::new(w, h, base.iter().map(|v| v + c).collect()).unwrap();
        let (a, b) = (laplacian_variance(&f), laplacian_variance(&g));
        prop_assert!((a - b).abs() <= 1e-6 * a.max(1.0));
    }
}
