use approx::assert_relative_eq;
use gate_core::autodiff::Tape;
use gate_core::bench::{pearson, rmse};
use gate_core::data::{generate_synthetic_suite, Subset, SuiteSpec};
use gate_core::losses::lf_displacement;
use proptest::collection::vec;
use proptest::prelude::*;

fn paired(min: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (min..40usize).prop_flat_map(|n| (vec(-50.0..50.0f64, n), vec(-50.0..50.0f64, n)))
}

fn distances(a: &[f64], b: &[f64], dim: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let rows = a.len() / dim;
    let av = tape.input_owned(rows, dim, a.to_vec()).unwrap();
    let bv = tape.input_owned(rows, dim, b.to_vec()).unwrap();
    let d = lf_displacement(&mut tape, av, bv).unwrap();
    tape.value(d).to_vec()
}

proptest! {
    #[test]
    fn pearson_is_bounded_symmetric_and_affine_invariant(
        (x, y) in paired(3), a in 0.01..100.0f64, b in -100.0..100.0f64,
    ) {
        let Ok(r) = pearson(&x, &y) else { return Ok(()) };
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        assert_relative_eq!(r, pearson(&y, &x).unwrap(), epsilon = 1e-12);
        let z: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        assert_relative_eq!(r, pearson(&x, &z).unwrap(), epsilon = 1e-9);
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        assert_relative_eq!(-r, pearson(&x, &neg).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn rmse_of_a_constant_shift_is_the_shift((y, _) in paired(1), c in -10.0..10.0f64) {
        let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
        assert_relative_eq!(rmse(&y, &shifted).unwrap(), c.abs(), epsilon = 1e-9);
        prop_assert_eq!(rmse(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn displacement_is_a_metric(
        dim in 1..8usize,
        pts in vec(-5.0..5.0f64, 3 * 8 * 4),
    ) {
        let rows = 4;
        let n = rows * dim;
        let (a, b, c) = (&pts[..n], &pts[n..2 * n], &pts[2 * n..3 * n]);
        let ab = distances(a, b, dim);
        let ba = distances(b, a, dim);
        let bc = distances(b, c, dim);
        let ac = distances(a, c, dim);
        for i in 0..rows {
            prop_assert!(ab[i] >= 0.0);
            prop_assert_eq!(ab[i], ba[i]);
            prop_assert!(ac[i] <= ab[i] + bc[i] + 1e-12);
        }
        prop_assert!(distances(a, a, dim).iter().all(|&d| d == 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn splits_partition_rows_and_standardizing_round_trips(seed in 0..1000u64, labeled in 40..120usize) {
        let spec = SuiteSpec::transfer(2, 150, 3, 0.8, labeled, seed);
        let raw = generate_synthetic_suite(&spec).unwrap().dataset;
        let mut ds = raw.clone();
        ds.standardize().unwrap();
        for task in ds.tasks() {
            let all = ds.rows(&task, Subset::AllFolds).unwrap();
            let test = ds.rows(&task, Subset::Test).unwrap();
            prop_assert!(test.iter().all(|r| !all.contains(r)));
            for fold in 0..4 {
                let mut parts = ds.rows(&task, Subset::Train { validation_fold: fold }).unwrap();
                let val = ds.rows(&task, Subset::Validation { fold }).unwrap();
                prop_assert!(val.iter().all(|r| !parts.contains(r)));
                parts.extend(val);
                parts.sort();
                prop_assert_eq!(&parts, &all);
            }
            let y = ds.label_batch(&task, &all).unwrap();
            let mean = y.values().iter().sum::<f64>() / all.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
            let y_raw = raw.label_batch(&task, &all).unwrap();
            for (s, r) in y.values().iter().zip(y_raw.values()) {
                assert_relative_eq!(ds.unstandardize(&task, *s), *r, epsilon = 1e-9, max_relative = 1e-9);
            }
        }
    }
}
