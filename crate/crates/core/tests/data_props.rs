use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use slang_core::data::{
    make_cubic_toy, parse_libsvm, read_csv, split, write_csv, write_libsvm, Dataset, LibsvmOptions,
    SplitSpec, Task,
};

fn small_dataset() -> impl Strategy<Value = Dataset> {
    (2usize..40, 1usize..6).prop_flat_map(|(n, d)| {
        (
            proptest::collection::vec(-5.0f64..5.0, n * d),
            proptest::collection::vec(any::<bool>(), n),
        )
            .prop_map(move |(x, y)| {
                // Sprinkle exact zeros so the sparse writer has work to do.
                let x: Vec<f64> = x.into_iter().map(|v| if v.abs() < 1.0 { 0.0 } else { v }).collect();
                let mut y: Vec<f64> = y.into_iter().map(f64::from).collect();
                y[0] = 0.0;
                y[1] = 1.0;
                Dataset::new(DMatrix::from_row_slice(n, d, &x), DVector::from_vec(y), Task::Classification)
                    .unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn libsvm_round_trip_is_exact(ds in small_dataset()) {
        let mut buf = Vec::new();
        write_libsvm(&ds, false, &mut buf).unwrap();
        let opts = LibsvmOptions { task: Task::Classification, dim: None, bias: false };
        let back = parse_libsvm(buf.as_slice(), opts).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn split_partitions_the_rows(ds in small_dataset(), seed in any::<u64>(), frac in 0.1f64..0.9) {
        // Tag each row by a unique value in an extra column.
        let n = ds.n();
        let tagged = DMatrix::from_fn(n, ds.d() + 1, |i, j| if j == ds.d() { i as f64 } else { ds.features[(i, j)] });
        let ds = Dataset::new(tagged, ds.targets.clone(), ds.task).unwrap();
        let spec = SplitSpec { train_fraction: frac, seed, standardize: false };
        let (tr, te) = split(&ds, &spec).unwrap();
        let tag = |s: &Dataset| -> Vec<usize> { (0..s.n()).map(|i| s.features[(i, s.d() - 1)] as usize).collect() };
        let all: BTreeSet<usize> = tag(&tr).into_iter().chain(tag(&te)).collect();
        prop_assert_eq!(tr.n() + te.n(), n);
        prop_assert_eq!(all.len(), n);
        prop_assert!(tr.n() >= 1 && te.n() >= 1);
        prop_assert_eq!(split(&ds, &spec).unwrap(), (tr, te));
    }

    #[test]
    fn standardized_train_columns_have_zero_mean_unit_sd(ds in small_dataset(), seed in any::<u64>()) {
        prop_assume!(ds.n() >= 6);
        let spec = SplitSpec { train_fraction: 0.5, seed, standardize: true };
        let (tr, _) = split(&ds, &spec).unwrap();
        for j in 0..tr.d() {
            let c = tr.features.column(j);
            let mean = c.mean();
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / tr.n() as f64;
            if var > 1e-12 {
                prop_assert!(mean.abs() < 1e-10);
                prop_assert!((var - 1.0).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn csv_round_trip() {
    let ds = make_cubic_toy(25, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("toy.csv");
    write_csv(&ds, &p).unwrap();
    assert_eq!(read_csv(&p, Task::Regression).unwrap(), ds);
}

#[test]
fn cubic_toy_has_the_right_moments() {
    let ds = make_cubic_toy(20_000, 7).unwrap();
    let x = ds.features.column(0);
    assert!(x.iter().all(|v| (-4.0..=4.0).contains(v)));
    // x ~ U[-4, 4]: mean 0, variance 16/3.
    let n = ds.n() as f64;
    assert!(x.mean().abs() < 0.06);
    assert!((x.iter().map(|v| v * v).sum::<f64>() / n - 16.0 / 3.0).abs() < 0.1);
    // Residuals y - x³ are N(0, 9).
    let res: Vec<f64> = (0..ds.n()).map(|i| ds.targets[i] - x[i].powi(3)).collect();
    let m = res.iter().sum::<f64>() / n;
    let v = res.iter().map(|r| (r - m).powi(2)).sum::<f64>() / n;
    assert!(m.abs() < 0.1);
    assert!((v - 9.0).abs() < 0.3, "{v}");
    assert_eq!(make_cubic_toy(50, 7).unwrap(), make_cubic_toy(50, 7).unwrap());
}

#[test]
fn malformed_lines_report_their_number() {
    let text = "1 1:0.5\n-1 2:abc\n";
    let opts = LibsvmOptions { task: Task::Classification, dim: None, bias: true };
    let err = parse_libsvm(text.as_bytes(), opts).unwrap_err().to_string();
    assert!(err.contains('2'), "{err}");
}
