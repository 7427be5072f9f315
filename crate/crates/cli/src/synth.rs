//! Synthetic teacher bundles.

use apm_core::tensor::{gaussian, SeededRng};
use apm_core::teacher_io::{BundleMeta, DistilledBundle};
use apm_core::ttt::ClassBank;
use apm_core::{Result, Tensor};

/// `n` unit rows of dimension `d`. Gaussian draws are Gram–Schmidt
/// orthonormalised while `n ≤ d`; beyond that rows are only normalised.
pub fn class_embeddings(n: usize, d: usize, rng: &mut SeededRng) -> Tensor {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v = gaussian(rng, d, 0.0, 1.0).into_data();
        if rows.len() < d {
            for r in &rows {
                let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(r) {
                    *x -= p * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        rows.push(v.iter().map(|x| x / norm).collect());
    }
    Tensor::new(vec![n, d], rows.concat()).expect("n×d")
}

/// A bundle whose CLS token is class `target`'s embedding plus
/// `N(0, noise²)` per coordinate.
pub fn make_bundle(classes: usize, d: usize, target: usize, noise: f64, seed: u64) -> Result<DistilledBundle> {
    let mut rng = SeededRng::new(seed);
    let bank = class_embeddings(classes, d, &mut rng);
    let mut cls: Vec<f64> = bank.data()[target * d..(target + 1) * d].to_vec();
    if noise > 0.0 {
        for (c, e) in cls.iter_mut().zip(gaussian(&mut rng, d, 0.0, noise).data()) {
            *c += e;
        }
    }
    let names = (0..classes).map(|k| format!("class_{k}")).collect();
    Ok(DistilledBundle {
        meta: BundleMeta {
            d_c: d,
            teacher: "synthetic".into(),
        },
        cls: Tensor::new(vec![1, d], cls)?,
        grid: None,
        classes: Some(ClassBank::new(bank, names)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_orthonormal_up_to_d() {
        let mut rng = SeededRng::new(3);
        let e = class_embeddings(10, 16, &mut rng);
        let row = |k: usize| &e.data()[k * 16..(k + 1) * 16];
        for a in 0..10 {
            for b in 0..10 {
                let p: f64 = row(a).iter().zip(row(b)).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((p - want).abs() < 1e-12, "{a} {b} {p}");
            }
        }
    }

    #[test]
    fn more_classes_than_dims_are_unit_rows() {
        let mut rng = SeededRng::new(4);
        let e = class_embeddings(5, 3, &mut rng);
        for r in e.data().chunks(3) {
            assert!((r.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_copies_target_row() {
        let b = make_bundle(4, 8, 2, 0.0, 9).unwrap();
        let bank = b.classes.as_ref().unwrap();
        assert_eq!(b.cls.data(), bank.row(2));
        let again = make_bundle(4, 8, 2, 0.0, 9).unwrap();
        assert_eq!(b, again);
    }
}
