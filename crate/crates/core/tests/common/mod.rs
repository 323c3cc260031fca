#![allow(dead_code)]

/// Balanced accuracy on `(test_a, test_b)` of a logistic regression fitted
/// by Newton iterations to separate `train_a` (class 0) from `train_b`
/// (class 1). Rows have `dim` features, standardized on the training rows.
pub fn logistic_probe(dim: usize, train_a: &[f64], train_b: &[f64], test_a: &[f64], test_b: &[f64]) -> f64 {
    let rows = |x: &[f64]| x.len() / dim;
    let n = rows(train_a) + rows(train_b);
    let mut mean = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    for row in train_a.chunks_exact(dim).chain(train_b.chunks_exact(dim)) {
        row.iter().zip(&mut mean).for_each(|(v, m)| *m += v / n as f64);
    }
    for row in train_a.chunks_exact(dim).chain(train_b.chunks_exact(dim)) {
        row.iter().zip(&mean).zip(&mut sd).for_each(|((v, m), s)| *s += (v - m).powi(2) / n as f64);
    }
    sd.iter_mut().for_each(|s| *s = s.sqrt().max(1e-12));
    // standardized features with a trailing bias column
    let z = |row: &[f64]| -> Vec<f64> {
        row.iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).chain(std::iter::once(1.0)).collect()
    };
    let p = dim + 1;
    let mut data: Vec<(Vec<f64>, f64, f64)> = Vec::with_capacity(n);
    let (wa, wb) = (0.5 / rows(train_a) as f64, 0.5 / rows(train_b) as f64);
    data.extend(train_a.chunks_exact(dim).map(|r| (z(r), 0.0, wa)));
    data.extend(train_b.chunks_exact(dim).map(|r| (z(r), 1.0, wb)));

    let mut w = vec![0.0; p];
    for _ in 0..50 {
        let mut grad = vec![0.0; p];
        let mut hess = vec![0.0; p * p];
        for (x, target, weight) in &data {
            let logit: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            let prob = 1.0 / (1.0 + (-logit).exp());
            let curv = weight * prob * (1.0 - prob);
            for i in 0..p {
                grad[i] += weight * (prob - target) * x[i];
                for j in 0..p {
                    hess[i * p + j] += curv * x[i] * x[j];
                }
            }
        }
        for i in 0..p {
            grad[i] += 1e-4 * w[i];
            hess[i * p + i] += 1e-4;
        }
        let step = solve(hess, grad, p);
        w.iter_mut().zip(&step).for_each(|(w, s)| *w -= s);
        if step.iter().map(|s| s * s).sum::<f64>().sqrt() < 1e-10 {
            break;
        }
    }
    let predict = |row: &[f64]| z(row).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() > 0.0;
    let acc_a = test_a.chunks_exact(dim).filter(|r| !predict(r)).count() as f64 / rows(test_a) as f64;
    let acc_b = test_b.chunks_exact(dim).filter(|r| predict(r)).count() as f64 / rows(test_b) as f64;
    0.5 * (acc_a + acc_b)
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Vec<f64> {
    for c in 0..n {
        let pivot = (c..n).max_by(|&i, &j| a[i * n + c].abs().total_cmp(&a[j * n + c].abs())).unwrap();
        if pivot != c {
            for k in 0..n {
                a.swap(c * n + k, pivot * n + k);
            }
            b.swap(c, pivot);
        }
        for r in c + 1..n {
            let f = a[r * n + c] / a[c * n + c];
            for k in c..n {
                a[r * n + k] -= f * a[c * n + k];
            }
            b[r] -= f * b[c];
        }
    }
    for c in (0..n).rev() {
        let s: f64 = (c + 1..n).map(|k| a[c * n + k] * b[k]).sum();
        b[c] = (b[c] - s) / a[c * n + c];
    }
    b
}
