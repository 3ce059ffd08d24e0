use crate::error::{Error, Result};

/// Principal axes of a row-sample matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit eigenvectors of the covariance, by decreasing variance. Each is
    /// signed so its largest-magnitude coordinate is positive.
    pub components: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl Pca {
    /// `rows` are samples of equal width; needs at least two of them.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Pca> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Degenerate(format!("PCA needs at least two rows, got {n}")));
        }
        let m = rows[0].len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Parameter("rows differ in width".into()));
        }
        let mut mean = vec![0.0; m];
        for r in rows {
            for (a, b) in mean.iter_mut().zip(r) {
                *a += b;
            }
        }
        mean.iter_mut().for_each(|x| *x /= n as f64);
        let mut cov = vec![0.0; m * m];
        for r in rows {
            for i in 0..m {
                let di = r[i] - mean[i];
                for j in i..m {
                    cov[i * m + j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..m {
            for j in i..m {
                let v = cov[i * m + j] / (n - 1) as f64;
                cov[i * m + j] = v;
                cov[j * m + i] = v;
            }
        }
        let (values, vectors) = symmetric_eigen(&cov, m);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        let components = order
            .iter()
            .map(|&c| {
                let mut v: Vec<f64> = (0..m).map(|r| vectors[r * m + c]).collect();
                fix_sign(&mut v);
                v
            })
            .collect();
        Ok(Pca { mean, components, variances: order.iter().map(|&c| values[c].max(0.0)).collect() })
    }

    /// Coordinate of `row` along component `c`.
    pub fn project(&self, row: &[f64], c: usize) -> f64 {
        row.iter().zip(&self.mean).zip(&self.components[c]).map(|((x, m), v)| (x - m) * v).sum()
    }
}

/// Flips `v` so its largest-magnitude coordinate (first on ties) is positive.
pub fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Cyclic Jacobi rotations on a symmetric `m×m` matrix. Returns eigenvalues
/// and a row-major matrix whose columns are the eigenvectors.
pub fn symmetric_eigen(a: &[f64], m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; m * m];
    for i in 0..m {
        v[i * m + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..m)
            .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * m + j] * a[i * m + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..m {
            for q in p + 1..m {
                let apq = a[p * m + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * m + q] - a[p * m + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..m {
                    let akp = a[k * m + p];
                    let akq = a[k * m + q];
                    a[k * m + p] = c * akp - s * akq;
                    a[k * m + q] = s * akp + c * akq;
                }
                for k in 0..m {
                    let apk = a[p * m + k];
                    let aqk = a[q * m + k];
                    a[p * m + k] = c * apk - s * aqk;
                    a[q * m + k] = s * apk + c * aqk;
                }
                for k in 0..m {
                    let vkp = v[k * m + p];
                    let vkq = v[k * m + q];
                    v[k * m + p] = c * vkp - s * vkq;
                    v[k * m + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..m).map(|i| a[i * m + i]).collect(), v)
}
