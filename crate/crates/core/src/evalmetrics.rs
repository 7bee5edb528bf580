//! Frechet distance between feature sets, rank AUC and the outside-mask
//! preservation error.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::Mask;
use crate::tensor::ImageTensor;

pub const DEFAULT_EPS_REG: f64 = 1e-6;
const EIGEN_TOL: f64 = 1e-14;
const EIGEN_MAX_ITER: usize = 10_000;
const NEGATIVE_EIGEN_LIMIT: f64 = -1e-8;

/// Sample of feature vectors with its mean and unbiased covariance.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    vectors: Vec<Vec<f64>>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl FeatureSet {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let n = vectors.len();
        if n < 2 {
            return Err(Error::UndefinedMetric(format!(
                "covariance needs N >= 2, got {n}"
            )));
        }
        let dim = vectors[0].len();
        if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::Shape(
                "feature vectors must share a positive length".into(),
            ));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        let mut mean = DVector::zeros(dim);
        for v in &vectors {
            mean += DVector::from_column_slice(v);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(dim, dim);
        for v in &vectors {
            let d = DVector::from_column_slice(v) - &mean;
            cov.ger(1.0, &d, &d, 1.0);
        }
        cov /= (n - 1) as f64;
        Ok(Self { vectors, mean, cov })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

fn symmetric_eigenvalues(m: DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = sym
        .try_symmetric_eigen(EIGEN_TOL, EIGEN_MAX_ITER)
        .ok_or_else(|| Error::Numeric("symmetric eigendecomposition did not converge".into()))?;
    Ok((eig.eigenvalues, eig.eigenvectors))
}

fn clamp_eigenvalues(vals: &DVector<f64>) -> Result<DVector<f64>> {
    let scale = vals.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut out = vals.clone();
    for v in out.iter_mut() {
        if *v < NEGATIVE_EIGEN_LIMIT * scale {
            return Err(Error::Numeric(format!(
                "matrix not positive semidefinite (eigenvalue {v:e})"
            )));
        }
        *v = v.max(0.0);
    }
    Ok(out)
}

fn psd_sqrt(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, vecs) = symmetric_eigenvalues(m)?;
    let roots = clamp_eigenvalues(&vals)?.map(f64::sqrt);
    Ok(&vecs * DMatrix::from_diagonal(&roots) * vecs.transpose())
}

/// Frechet distance between Gaussians fitted to `a` and `b`.
///
/// `eps_reg * I` is added to both covariances. The trace of
/// `(Sa Sb)^(1/2)` is taken from the eigenvalues of the symmetric
/// `Sa^(1/2) Sb Sa^(1/2)`.
pub fn fid(a: &FeatureSet, b: &FeatureSet, eps_reg: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "feature dims {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if eps_reg.is_nan() || eps_reg < 0.0 {
        return Err(Error::param("eps_reg", "must be >= 0"));
    }
    let d = a.dim();
    let reg = DMatrix::<f64>::identity(d, d) * eps_reg;
    let sa = &a.cov + &reg;
    let sb = &b.cov + &reg;
    let root_a = psd_sqrt(sa.clone())?;
    let inner = &root_a * &sb * &root_a;
    let (vals, _) = symmetric_eigenvalues(inner)?;
    let trace_sqrt: f64 = clamp_eigenvalues(&vals)?.iter().map(|v| v.sqrt()).sum();
    let diff = &a.mean - &b.mean;
    let value = diff.dot(&diff) + sa.trace() + sb.trace() - 2.0 * trace_sqrt;
    if value < -1e-6 {
        return Err(Error::Numeric(format!(
            "negative Frechet distance {value:e}"
        )));
    }
    Ok(value.max(0.0))
}

/// Scores with binary labels, `1` marking the positive class.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredLabels {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::param("labels", format!("label {l} is not 0 or 1")));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::param("scores", "NaN score"));
        }
        let pos = labels.iter().filter(|&&l| l == 1).count();
        if pos == 0 || pos == labels.len() {
            return Err(Error::UndefinedMetric("AUC needs both classes".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn flipped(&self) -> Self {
        Self {
            scores: self.scores.clone(),
            labels: self.labels.iter().map(|l| 1 - l).collect(),
        }
    }

    fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (pos, self.labels.len() - pos)
    }
}

/// Mann-Whitney U of the positive class: the number of (positive, negative)
/// pairs where the positive scores higher, ties counted as one half.
/// Computed from mid-ranks; the result is an exact half-integer.
pub fn mann_whitney_u(data: &ScoredLabels) -> f64 {
    let n = data.scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| data.scores[i].total_cmp(&data.scores[j]));
    // twice the rank sum keeps mid-ranks integral
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && data.scores[order[j + 1]] == data.scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the mid-rank (i + j + 2) / 2
        let twice_mid = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            if data.labels[k] == 1 {
                twice_rank_sum += twice_mid;
            }
        }
        i = j + 1;
    }
    let (pos, _) = data.class_counts();
    let twice_u = twice_rank_sum - (pos * (pos + 1)) as u64;
    twice_u as f64 / 2.0
}

/// Area under the ROC curve as the normalized Mann-Whitney statistic.
pub fn auc(data: &ScoredLabels) -> f64 {
    let (pos, neg) = data.class_counts();
    mann_whitney_u(data) / (pos * neg) as f64
}

/// Largest absolute difference over cells outside the mask; `0` when the
/// mask covers everything.
pub fn outside_mask_error(x0: &ImageTensor, gen: &ImageTensor, mask: &Mask) -> Result<f64> {
    x0.ensure_same_shape(gen, "outside_mask_error")?;
    if (x0.height(), x0.width()) != (mask.height(), mask.width()) {
        return Err(Error::Shape(format!(
            "mask {}x{} vs image {}x{}",
            mask.height(),
            mask.width(),
            x0.height(),
            x0.width()
        )));
    }
    let plane = x0.plane_len();
    let cells = mask.cells();
    Ok(x0
        .as_slice()
        .iter()
        .zip(gen.as_slice())
        .enumerate()
        .filter(|(i, _)| cells[i % plane] == 0)
        .map(|(_, (a, b))| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Evaluation report; absent metrics serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fid: Option<f64>,
    pub auc: Option<f64>,
    pub outside_mask_error: Option<f64>,
    pub n_samples: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "fid,auc,outside_mask_error,n_samples";

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        format!(
            "{},{},{},{}",
            f(self.fid),
            f(self.auc),
            f(self.outside_mask_error),
            self.n_samples
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn gaussian_set(n: usize, dim: usize, shift: f64, seed: u64) -> FeatureSet {
        let mut rng = crate::seed::rng(seed);
        FeatureSet::new(
            (0..n)
                .map(|_| {
                    (0..dim)
                        .map(|_| shift + rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn fid_identity_and_symmetry() {
        let a = gaussian_set(40, 8, 0.0, 1);
        let b = gaussian_set(30, 8, 0.5, 2);
        assert!(fid(&a, &a, DEFAULT_EPS_REG).unwrap() <= 1e-6);
        let ab = fid(&a, &b, DEFAULT_EPS_REG).unwrap();
        let ba = fid(&b, &a, DEFAULT_EPS_REG).unwrap();
        assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
        assert!(ab > 0.0);
    }

    #[test]
    fn fid_singular_covariance() {
        // N < dim makes the covariance rank deficient
        let a = gaussian_set(5, 16, 0.0, 3);
        let b = gaussian_set(5, 16, 0.0, 4);
        assert!(fid(&a, &b, DEFAULT_EPS_REG).unwrap().is_finite());
        assert!(fid(&a, &a, DEFAULT_EPS_REG).unwrap() <= 1e-6);
    }

    #[test]
    fn fid_errors() {
        assert!(FeatureSet::new(vec![vec![1.0]]).is_err());
        assert!(FeatureSet::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        let a = gaussian_set(10, 2, 0.0, 1);
        let b = gaussian_set(10, 3, 0.0, 1);
        assert!(matches!(fid(&a, &b, 1e-6), Err(Error::Shape(_))));
    }

    #[test]
    fn auc_cases() {
        let sep = ScoredLabels::new(vec![0.1, 0.2, 0.8, 0.9], vec![0, 0, 1, 1]).unwrap();
        assert_eq!(auc(&sep), 1.0);
        let tie = ScoredLabels::new(vec![0.5; 6], vec![0, 1, 0, 1, 1, 0]).unwrap();
        assert_eq!(auc(&tie), 0.5);
        let mixed = ScoredLabels::new(vec![0.1, 0.4, 0.35, 0.8], vec![0, 0, 1, 1]).unwrap();
        assert_eq!(auc(&mixed), 0.75);
        assert!(matches!(
            ScoredLabels::new(vec![0.1, 0.2], vec![1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(ScoredLabels::new(vec![0.1, f64::NAN], vec![0, 1]).is_err());
        assert!(ScoredLabels::new(vec![0.1, 0.2], vec![0, 2]).is_err());
    }

    #[test]
    fn outside_error_cases() {
        let x0 = ImageTensor::standard_normal(3, 4, 4, 1);
        let shifted = x0.map(|v| v + 1.0);
        assert_eq!(
            outside_mask_error(&x0, &shifted, &Mask::ones(4, 4)).unwrap(),
            0.0
        );
        let mut g = x0.clone();
        g.set(1, 2, 3, x0.get(1, 2, 3) + 0.3);
        let err = outside_mask_error(&x0, &g, &Mask::zeros(4, 4)).unwrap();
        assert!((err - 0.3).abs() < 1e-12);
        assert!(outside_mask_error(&x0, &g, &Mask::zeros(4, 5)).is_err());
    }

    #[test]
    fn report_formats() {
        let r = MetricsReport {
            fid: Some(1.5),
            auc: None,
            outside_mask_error: Some(0.0),
            n_samples: 4,
        };
        assert_eq!(r.csv_row(), "1.5e0,,0e0,4");
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
