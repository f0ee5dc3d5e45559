//! CTMC substitution models, transition probabilities and discrete rate
//! mixtures.

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::distribution::{ContinuousCDF, Gamma};

use crate::error::{Error, Result};

const ROW_SUM_TOLERANCE: f64 = 1e-10;

/// Nucleotide state order used throughout: A, C, G, T.
pub const NUCLEOTIDES: [char; 4] = ['A', 'C', 'G', 'T'];

/// `exp(A)` by scaling and squaring with a diagonal Padé approximant of
/// degree 8. `A` is scaled so that its 1-norm is at most 1/2, where the
/// truncation error of the approximant is below `1e-20`.
pub fn matrix_exponential(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::InvalidArgument("matrix exponential needs a square matrix".into()));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("matrix exponential input".into()));
    }
    let n = a.nrows();
    let norm = (0..n).map(|j| a.column(j).iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max);
    if norm == 0.0 {
        return Ok(DMatrix::identity(n, n));
    }
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = a * 2f64.powi(-squarings);

    const Q: usize = 8;
    let mut coeff = [0.0f64; Q + 1];
    coeff[0] = 1.0;
    for k in 1..=Q {
        coeff[k] = coeff[k - 1] * (Q - k + 1) as f64 / (k as f64 * (2 * Q - k + 1) as f64);
    }
    let mut numerator = DMatrix::identity(n, n);
    let mut denominator = DMatrix::identity(n, n);
    let mut power = DMatrix::identity(n, n);
    for (k, &c) in coeff.iter().enumerate().skip(1) {
        power = &power * &scaled;
        numerator += &power * c;
        let sign = if k % 2 == 0 { c } else { -c };
        denominator += &power * sign;
    }
    let mut result = denominator
        .lu()
        .solve(&numerator)
        .ok_or_else(|| Error::NonFinite("singular Padé denominator".into()))?;
    for _ in 0..squarings {
        result = &result * &result;
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
struct Spectral {
    eigenvalues: Vec<f64>,
    /// `diag(pi)^{-1/2} U`, row-major m x m.
    left: Vec<f64>,
    /// `U' diag(pi)^{1/2}`, row-major m x m.
    right: Vec<f64>,
}

/// A generator matrix together with the pieces needed to exponentiate and
/// differentiate it.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix {
    q: DMatrix<f64>,
    q_flat: Vec<f64>,
    q2_flat: Vec<f64>,
    spectral: Option<Spectral>,
}

impl RateMatrix {
    fn new(q: DMatrix<f64>, reversible_with: Option<&[f64]>) -> Result<Self> {
        validate_generator(&q)?;
        let q2 = &q * &q;
        let spectral = reversible_with.and_then(|pi| symmetric_decomposition(&q, pi));
        Ok(Self { q_flat: row_major(&q), q2_flat: row_major(&q2), q, spectral })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn state_count(&self) -> usize {
        self.q.nrows()
    }

    /// `Q` in row-major order.
    pub fn flat(&self) -> &[f64] {
        &self.q_flat
    }

    /// `Q^2` in row-major order.
    pub fn squared_flat(&self) -> &[f64] {
        &self.q2_flat
    }

    /// Writes `exp(Q t)` in row-major order into `out`.
    pub fn fill_transition(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let m = self.state_count();
        if t == 0.0 {
            out.fill(0.0);
            for j in 0..m {
                out[j * m + j] = 1.0;
            }
            return Ok(());
        }
        match &self.spectral {
            Some(s) => {
                out.fill(0.0);
                for e in 0..m {
                    let w = (s.eigenvalues[e] * t).exp();
                    for j in 0..m {
                        let vj = s.left[j * m + e] * w;
                        let row = &mut out[j * m..(j + 1) * m];
                        for (k, o) in row.iter_mut().enumerate() {
                            *o += vj * s.right[e * m + k];
                        }
                    }
                }
            }
            None => {
                let p = matrix_exponential(&(&self.q * t))?;
                for j in 0..m {
                    for k in 0..m {
                        out[j * m + k] = p[(j, k)];
                    }
                }
            }
        }
        for x in out.iter_mut() {
            if *x < 0.0 && *x > -1e-12 {
                *x = 0.0;
            }
        }
        Ok(())
    }
}

fn row_major(a: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = a.shape();
    (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).map(|ij| a[ij]).collect()
}

fn validate_generator(q: &DMatrix<f64>) -> Result<()> {
    if !q.is_square() || q.nrows() < 2 {
        return Err(Error::InvalidModel("generator must be square with at least two states".into()));
    }
    let m = q.nrows();
    for i in 0..m {
        let mut sum = 0.0;
        for j in 0..m {
            let x = q[(i, j)];
            if !x.is_finite() {
                return Err(Error::InvalidModel(format!("non-finite generator entry ({i},{j})")));
            }
            if i != j && x < 0.0 {
                return Err(Error::InvalidModel(format!("negative off-diagonal rate at ({i},{j})")));
            }
            sum += x;
        }
        if sum.abs() > ROW_SUM_TOLERANCE {
            return Err(Error::InvalidModel(format!("generator row {i} sums to {sum}")));
        }
    }
    Ok(())
}

fn validate_distribution(pi: &[f64], m: usize) -> Result<()> {
    if pi.len() != m {
        return Err(Error::InvalidModel(format!("expected {m} frequencies, got {}", pi.len())));
    }
    if pi.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(Error::InvalidModel("frequencies must be nonnegative".into()));
    }
    let total: f64 = pi.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidModel(format!("frequencies sum to {total}, not 1")));
    }
    Ok(())
}

/// Eigendecomposition of a reversible generator through the symmetric matrix
/// `diag(pi)^{1/2} Q diag(pi)^{-1/2}`. Returns `None` when `pi` has zeros or
/// detailed balance fails.
fn symmetric_decomposition(q: &DMatrix<f64>, pi: &[f64]) -> Option<Spectral> {
    let m = q.nrows();
    if pi.iter().any(|&p| p <= 0.0) {
        return None;
    }
    let sqrt_pi: Vec<f64> = pi.iter().map(|p| p.sqrt()).collect();
    let s = DMatrix::from_fn(m, m, |i, j| sqrt_pi[i] * q[(i, j)] / sqrt_pi[j]);
    let asymmetry = (0..m)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| (s[(i, j)] - s[(j, i)]).abs())
        .fold(0.0, f64::max);
    if asymmetry > 1e-10 {
        return None;
    }
    let eig = SymmetricEigen::new(s);
    let u = eig.eigenvectors;
    let mut left = vec![0.0; m * m];
    let mut right = vec![0.0; m * m];
    for j in 0..m {
        for e in 0..m {
            left[j * m + e] = u[(j, e)] / sqrt_pi[j];
            right[e * m + j] = u[(j, e)] * sqrt_pi[j];
        }
    }
    Some(Spectral { eigenvalues: eig.eigenvalues.iter().copied().collect(), left, right })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubstitutionModel {
    name: String,
    root_distribution: Vec<f64>,
    generator: RateMatrix,
    branch_generators: Option<Vec<RateMatrix>>,
    reversible: bool,
}

impl SubstitutionModel {
    pub fn jc69() -> Self {
        Self::gtr(&[1.0; 6], &[0.25; 4]).map(|m| m.renamed("JC69")).expect("valid JC69 parameters")
    }

    /// HKY85 with transition/transversion ratio `kappa`; frequencies in
    /// A, C, G, T order.
    pub fn hky85(kappa: f64, frequencies: &[f64]) -> Result<Self> {
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(Error::InvalidModel(format!("kappa must be positive, got {kappa}")));
        }
        Self::gtr(&[1.0, kappa, 1.0, 1.0, kappa, 1.0], frequencies).map(|m| m.renamed("HKY85"))
    }

    /// General time-reversible model. Exchangeabilities are ordered
    /// AC, AG, AT, CG, CT, GT.
    pub fn gtr(exchangeabilities: &[f64], frequencies: &[f64]) -> Result<Self> {
        if exchangeabilities.len() != 6 {
            return Err(Error::InvalidModel("GTR needs six exchangeabilities".into()));
        }
        if let Some(r) = exchangeabilities.iter().find(|r| !(**r > 0.0) || !r.is_finite()) {
            return Err(Error::InvalidModel(format!("exchangeabilities must be positive, got {r}")));
        }
        validate_distribution(frequencies, 4)?;
        if frequencies.iter().any(|&p| p <= 0.0) {
            return Err(Error::InvalidModel("frequencies must be positive".into()));
        }
        let pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
        let mut q = DMatrix::zeros(4, 4);
        for (&(i, j), &r) in pairs.iter().zip(exchangeabilities) {
            q[(i, j)] = r * frequencies[j];
            q[(j, i)] = r * frequencies[i];
        }
        for i in 0..4 {
            q[(i, i)] = -(0..4).filter(|&j| j != i).map(|j| q[(i, j)]).sum::<f64>();
        }
        let rate: f64 = -(0..4).map(|i| frequencies[i] * q[(i, i)]).sum::<f64>();
        q /= rate;
        // restore exact zero row sums after the division
        for i in 0..4 {
            q[(i, i)] = -(0..4).filter(|&j| j != i).map(|j| q[(i, j)]).sum::<f64>();
        }
        let generator = RateMatrix::new(q, Some(frequencies))?;
        Ok(Self {
            name: "GTR".into(),
            root_distribution: frequencies.to_vec(),
            generator,
            branch_generators: None,
            reversible: true,
        })
    }

    /// A model from a raw generator and root distribution. No normalization
    /// is applied and neither stationarity nor reversibility is assumed.
    pub fn from_generator(q: DMatrix<f64>, root_distribution: Vec<f64>) -> Result<Self> {
        validate_distribution(&root_distribution, q.nrows())?;
        let generator = RateMatrix::new(q, None)?;
        Ok(Self {
            name: "custom".into(),
            root_distribution,
            generator,
            branch_generators: None,
            reversible: false,
        })
    }

    /// Assigns a separate raw generator to every branch (non-homogeneous
    /// mode). The shared generator is kept as the default.
    pub fn with_branch_generators(mut self, generators: Vec<DMatrix<f64>>) -> Result<Self> {
        let m = self.state_count();
        let generators = generators
            .into_iter()
            .map(|q| {
                if q.nrows() != m {
                    return Err(Error::InvalidModel(format!("branch generator must be {m}x{m}")));
                }
                RateMatrix::new(q, None)
            })
            .collect::<Result<Vec<_>>>()?;
        self.branch_generators = Some(generators);
        self.reversible = false;
        Ok(self)
    }

    pub fn with_root_distribution(mut self, pi: Vec<f64>) -> Result<Self> {
        validate_distribution(&pi, self.state_count())?;
        self.root_distribution = pi;
        Ok(self)
    }

    fn renamed(mut self, name: &str) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_count(&self) -> usize {
        self.generator.state_count()
    }

    pub fn root_distribution(&self) -> &[f64] {
        &self.root_distribution
    }

    pub fn is_reversible(&self) -> bool {
        self.reversible
    }

    pub fn has_branch_generators(&self) -> bool {
        self.branch_generators.is_some()
    }

    /// Number of branch-specific generators, if any.
    pub fn branch_generator_count(&self) -> Option<usize> {
        self.branch_generators.as_ref().map(Vec::len)
    }

    pub fn generator(&self, branch: usize) -> &RateMatrix {
        match &self.branch_generators {
            Some(g) => &g[branch],
            None => &self.generator,
        }
    }

    /// Expected number of substitutions per unit time at the root
    /// distribution under the shared generator.
    pub fn mean_rate(&self) -> f64 {
        let q = self.generator.matrix();
        -(0..self.state_count()).map(|i| self.root_distribution[i] * q[(i, i)]).sum::<f64>()
    }

    /// `exp(Q_branch * length * rate)`.
    pub fn transition_matrix(&self, branch: usize, length: f64, rate: f64) -> Result<DMatrix<f64>> {
        if !(length >= 0.0) || !length.is_finite() {
            return Err(Error::InvalidArgument(format!("branch length must be >= 0, got {length}")));
        }
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(Error::InvalidArgument(format!("category rate must be > 0, got {rate}")));
        }
        let m = self.state_count();
        let mut flat = vec![0.0; m * m];
        self.generator(branch).fill_transition(length * rate, &mut flat)?;
        Ok(DMatrix::from_row_slice(m, m, &flat))
    }
}

/// Discrete mixture of among-site rates with mean one.
#[derive(Debug, Clone, PartialEq)]
pub struct RateCategories {
    rates: Vec<f64>,
    probabilities: Vec<f64>,
}

impl RateCategories {
    pub fn single() -> Self {
        Self { rates: vec![1.0], probabilities: vec![1.0] }
    }

    /// Rates are rescaled so the mixture mean is exactly one.
    pub fn new(rates: Vec<f64>, probabilities: Vec<f64>) -> Result<Self> {
        if rates.is_empty() || rates.len() != probabilities.len() {
            return Err(Error::InvalidModel("rates and probabilities must be non-empty and aligned".into()));
        }
        if rates.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::InvalidModel("category rates must be positive".into()));
        }
        if probabilities.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::InvalidModel("category probabilities must be nonnegative".into()));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidModel(format!("category probabilities sum to {total}")));
        }
        let mean: f64 = rates.iter().zip(&probabilities).map(|(r, p)| r * p).sum();
        let rates = rates.into_iter().map(|r| r / mean).collect();
        Ok(Self { rates, probabilities })
    }

    /// Equiprobable categories whose rates are the medians of `count`
    /// equal-probability bins of a Gamma(alpha, rate = alpha) distribution,
    /// rescaled to mean one.
    pub fn discrete_gamma(alpha: f64, count: usize) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidModel(format!("gamma shape must be positive, got {alpha}")));
        }
        if count == 0 {
            return Err(Error::InvalidModel("need at least one rate category".into()));
        }
        if count == 1 {
            return Ok(Self::single());
        }
        let gamma = Gamma::new(alpha, alpha).map_err(|e| Error::InvalidModel(e.to_string()))?;
        let rates: Vec<f64> = (0..count)
            .map(|l| gamma.inverse_cdf((2 * l + 1) as f64 / (2 * count) as f64))
            .collect();
        Self::new(rates, vec![1.0 / count as f64; count])
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).iter().map(|x| x.abs()).fold(0.0, f64::max)
    }

    fn taylor_exp(a: &DMatrix<f64>, terms: usize) -> DMatrix<f64> {
        let n = a.nrows();
        let mut sum = DMatrix::identity(n, n);
        let mut term = DMatrix::identity(n, n);
        for k in 1..terms {
            term = &term * a / k as f64;
            sum += &term;
        }
        sum
    }

    #[test]
    fn exponential_of_zero_and_diagonal() {
        let z = DMatrix::zeros(4, 4);
        assert_eq!(matrix_exponential(&z).unwrap(), DMatrix::identity(4, 4));
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-3.0, 0.5, 2.0, -0.1]));
        let e = matrix_exponential(&d).unwrap();
        for i in 0..4 {
            let want = d[(i, i)].exp();
            assert!((e[(i, i)] - want).abs() < 1e-13 * want);
        }
        let mut bad = DMatrix::zeros(2, 2);
        bad[(0, 1)] = f64::NAN;
        assert!(matrix_exponential(&bad).is_err());
    }

    #[test]
    fn exponential_matches_taylor_series() {
        let q = DMatrix::from_row_slice(
            4,
            4,
            &[-1.1, 0.3, 0.5, 0.3, 0.2, -0.9, 0.4, 0.3, 0.6, 0.1, -1.2, 0.5, 0.25, 0.35, 0.4, -1.0],
        );
        let a = &q * 0.3;
        let want = taylor_exp(&a, 60);
        let got = matrix_exponential(&a).unwrap();
        assert!(max_abs_diff(&got, &want) < 1e-12);
        // larger norm exercises squaring
        let a = &q * 7.0;
        let want = taylor_exp(&a, 120);
        assert!(max_abs_diff(&matrix_exponential(&a).unwrap(), &want) < 1e-12);
    }

    #[test]
    fn jc69_generator_and_transition() {
        let m = SubstitutionModel::jc69();
        let q = m.generator(0).matrix();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { -1.0 } else { 1.0 / 3.0 };
                assert!((q[(i, j)] - want).abs() < 1e-14);
            }
        }
        assert!((m.mean_rate() - 1.0).abs() < 1e-14);
        let p = m.transition_matrix(0, 0.3, 1.0).unwrap();
        let same = 0.25 + 0.75 * (-0.4f64).exp();
        assert!((same - 0.752740).abs() < 1e-6);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { same } else { (1.0 - same) / 3.0 };
                assert!((p[(i, j)] - want).abs() < 1e-14);
            }
        }
        assert_eq!(m.transition_matrix(0, 0.0, 1.0).unwrap(), DMatrix::identity(4, 4));
        let far = m.transition_matrix(0, 100.0, 1.0).unwrap();
        assert!(far.iter().all(|x| (x - 0.25).abs() < 1e-10));
        assert!(m.transition_matrix(0, -0.1, 1.0).is_err());
    }

    #[test]
    fn degenerate_parameterizations_equal_jc69() {
        let jc = SubstitutionModel::jc69();
        let hky = SubstitutionModel::hky85(1.0, &[0.25; 4]).unwrap();
        let gtr = SubstitutionModel::gtr(&[2.0; 6], &[0.25; 4]).unwrap();
        assert!(max_abs_diff(jc.generator(0).matrix(), hky.generator(0).matrix()) < 1e-15);
        assert!(max_abs_diff(jc.generator(0).matrix(), gtr.generator(0).matrix()) < 1e-15);
    }

    #[test]
    fn named_model_errors() {
        assert!(SubstitutionModel::hky85(0.0, &[0.25; 4]).is_err());
        assert!(SubstitutionModel::hky85(2.0, &[0.5, 0.5, 0.1, 0.1]).is_err());
        assert!(SubstitutionModel::gtr(&[1.0, 1.0, -1.0, 1.0, 1.0, 1.0], &[0.25; 4]).is_err());
        let bad = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 1.0, -1.0]);
        assert!(SubstitutionModel::from_generator(bad, vec![0.5, 0.5]).is_err());
    }

    fn test_models() -> Vec<SubstitutionModel> {
        let nonrev = DMatrix::from_row_slice(
            4,
            4,
            &[-1.1, 0.3, 0.5, 0.3, 0.2, -0.9, 0.4, 0.3, 0.6, 0.1, -1.2, 0.5, 0.25, 0.35, 0.4, -1.0],
        );
        vec![
            SubstitutionModel::hky85(3.0, &[0.1, 0.2, 0.3, 0.4]).unwrap(),
            SubstitutionModel::gtr(&[0.5, 2.0, 0.7, 1.3, 3.1, 0.9], &[0.3, 0.2, 0.15, 0.35]).unwrap(),
            SubstitutionModel::from_generator(nonrev, vec![0.7, 0.1, 0.1, 0.1]).unwrap(),
        ]
    }

    #[test]
    fn derivative_is_q_times_p() {
        for model in test_models() {
            let q = model.generator(0).matrix().clone();
            let (b, h) = (0.37, 1e-5);
            let fd = (model.transition_matrix(0, b + h, 1.0).unwrap()
                - model.transition_matrix(0, b - h, 1.0).unwrap())
                / (2.0 * h);
            let p = model.transition_matrix(0, b, 1.0).unwrap();
            assert!(max_abs_diff(&fd, &(&q * &p)) < 1e-6);
            assert!(max_abs_diff(&(&q * &p), &(&p * &q)) < 1e-12);
        }
    }

    #[test]
    fn chapman_kolmogorov_and_detailed_balance() {
        for model in test_models() {
            let p1 = model.transition_matrix(0, 0.2, 1.0).unwrap();
            let p2 = model.transition_matrix(0, 0.45, 1.0).unwrap();
            let p12 = model.transition_matrix(0, 0.65, 1.0).unwrap();
            assert!(max_abs_diff(&(&p1 * &p2), &p12) < 1e-10);
            for i in 0..4 {
                assert!((p12.row(i).sum() - 1.0).abs() < 1e-10);
            }
            if model.is_reversible() {
                let pi = model.root_distribution();
                let f = DMatrix::from_fn(4, 4, |i, j| pi[i] * p12[(i, j)]);
                assert!(max_abs_diff(&f, &f.transpose()) < 1e-10);
            }
        }
    }

    #[test]
    fn spectral_path_matches_pade() {
        let model = &test_models()[1];
        let q = model.generator(0).matrix();
        for t in [1e-6, 0.01, 0.5, 3.0, 40.0] {
            let pade = matrix_exponential(&(q * t)).unwrap();
            assert!(max_abs_diff(&model.transition_matrix(0, t, 1.0).unwrap(), &pade) < 1e-12);
        }
    }

    #[test]
    fn gamma_categories() {
        let one = RateCategories::discrete_gamma(0.5, 1).unwrap();
        assert_eq!(one.rates(), [1.0]);
        assert_eq!(one.probabilities(), [1.0]);
        let flat = RateCategories::discrete_gamma(1e6, 4).unwrap();
        assert!(flat.rates().iter().all(|r| (r - 1.0).abs() < 2e-3));
        for alpha in [0.1, 0.5, 2.0] {
            let cats = RateCategories::discrete_gamma(alpha, 4).unwrap();
            let mean: f64 = cats.rates().iter().zip(cats.probabilities()).map(|(r, p)| r * p).sum();
            assert!((mean - 1.0).abs() < 1e-14);
            assert!(cats.rates().windows(2).all(|w| w[0] < w[1]));
        }
        assert!(RateCategories::discrete_gamma(0.0, 4).is_err());
        assert!(RateCategories::discrete_gamma(1.0, 0).is_err());
    }
}
