use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssEstimate {
    pub ess: f64,
    /// Set for constant chains, whose ESS is reported as 1.
    pub degenerate: bool,
}

/// Effective sample size `n / (1 + 2 sum_t rho_t)` with the autocorrelation
/// sum truncated by Geyer's initial positive sequence: lag pairs
/// `rho_{2k} + rho_{2k+1}` are accumulated while positive. Clipped to
/// `[1, n]`.
pub fn effective_sample_size(chain: &[f64]) -> Result<EssEstimate> {
    let n = chain.len();
    if n < 100 {
        return Err(Error::InvalidArgument(format!("ESS needs at least 100 draws, got {n}")));
    }
    if chain.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("chain value".into()));
    }
    let mean = chain.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = chain.iter().map(|x| x - mean).collect();
    let autocov = |lag: usize| -> f64 {
        centered[..n - lag].iter().zip(&centered[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64
    };
    let var = autocov(0);
    if var <= f64::EPSILON * mean.abs().max(1.0) * 1e-3 || var == 0.0 {
        return Ok(EssEstimate { ess: 1.0, degenerate: true });
    }
    let mut pair_sum = 0.0;
    let mut k = 0;
    while 2 * k + 1 < n {
        let gamma = (autocov(2 * k) + autocov(2 * k + 1)) / var;
        if gamma <= 0.0 {
            break;
        }
        pair_sum += gamma;
        k += 1;
    }
    let tau = (2.0 * pair_sum - 1.0).max(1.0 / n as f64);
    Ok(EssEstimate { ess: (n as f64 / tau).clamp(1.0, n as f64), degenerate: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn iid_chain_has_ess_near_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chain: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e = effective_sample_size(&chain).unwrap();
        assert!(e.ess >= 8_000.0 && e.ess <= 10_500.0, "{}", e.ess);
        assert!(!e.degenerate);
    }

    #[test]
    fn ar1_chain_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let phi: f64 = 0.9;
        let n = 100_000;
        let mut x = 0.0;
        let chain: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                x = phi * x + (1.0 - phi * phi).sqrt() * z;
                x
            })
            .collect();
        let want = n as f64 * (1.0 - phi) / (1.0 + phi);
        let e = effective_sample_size(&chain).unwrap().ess;
        assert!((e - want).abs() < 0.3 * want, "{e} vs {want}");
    }

    #[test]
    fn constant_and_short_chains() {
        let e = effective_sample_size(&[2.5; 200]).unwrap();
        assert_eq!(e, EssEstimate { ess: 1.0, degenerate: true });
        assert!(effective_sample_size(&[1.0; 50]).is_err());
    }
}
