use rand::seq::index::sample;

use crate::error::NnError;
use crate::nn::ParamVector;
use crate::seed;

/// Mixing weights `p_k = n_k / Σ n_j` over the participants.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights {
    p: Vec<f64>,
}

impl AggregationWeights {
    pub fn from_counts(counts: &[usize]) -> Result<Self, NnError> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(NnError::Precondition("aggregation weights need a positive sample count".into()));
        }
        Ok(Self {
            p: counts.iter().map(|&n| n as f64 / total as f64).collect(),
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// Component-wise `Σ p_k v_k`.
pub fn aggregate(uploads: &[&ParamVector], weights: &AggregationWeights) -> Result<ParamVector, NnError> {
    if uploads.len() != weights.len() || uploads.is_empty() {
        return Err(NnError::Config(format!(
            "{} uploads for {} weights",
            uploads.len(),
            weights.len()
        )));
    }
    if uploads.len() == 1 {
        return Ok(uploads[0].clone());
    }
    let mut out = ParamVector::zeros(uploads[0].layout().clone());
    for (u, &p) in uploads.iter().zip(weights.as_slice()) {
        out.axpy(p, u)?;
    }
    Ok(out)
}

/// `max(1, round_half_even(C × n))` participants.
pub fn participant_count(n_clients: usize, fraction: f64) -> usize {
    ((fraction * n_clients as f64).round_ties_even() as usize).clamp(1, n_clients.max(1))
}

/// Uniform sample without replacement, ascending, keyed by `(seed, round)`.
pub fn select_clients(n_clients: usize, fraction: f64, round: usize, seed: u64) -> Vec<usize> {
    let m = participant_count(n_clients, fraction);
    if m >= n_clients {
        return (0..n_clients).collect();
    }
    let mut rng = seed::rng(seed::mix(seed::mix_str(seed, "select"), round as u64));
    let mut ids = sample(&mut rng, n_clients, m).into_vec();
    ids.sort_unstable();
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelSpec;

    fn vec2(a: f64, b: f64) -> ParamVector {
        let spec: ModelSpec = "input(1,1,1) dense(1,1,linear)".parse().unwrap();
        ParamVector::init(&spec, 0).unwrap().with_values(vec![a, b]).unwrap()
    }

    #[test]
    fn examples() {
        let w = AggregationWeights::from_counts(&[5, 5]).unwrap();
        assert_eq!(aggregate(&[&vec2(1.0, 1.0), &vec2(2.0, 2.0)], &w).unwrap().values(), &[1.5, 1.5]);
        let w = AggregationWeights::from_counts(&[30, 70]).unwrap();
        let r = aggregate(&[&vec2(1.0, 0.0), &vec2(2.0, 0.0)], &w).unwrap();
        assert!((r.values()[0] - 1.7).abs() < 1e-15);
        let w = AggregationWeights::from_counts(&[3]).unwrap();
        let v = vec2(0.1, -3.0);
        assert_eq!(aggregate(&[&v], &w).unwrap(), v);
    }

    #[test]
    fn counts_and_selection() {
        assert_eq!(participant_count(100, 0.1), 10);
        assert_eq!(participant_count(10, 0.05), 1);
        assert_eq!(participant_count(5, 0.5), 2);
        assert_eq!(participant_count(7, 0.5), 4);
        assert_eq!(select_clients(100, 0.1, 3, 9).len(), 10);
        assert_eq!(select_clients(6, 1.0, 3, 9), (0..6).collect::<Vec<_>>());
        assert_eq!(select_clients(50, 0.2, 4, 1), select_clients(50, 0.2, 4, 1));
        assert_ne!(select_clients(50, 0.2, 4, 1), select_clients(50, 0.2, 5, 1));
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(AggregationWeights::from_counts(&[0, 0]).is_err());
    }
}
