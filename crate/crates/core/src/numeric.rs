//! Small numeric kernels shared across modules. All accumulation is in f64.

/// Blocks at or below this length are summed left to right.
const PAIRWISE_BLOCK: usize = 8;

/// Pairwise (cascade) summation with a fixed split tree: the slice is halved
/// at `len / 2` recursively. The result depends only on the input order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_BLOCK {
        return values.iter().fold(0.0, |acc, &v| acc + v);
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Mean, sample standard error (n − 1 denominator) and count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: Option<f64>,
    pub sem: Option<f64>,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary { mean: None, sem: None, n };
    }
    let mean = pairwise_sum(values) / n as f64;
    let sem = if n >= 2 {
        let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
        let var = pairwise_sum(&sq) / (n - 1) as f64;
        Some((var / n as f64).sqrt())
    } else {
        None
    };
    Summary { mean: Some(mean), sem, n }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let v: Vec<f64> = (0..1001).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 500_500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn summary_of_constant_values() {
        let s = summarize(&[1.0, 1.0, 1.0]);
        assert_eq!(s.mean, Some(1.0));
        assert_eq!(s.sem, Some(0.0));
        assert_eq!(s.n, 3);
    }

    #[test]
    fn summary_of_one_two_three() {
        let s = summarize(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, Some(2.0));
        assert!((s.sem.unwrap() - 1.0 / 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sem_undefined_for_single_value() {
        let s = summarize(&[4.5]);
        assert_eq!(s.mean, Some(4.5));
        assert_eq!(s.sem, None);
    }
}
