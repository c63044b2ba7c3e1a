use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    /// Two-sided for Spearman, upper tail for χ².
    pub p_value: f64,
}

/// Average ranks (1-based), ties sharing the mean rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation with the t-approximation p-value. Returns
/// `None` below three points.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<TestResult> {
    if x.len() != y.len() || x.len() < 3 {
        return None;
    }
    let rho = pearson(&ranks(x), &ranks(y));
    let dof = (x.len() - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (dof / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, dof).ok()?;
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Some(TestResult { statistic: rho, p_value })
}

/// Pearson χ² goodness of fit against equal cell probabilities.
pub fn chi_square_uniform(counts: &[u64]) -> Option<TestResult> {
    let total: u64 = counts.iter().sum();
    if counts.len() < 2 || total == 0 {
        return None;
    }
    let e = total as f64 / counts.len() as f64;
    let statistic = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).ok()?;
    Some(TestResult {
        statistic,
        p_value: 1.0 - dist.cdf(statistic),
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_textbook_case() {
        // d = rank differences; rho = 1 - 6 Σd² / (n(n²-1)) without ties.
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [2.0, 1.0, 4.0, 3.0, 6.0, 5.0];
        let d2 = 6.0;
        let expect = 1.0 - 6.0 * d2 / (6.0 * 35.0);
        let r = spearman(&x, &y).unwrap();
        assert_relative_eq!(r.statistic, expect, epsilon = 1e-12);
        assert!(r.p_value > 0.0 && r.p_value < 0.05);
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        assert_eq!(spearman(&x, &rev).unwrap().statistic, -1.0);
        assert!(spearman(&x[..2], &y[..2]).is_none());
    }

    #[test]
    fn chi_square_known_values() {
        let flat = chi_square_uniform(&[10, 10, 10, 10]).unwrap();
        assert_eq!(flat.statistic, 0.0);
        assert_relative_eq!(flat.p_value, 1.0, epsilon = 1e-12);
        // df = 1, statistic 5: upper tail 0.025347.
        let r = chi_square_uniform(&[15, 5]).unwrap();
        assert_relative_eq!(r.statistic, 5.0, epsilon = 1e-12);
        assert!((r.p_value - 0.025_347).abs() < 1e-5);
    }
}
