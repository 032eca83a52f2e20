//! Seed-level summaries.

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    assert!(n > 0, "median of nothing");
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Outcome of a paired sign test; ties are dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Two-sided exact binomial p-value; `None` with fewer than two pairs.
    pub p_value: Option<f64>,
}

impl SignTest {
    /// `wins` counts pairs with `a < b`.
    pub fn lower(a: &[f64], b: &[f64]) -> Self {
        assert_eq!(a.len(), b.len());
        let wins = a.iter().zip(b).filter(|(x, y)| x < y).count();
        let losses = a.iter().zip(b).filter(|(x, y)| x > y).count();
        let ties = a.len() - wins - losses;
        let p_value = (a.len() >= 2).then(|| binomial_two_sided(wins, wins + losses));
        SignTest { wins, losses, ties, p_value }
    }

    /// Every pair strictly in favour of `a`.
    pub fn unanimous(&self) -> bool {
        self.losses == 0 && self.ties == 0 && self.wins > 0
    }
}

fn binomial_two_sided(k: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let tail = k.min(n - k);
    let mut coeff = 1.0f64;
    let mut sum = 0.0;
    for i in 0..=tail {
        if i > 0 {
            coeff *= (n - i + 1) as f64 / i as f64;
        }
        sum += coeff;
    }
    (2.0 * sum / 2f64.powi(n as i32)).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn sign_test_p_values() {
        let t = SignTest::lower(&[1.0; 5], &[2.0; 5]);
        assert_eq!((t.wins, t.losses), (5, 0));
        assert!((t.p_value.unwrap() - 0.0625).abs() < 1e-15);
        assert!(t.unanimous());
        let t = SignTest::lower(&[1.0, 3.0], &[2.0, 2.0]);
        assert_eq!(t.p_value, Some(1.0));
        assert_eq!(SignTest::lower(&[1.0], &[2.0]).p_value, None);
    }
}
