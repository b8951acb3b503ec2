use crate::error::{Error, Result};

/// Fractional ranks starting at 1; tied values share the mean of the ranks
/// they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman_rank(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Argument(format!(
            "spearman needs equal lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Argument("spearman needs at least 2 points".into()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::Argument("spearman input contains NaN".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
        .ok_or_else(|| Error::UndefinedCorrelation("an input has constant ranks".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(spearman_rank(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman_rank(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        let r = spearman_rank(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap();
        assert!((r - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn constant_input_is_undefined() {
        assert!(matches!(
            spearman_rank(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn bad_lengths() {
        assert!(spearman_rank(&[1.0], &[1.0]).is_err());
        assert!(spearman_rank(&[1.0, 2.0], &[1.0]).is_err());
    }

    /// Closed form without ties.
    fn classic(x: &[f64], y: &[f64]) -> f64 {
        let (rx, ry) = (average_ranks(x), average_ranks(y));
        let n = x.len() as f64;
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
        1.0 - 6.0 * d2 / (n * (n * n - 1.0))
    }

    proptest! {
        #[test]
        fn self_correlation_is_one(x in proptest::collection::hash_set(-1000i32..1000, 2..30)) {
            let x: Vec<f64> = x.into_iter().map(f64::from).collect();
            prop_assert!((spearman_rank(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn invariant_under_monotone_transform(
            pts in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..25)
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            let tx: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
            if let (Ok(a), Ok(b)) = (spearman_rank(&x, &y), spearman_rank(&tx, &y)) {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&a));
            }
        }

        #[test]
        fn agrees_with_closed_form_without_ties(
            x in proptest::collection::hash_set(-1000i32..1000, 3..20),
            seed in 0u64..1000,
        ) {
            let x: Vec<f64> = x.into_iter().map(f64::from).collect();
            let mut y = x.clone();
            let mut rng = crate::seed::stream(seed, 0);
            crate::seed::shuffle(&mut rng, &mut y);
            let r = spearman_rank(&x, &y).unwrap();
            prop_assert!((r - classic(&x, &y)).abs() < 1e-9);
        }
    }
}
