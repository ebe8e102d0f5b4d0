//! Small fitting helpers for the scaling-law sweeps.

/// Least-squares slope of `ln(y)` against `ln(x)`. Returns `None` with fewer
/// than three points or any non-positive coordinate.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 3 || points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in logs {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    if den == 0.0 {
        return None;
    }
    Some(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_power_law() {
        let pts: Vec<(f64, f64)> = (1..8)
            .map(|i| {
                let x = 2.0_f64.powi(i);
                (x, 3.0 * x.powf(-0.5))
            })
            .collect();
        let slope = fit_loglog_slope(&pts).unwrap();
        assert!((slope + 0.5).abs() < 1e-12);
    }

    #[test]
    fn needs_three_points() {
        assert!(fit_loglog_slope(&[(1.0, 1.0), (2.0, 2.0)]).is_none());
    }
}
