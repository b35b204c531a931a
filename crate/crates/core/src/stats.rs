//! Small statistical helpers shared by the experiment modules.

/// `log(sum(exp(v)))`, stabilised by the maximum. `-inf` for an empty slice
/// or when every entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Sample mean and the standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Unbiased sample variance.
pub fn variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Standard error of the unbiased sample variance, from the fourth central
/// moment: `Var(s^2) ~ (m4 - s^4 (n-3)/(n-1)) / n`.
pub fn variance_se(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    ((m4 - m2 * m2 * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt()
}

/// Excess kurtosis (0 for a Gaussian). NaN when the sample is constant.
pub fn excess_kurtosis(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    if m2 == 0.0 {
        return f64::NAN;
    }
    m4 / (m2 * m2) - 3.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y ~ intercept + slope x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    LinearFit {
        slope,
        intercept,
        r_squared,
    }
}

/// Least-squares quadratic `y ~ c0 + c1 x + c2 x^2`, returned as `[c0, c1, c2]`.
pub fn quadratic_fit(x: &[f64], y: &[f64]) -> [f64; 3] {
    use nalgebra::{DMatrix, DVector};
    let design = DMatrix::from_fn(x.len(), 3, |i, j| x[i].powi(j as i32));
    let rhs = DVector::from_column_slice(y);
    let normal = design.transpose() * &design;
    let coef = normal
        .lu()
        .solve(&(design.transpose() * rhs))
        .unwrap_or_else(|| DVector::from_element(3, f64::NAN));
    [coef[0], coef[1], coef[2]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_is_stable() {
        let v = [1000.0, 1000.0];
        assert!((log_sum_exp(&v) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn fits_recover_exact_data() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let f = linear_fit(&x, &y);
        assert!((f.slope + 0.5).abs() < 1e-14 && (f.intercept - 2.0).abs() < 1e-14);
        assert!((f.r_squared - 1.0).abs() < 1e-14);
        let y2: Vec<f64> = x.iter().map(|v| 1.0 + v - 3.0 * v * v).collect();
        let q = quadratic_fit(&x, &y2);
        assert!((q[0] - 1.0).abs() < 1e-10 && (q[1] - 1.0).abs() < 1e-10 && (q[2] + 3.0).abs() < 1e-10);
    }

    #[test]
    fn moments() {
        let v = [1.0, 2.0, 3.0, 4.0];
        let (m, se) = mean_and_se(&v);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-14);
        assert!((variance(&v) - 5.0 / 3.0).abs() < 1e-14);
        assert!(excess_kurtosis(&[2.0; 5]).is_nan());
    }
}
