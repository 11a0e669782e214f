//! Central finite differences, used by tests and by `cmer gradcheck`.

/// Relative error between an analytic and a numeric derivative. Differences
/// at or below `abs_floor` count as exact agreement.
pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= abs_floor {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Central-difference gradient of `f` at `x` with step `eps`.
pub fn finite_difference<F>(mut f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Worst-case agreement over a set of compared elements.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckStats {
    pub count: usize,
    pub max_relative: f64,
    pub max_absolute: f64,
}

impl GradCheckStats {
    pub fn compare(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> Self {
        assert_eq!(analytic.len(), numeric.len());
        let mut s = Self::default();
        for (&a, &n) in analytic.iter().zip(numeric) {
            s.record(a, n, abs_floor);
        }
        s
    }

    pub fn record(&mut self, analytic: f64, numeric: f64, abs_floor: f64) {
        self.count += 1;
        self.max_absolute = self.max_absolute.max((analytic - numeric).abs());
        self.max_relative = self
            .max_relative
            .max(relative_error(analytic, numeric, abs_floor));
    }

    pub fn merge(&mut self, other: &Self) {
        self.count += other.count;
        self.max_absolute = self.max_absolute.max(other.max_absolute);
        self.max_relative = self.max_relative.max(other.max_relative);
    }
}
