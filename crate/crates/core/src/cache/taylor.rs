use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::matrix::FeatureMap;
use crate::{Error, Result};

/// How the difference stack is rebuilt at each Full refresh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum DifferenceScheme {
    /// Levels are chosen so the forecast series equals the polynomial through
    /// the last `O + 1` refreshes. Exact for trajectories of degree ≤ O, at
    /// any refresh spacing. Same numbers as `Plain` for `O ≤ 1`.
    #[default]
    Interpolated,
    /// Repeated differences of successive refreshes. Only exact up to degree 1.
    Plain,
}

impl DifferenceScheme {
    pub fn name(self) -> &'static str {
        match self {
            Self::Interpolated => "interpolated",
            Self::Plain => "plain",
        }
    }
}

impl core::fmt::Display for DifferenceScheme {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for DifferenceScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "interpolated" => Ok(Self::Interpolated),
            "plain" => Ok(Self::Plain),
            _ => Err(Error::config("cache.differences", format!("unknown scheme `{s}` (interpolated, plain)"))),
        }
    }
}

/// Cached module output plus its finite-difference stack.
///
/// Differences run in timestep `t` between successive Full refreshes, and the
/// previous refresh sits at the larger `t`. Under `Plain`,
/// `Δ¹ = F_old − F_new` and `Δⁱ = Δⁱ⁻¹_old − Δⁱ⁻¹_new`. Under `Interpolated`,
/// `Δⁱ = (−gap)ⁱ·Pⁱ(s)` where `P` interpolates the last `O + 1` refreshes and
/// `s` is the latest refresh step; the forecast `F + Σ Δⁱ/(i!·gapⁱ)·(−k)ⁱ`
/// is then `P(s + k)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaylorCacheEntry {
    base: Option<FeatureMap>,
    /// `diffs[i - 1]` holds `Δⁱ`; only populated levels are stored.
    diffs: Vec<FeatureMap>,
    order: usize,
    scheme: DifferenceScheme,
    /// Earlier refreshes, oldest first, kept for `Interpolated` at `O ≥ 2`.
    history: Vec<(usize, FeatureMap)>,
    refreshes: usize,
    last_refresh: Option<usize>,
    /// Steps between the last two refreshes.
    gap: Option<usize>,
    /// Latest full estimate handed to the model (token-wise updated by ToCa,
    /// overwritten by ClusCa).
    working: Option<FeatureMap>,
}

impl TaylorCacheEntry {
    pub fn new(order: usize) -> Self {
        Self::with_scheme(order, DifferenceScheme::default())
    }

    pub fn with_scheme(order: usize, scheme: DifferenceScheme) -> Self {
        Self {
            order,
            scheme,
            ..Self::default()
        }
    }

    pub fn base(&self) -> Option<&FeatureMap> {
        self.base.as_ref()
    }

    /// `Δⁱ` for `i ≥ 1`, if populated.
    pub fn diff(&self, i: usize) -> Option<&FeatureMap> {
        i.checked_sub(1).and_then(|j| self.diffs.get(j))
    }

    pub fn available_levels(&self) -> usize {
        self.diffs.len()
    }

    pub fn scheme(&self) -> DifferenceScheme {
        self.scheme
    }

    pub fn refreshes(&self) -> usize {
        self.refreshes
    }

    pub fn last_refresh(&self) -> Option<usize> {
        self.last_refresh
    }

    pub fn gap(&self) -> Option<usize> {
        self.gap
    }

    pub fn working(&self) -> Option<&FeatureMap> {
        self.working.as_ref()
    }

    pub(crate) fn working_mut(&mut self) -> Option<&mut FeatureMap> {
        self.working.as_mut()
    }

    pub(crate) fn set_working(&mut self, map: FeatureMap) {
        self.working = Some(map);
    }

    /// Builds an entry from explicit levels. `diffs[i - 1]` is `Δⁱ`. Later
    /// refreshes use the `Plain` scheme since no refresh history exists.
    pub fn from_levels(base: FeatureMap, diffs: Vec<FeatureMap>, order: usize) -> Result<Self> {
        for d in &diffs {
            if d.shape() != base.shape() {
                return Err(Error::shape("TaylorCacheEntry", "levels of equal shape", "mismatched level"));
            }
        }
        let refreshes = diffs.len() + 1;
        Ok(Self {
            base: Some(base),
            diffs,
            order,
            scheme: DifferenceScheme::Plain,
            refreshes,
            ..Self::default()
        })
    }

    fn interpolates(&self) -> bool {
        self.scheme == DifferenceScheme::Interpolated && self.order >= 2
    }

    /// Records a freshly computed full map at denoising step `step`.
    pub fn refresh_full(&mut self, fresh: FeatureMap, step: usize) -> Result<()> {
        if let Some(old) = &self.base {
            if old.shape() != fresh.shape() {
                return Err(Error::shape(
                    "refresh_full",
                    format!("{}x{}", old.rows(), old.cols()),
                    format!("{}x{}", fresh.rows(), fresh.cols()),
                ));
            }
        }
        if let Some(last) = self.last_refresh {
            if self.interpolates() && step <= last {
                return Err(Error::policy("refresh steps must increase"));
            }
            self.gap = Some(step.saturating_sub(last).max(1));
        }
        if self.interpolates() {
            if let (Some(old), Some(last)) = (self.base.take(), self.last_refresh) {
                self.history.push((last, old));
                let keep = self.order;
                if self.history.len() > keep {
                    self.history.drain(..self.history.len() - keep);
                }
            }
            self.diffs = interpolated_levels(&self.history, &fresh, step, self.gap.unwrap_or(1));
        } else if let Some(old) = &self.base {
            let mut next = Vec::with_capacity(self.order);
            if self.order >= 1 {
                next.push(old.sub(&fresh)?);
            }
            for i in 1..self.order {
                let Some(prev_old) = self.diffs.get(i - 1) else { break };
                let d = prev_old.sub(&next[i - 1])?;
                next.push(d);
            }
            self.diffs = next;
        }
        self.base = Some(fresh);
        self.last_refresh = Some(step);
        self.refreshes += 1;
        Ok(())
    }

    /// Forecast `k` steps past the last refresh using the recorded refresh
    /// spacing, or `default_span` before a second refresh exists.
    pub fn forecast(&self, k: usize, default_span: usize, order: usize) -> Result<FeatureMap> {
        taylor_forecast(self, k, self.gap.unwrap_or(default_span), order)
    }
}

/// Levels `Δⁱ = (−gap)ⁱ·Pⁱ(s)` for the polynomial `P` through `history` and
/// `(step, fresh)`, computed from Newton divided differences with the nodes
/// shifted so the latest refresh sits at 0.
fn interpolated_levels(history: &[(usize, FeatureMap)], fresh: &FeatureMap, step: usize, gap: usize) -> Vec<FeatureMap> {
    // Nodes latest first: u_0 = 0 > u_1 > u_2 ...
    let mut nodes = Vec::with_capacity(history.len() + 1);
    let mut table: Vec<Vec<f64>> = Vec::with_capacity(history.len() + 1);
    nodes.push(0.0);
    table.push(fresh.data().to_vec());
    for (s, map) in history.iter().rev() {
        nodes.push(*s as f64 - step as f64);
        table.push(map.data().to_vec());
    }
    let n = nodes.len() - 1;
    for lvl in 1..=n {
        for j in (lvl..=n).rev() {
            let h = nodes[j] - nodes[j - lvl];
            let (lo, hi) = table.split_at_mut(j);
            for (a, b) in hi[0].iter_mut().zip(&lo[j - 1]) {
                *a = (*a - b) / h;
            }
        }
    }
    // Newton basis Π_{m<j}(u − u_m) expanded into powers of u; since u_0 = 0
    // the constant term of every basis product past the first vanishes.
    let len = fresh.data().len();
    let mut coeffs = vec![vec![0.0; len]; n + 1];
    let mut basis = vec![1.0];
    for j in 0..=n {
        for (i, b) in basis.iter().enumerate() {
            if *b != 0.0 {
                for (c, v) in coeffs[i].iter_mut().zip(&table[j]) {
                    *c += b * v;
                }
            }
        }
        let mut next = vec![0.0; basis.len() + 1];
        for (i, b) in basis.iter().enumerate() {
            next[i + 1] += b;
            next[i] -= b * nodes[j];
        }
        basis = next;
    }
    let (rows, cols) = fresh.shape();
    let mut scale = 1.0;
    (1..=n)
        .map(|i| {
            scale *= -(gap as f64) * i as f64;
            let data = coeffs[i].iter().map(|c| c * scale).collect();
            FeatureMap::new(rows, cols, data).expect("shape preserved")
        })
        .collect()
}

/// `F + Σ_{i=1}^{m} Δⁱ/(i!·Nⁱ)·(−k)ⁱ` with `m = min(order, available levels)`.
pub fn taylor_forecast(entry: &TaylorCacheEntry, k: usize, span: usize, order: usize) -> Result<FeatureMap> {
    let base = entry
        .base
        .as_ref()
        .ok_or_else(|| Error::policy("forecast requested before the first full refresh"))?;
    if k == 0 {
        return Ok(base.clone());
    }
    let levels = order.min(entry.diffs.len());
    let mut out = base.clone();
    let mut coeff = 1.0;
    for i in 1..=levels {
        coeff *= -(k as f64) / (i as f64 * span as f64);
        for (o, d) in out.data_mut().iter_mut().zip(entry.diffs[i - 1].data()) {
            *o += coeff * d;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scalar(v: f64) -> FeatureMap {
        FeatureMap::filled(1, 1, v)
    }

    #[test]
    fn first_refresh_has_no_differences() {
        let mut e = TaylorCacheEntry::new(2);
        e.refresh_full(scalar(3.0), 0).unwrap();
        assert_eq!(e.base(), Some(&scalar(3.0)));
        assert_eq!(e.available_levels(), 0);
        assert!(e.diff(1).is_none());
    }

    #[test]
    fn first_difference_is_older_minus_newer() {
        let mut e = TaylorCacheEntry::new(1);
        e.refresh_full(scalar(10.0), 0).unwrap();
        e.refresh_full(scalar(12.0), 5).unwrap();
        assert_eq!(e.diff(1), Some(&scalar(-2.0)));
        assert_eq!(e.gap(), Some(5));
    }

    #[test]
    fn levels_fill_one_per_refresh() {
        for scheme in [DifferenceScheme::Plain, DifferenceScheme::Interpolated] {
            let mut e = TaylorCacheEntry::with_scheme(2, scheme);
            for (i, v) in [1.0, 4.0, 9.0, 16.0].into_iter().enumerate() {
                e.refresh_full(scalar(v), i).unwrap();
                assert_eq!(e.available_levels(), i.min(2));
            }
            assert_eq!(e.diff(2), Some(&scalar(2.0)), "{scheme}");
        }
    }

    #[test]
    fn plain_first_level_is_the_raw_difference() {
        // Squares at unit spacing: 9 - 16 = -7, one-sided at the latest point.
        let mut e = TaylorCacheEntry::with_scheme(2, DifferenceScheme::Plain);
        for (i, v) in [1.0, 4.0, 9.0, 16.0].into_iter().enumerate() {
            e.refresh_full(scalar(v), i).unwrap();
        }
        assert_eq!(e.diff(1), Some(&scalar(-7.0)));
        assert_eq!(e.forecast(1, 1, 2).unwrap(), scalar(24.0));
    }

    #[test]
    fn interpolated_first_level_is_the_derivative() {
        // Values are (s + 1)², slope 8 at s = 3, scaled by -gap.
        let mut e = TaylorCacheEntry::new(2);
        for (i, v) in [1.0, 4.0, 9.0, 16.0].into_iter().enumerate() {
            e.refresh_full(scalar(v), i).unwrap();
        }
        assert_eq!(e.diff(1), Some(&scalar(-8.0)));
        assert_eq!(e.forecast(1, 1, 2).unwrap(), scalar(25.0));
    }

    #[test]
    fn interpolated_scheme_is_exact_for_polynomials_at_uneven_spacing() {
        let poly = |s: f64| 0.5 - 1.5 * s + 0.25 * s * s - 0.01 * s * s * s;
        let mut e = TaylorCacheEntry::new(3);
        for s in [0usize, 5, 7, 12, 20] {
            e.refresh_full(scalar(poly(s as f64)), s).unwrap();
        }
        assert_eq!(e.gap(), Some(8));
        for k in 0..6 {
            let got = e.forecast(k, 5, 3).unwrap().data()[0];
            let want = poly((20 + k) as f64);
            assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "k={k}: {got} vs {want}");
        }
    }

    #[test]
    fn schemes_agree_up_to_first_order() {
        let mut a = TaylorCacheEntry::with_scheme(1, DifferenceScheme::Plain);
        let mut b = TaylorCacheEntry::with_scheme(1, DifferenceScheme::Interpolated);
        for (s, v) in [(0, 3.0), (5, 1.0), (9, 4.0)] {
            a.refresh_full(scalar(v), s).unwrap();
            b.refresh_full(scalar(v), s).unwrap();
        }
        assert_eq!(a.diff(1), b.diff(1));
    }

    #[test]
    fn interpolated_rejects_repeated_steps() {
        let mut e = TaylorCacheEntry::new(2);
        e.refresh_full(scalar(1.0), 3).unwrap();
        assert!(matches!(e.refresh_full(scalar(1.0), 3), Err(Error::Policy(_))));
    }

    #[test]
    fn scheme_parses_by_name() {
        assert_eq!("Plain".parse::<DifferenceScheme>().unwrap(), DifferenceScheme::Plain);
        assert!("newton".parse::<DifferenceScheme>().is_err());
    }

    #[test]
    fn constant_features_have_zero_differences() {
        let mut e = TaylorCacheEntry::new(3);
        for step in 0..5 {
            e.refresh_full(scalar(7.5), step * 4).unwrap();
        }
        for i in 1..=3 {
            assert_eq!(e.diff(i), Some(&scalar(0.0)));
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut e = TaylorCacheEntry::new(1);
        e.refresh_full(FeatureMap::zeros(2, 2), 0).unwrap();
        assert!(e.refresh_full(FeatureMap::zeros(3, 2), 1).is_err());
    }

    #[test]
    fn forecast_examples() {
        let e = TaylorCacheEntry::from_levels(scalar(10.0), vec![scalar(2.0)], 1).unwrap();
        assert_eq!(taylor_forecast(&e, 0, 4, 1).unwrap(), scalar(10.0));
        assert_eq!(taylor_forecast(&e, 2, 4, 1).unwrap(), scalar(9.0));

        let e = TaylorCacheEntry::from_levels(scalar(10.0), vec![scalar(2.0), scalar(4.0)], 2).unwrap();
        assert_eq!(taylor_forecast(&e, 2, 4, 2).unwrap(), scalar(9.5));
        // Requested order above what is stored falls back to available levels.
        assert_eq!(taylor_forecast(&e, 2, 4, 5).unwrap(), scalar(9.5));
        assert_eq!(taylor_forecast(&e, 2, 4, 0).unwrap(), scalar(10.0));
    }

    #[test]
    fn forecast_before_refresh_is_a_policy_error() {
        let e = TaylorCacheEntry::new(1);
        assert!(matches!(taylor_forecast(&e, 1, 5, 1), Err(Error::Policy(_))));
    }
}
