//! Angular-error metrics over valid pixels.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::geometry::{angle_error, NormalMap};

/// Angle thresholds in degrees for the "within t" fractions.
pub const THRESHOLDS: [f64; 3] = [11.25, 22.5, 30.0];

/// Mean, median and threshold fractions of per-pixel angular error. With
/// `count == 0` every statistic is NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean: f64,
    pub median: f64,
    /// Fractions of pixels with error strictly below each of [`THRESHOLDS`].
    pub within: [f64; 3],
    pub count: usize,
    /// Per-pixel errors, kept so that reports can be pooled exactly.
    #[serde(skip)]
    errors: Vec<f64>,
}

/// Median by full sort; even counts average the two central values.
pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median by selection, same convention as [`median`].
pub fn median_select(values: &mut [f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    let (lower, &mut upper, _) = values.select_nth_unstable_by(n / 2, f64::total_cmp);
    if n % 2 == 1 {
        upper
    } else {
        let below = lower.iter().copied().max_by(f64::total_cmp).expect("n >= 2");
        0.5 * (below + upper)
    }
}

impl MetricsReport {
    /// Statistics of a list of per-pixel errors in degrees.
    pub fn from_errors(mut errors: Vec<f64>) -> Self {
        let count = errors.len();
        if count == 0 {
            return Self { mean: f64::NAN, median: f64::NAN, within: [f64::NAN; 3], count, errors };
        }
        let mean = errors.iter().sum::<f64>() / count as f64;
        let within = THRESHOLDS.map(|t| errors.iter().filter(|&&e| e < t).count() as f64 / count as f64);
        let median = median(&mut errors);
        Self { mean, median, within, count, errors }
    }

    pub fn is_defined(&self) -> bool {
        self.count > 0
    }

    pub fn errors(&self) -> &[f64] {
        &self.errors
    }
}

/// Metrics over the pixels valid in both maps.
pub fn evaluate(pred: &NormalMap, gt: &NormalMap) -> Result<MetricsReport> {
    let errors = angle_error(pred, gt)?.into_iter().flatten().collect();
    Ok(MetricsReport::from_errors(errors))
}

/// Pools every per-pixel error of `reports` and recomputes the statistics,
/// so large images weigh more than small ones.
pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
    ensure!(!reports.is_empty(), "cannot aggregate an empty set of reports");
    let errors = reports.iter().flat_map(|r| r.errors.iter().copied()).collect();
    Ok(MetricsReport::from_errors(errors))
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# pixel-weighted over {} valid pixels", self.count)?;
        writeln!(f, "{:<10} {:>10}", "metric", "value")?;
        writeln!(f, "{:<10} {:>10.4}", "mean", self.mean)?;
        writeln!(f, "{:<10} {:>10.4}", "median", self.median)?;
        for (t, v) in THRESHOLDS.iter().zip(self.within) {
            writeln!(f, "{:<10} {:>10.4}", format!("{t}°"), v)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn map(normals: Vec<Option<[f64; 3]>>) -> NormalMap {
        let n = normals.len();
        NormalMap::from_options(n, 1, normals).unwrap()
    }

    fn tilted(deg: f64) -> [f64; 3] {
        let r = deg.to_radians();
        [r.sin(), 0.0, -r.cos()]
    }

    #[test]
    fn identical_maps_give_zero_error() {
        let m = map(vec![Some(tilted(5.0)), Some(tilted(40.0)), None]);
        let r = evaluate(&m, &m).unwrap();
        assert_eq!((r.mean, r.median, r.within, r.count), (0.0, 0.0, [1.0; 3], 2));
    }

    #[test]
    fn half_zero_half_twenty_degrees() {
        let gt = map(vec![Some(tilted(0.0)); 4]);
        let pred = map(vec![Some(tilted(0.0)), Some(tilted(20.0)), Some(tilted(0.0)), Some(tilted(20.0))]);
        let r = evaluate(&pred, &gt).unwrap();
        assert!((r.mean - 10.0).abs() < 1e-4 && (r.median - 10.0).abs() < 1e-4);
        assert_eq!(r.within, [0.5, 1.0, 1.0]);
    }

    #[test]
    fn empty_intersection_is_undefined() {
        let a = map(vec![Some(tilted(0.0)), None]);
        let b = map(vec![None, Some(tilted(0.0))]);
        let r = evaluate(&a, &b).unwrap();
        assert!(!r.is_defined() && r.mean.is_nan() && r.median.is_nan());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn random_pairs_match_direct_arccos() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut unit = || {
            let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..-0.1)];
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            v.map(|c| c / l)
        };
        let (p, g): (Vec<_>, Vec<_>) = (0..201).map(|_| (unit(), unit())).unzip();
        let pred = map(p.iter().map(|&v| Some(v)).collect());
        let gt = map(g.iter().map(|&v| Some(v)).collect());
        let r = evaluate(&pred, &gt).unwrap();
        // oracle on the stored f32 vectors, computed independently
        let mut errs: Vec<f64> = (0..201)
            .map(|i| {
                let (a, b) = (pred.get(i).unwrap(), gt.get(i).unwrap());
                let dot = |x: [f32; 3], y: [f32; 3]| (0..3).map(|k| x[k] as f64 * y[k] as f64).sum::<f64>();
                let c = dot(a, b) / (dot(a, a) * dot(b, b)).sqrt();
                c.clamp(-1.0, 1.0).acos() * 180.0 / std::f64::consts::PI
            })
            .collect();
        let mean = errs.iter().sum::<f64>() / 201.0;
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((r.mean - mean).abs() < 1e-9);
        assert!((r.median - errs[100]).abs() < 1e-9);
        for (k, t) in [11.25, 22.5, 30.0].into_iter().enumerate() {
            assert_eq!(r.within[k], errs.iter().filter(|&&e| e < t).count() as f64 / 201.0);
        }
    }

    #[test]
    fn aggregation_is_pixel_weighted() {
        let a = MetricsReport::from_errors(vec![1.0, 2.0, 3.0]);
        let b = MetricsReport::from_errors(vec![40.0]);
        let pooled = aggregate(&[a.clone(), b]).unwrap();
        assert_eq!(pooled, MetricsReport::from_errors(vec![1.0, 2.0, 3.0, 40.0]));
        assert_eq!(pooled.mean, 11.5);
        assert_eq!(aggregate(&[a.clone()]).unwrap(), a);
    }

    #[test]
    fn display_lists_the_five_rows() {
        let text = MetricsReport::from_errors(vec![1.0]).to_string();
        for label in ["mean", "median", "11.25°", "22.5°", "30°"] {
            assert!(text.contains(label), "{text}");
        }
    }

    proptest! {
        #[test]
        fn median_sort_equals_select(v in prop::collection::vec(-100.0f64..100.0, 1..60)) {
            let mut a = v.clone();
            let mut b = v;
            prop_assert_eq!(median(&mut a), median_select(&mut b));
        }

        #[test]
        fn thresholds_are_monotone(v in prop::collection::vec(0.0f64..180.0, 1..60)) {
            let r = MetricsReport::from_errors(v);
            prop_assert!(r.within[0] <= r.within[1] && r.within[1] <= r.within[2]);
            prop_assert!(r.within.iter().all(|f| (0.0..=1.0).contains(f)));
        }

        #[test]
        fn aggregate_matches_concatenation(parts in prop::collection::vec(prop::collection::vec(0.0f64..90.0, 0..20), 1..5)) {
            let reports: Vec<_> = parts.iter().cloned().map(MetricsReport::from_errors).collect();
            let all: Vec<f64> = parts.concat();
            let pooled = aggregate(&reports).unwrap();
            let direct = MetricsReport::from_errors(all);
            prop_assert_eq!(pooled.count, direct.count);
            if direct.count > 0 {
                prop_assert_eq!(pooled.median, direct.median);
                prop_assert_eq!(pooled.within, direct.within);
                prop_assert!((pooled.mean - direct.mean).abs() < 1e-9);
            }
        }

        #[test]
        fn evaluation_is_symmetric_in_masks(mask_a in prop::collection::vec(any::<bool>(), 12), mask_b in prop::collection::vec(any::<bool>(), 12)) {
            let a = map(mask_a.iter().enumerate().map(|(i, &v)| v.then(|| tilted(i as f64 * 3.0))).collect());
            let b = map(mask_b.iter().enumerate().map(|(i, &v)| v.then(|| tilted(i as f64 * 5.0))).collect());
            let (ab, ba) = (evaluate(&a, &b).unwrap(), evaluate(&b, &a).unwrap());
            prop_assert_eq!(ab.count, ba.count);
            if ab.count > 0 {
                prop_assert_eq!(ab.within, ba.within);
                prop_assert!((ab.mean - ba.mean).abs() < 1e-12);
            }
        }
    }
}
