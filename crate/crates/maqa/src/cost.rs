//! Per-stage inference cost accounting.
//!
//! Each pipeline stage gets an exact polynomial in the operating-point
//! parameters (encoder/decoder lengths, retrieval size, evidence size,
//! candidate count), with unit coefficients and an optional per-stage
//! calibration constant. Fitting the constant against measured wall-times
//! turns the polynomials into a seconds-per-question estimate.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{MaqaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Recaller,
    Reranker,
    Verifier,
    Reader,
    Aggregator,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Recaller,
        Stage::Reranker,
        Stage::Verifier,
        Stage::Reader,
        Stage::Aggregator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Recaller => "recaller",
            Stage::Reranker => "reranker",
            Stage::Verifier => "verifier",
            Stage::Reader => "reader",
            Stage::Aggregator => "aggregator",
        }
    }
}

/// Operating point of the pipeline for cost purposes.
///
/// `a` (the candidate count) is a real because it is usually a dataset
/// average. Defaults are the reference operating point used throughout the
/// worked examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostProfile {
    /// Encoder length in tokens.
    pub l_p: f64,
    /// Decoder length in tokens.
    pub l_a: f64,
    /// Retrieved passages per question.
    pub b: f64,
    /// Evidence passages per candidate.
    pub k: f64,
    /// Candidates per question.
    pub a: f64,
    /// Per-stage calibration constants; stages default to 1.0.
    pub unit_costs: BTreeMap<Stage, f64>,
}

impl Default for CostProfile {
    fn default() -> Self {
        CostProfile {
            l_p: 240.0,
            l_a: 40.0,
            b: 100.0,
            k: 10.0,
            a: 28.7,
            unit_costs: BTreeMap::new(),
        }
    }
}

impl CostProfile {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("l_p", self.l_p),
            ("l_a", self.l_a),
            ("b", self.b),
            ("k", self.k),
            ("a", self.a),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v <= 0.0 {
                return Err(MaqaError::invalid(format!(
                    "cost profile field {name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.k < 1.0 {
            return Err(MaqaError::invalid(format!(
                "cost profile k must be at least 1, got {}",
                self.k
            )));
        }
        for (stage, &c) in &self.unit_costs {
            if !c.is_finite() || c <= 0.0 {
                return Err(MaqaError::invalid(format!(
                    "unit cost for {} must be positive and finite, got {c}",
                    stage.name()
                )));
            }
        }
        Ok(())
    }

    pub fn unit_cost(&self, stage: Stage) -> f64 {
        self.unit_costs.get(&stage).copied().unwrap_or(1.0)
    }
}

/// Formula value before calibration scaling.
pub fn raw_cost(stage: Stage, p: &CostProfile) -> f64 {
    let CostProfile { l_p, l_a, b, k, a, .. } = *p;
    match stage {
        Stage::Recaller => b * (l_p * l_p + l_a * l_p + l_a * l_a),
        Stage::Reranker => b * l_p * l_p + k * b * l_p + k * k,
        Stage::Verifier => a * (k * l_p * l_p + k * l_p),
        Stage::Reader => k * l_p * l_p + l_a * k * l_p + l_a * l_a,
        Stage::Aggregator => a * (l_p * l_p + b * k.log2()),
    }
}

pub fn cost(stage: Stage, p: &CostProfile) -> f64 {
    p.unit_cost(stage) * raw_cost(stage, p)
}

pub fn cost_recaller(p: &CostProfile) -> f64 {
    cost(Stage::Recaller, p)
}

pub fn cost_reranker(p: &CostProfile) -> f64 {
    cost(Stage::Reranker, p)
}

pub fn cost_verifier(p: &CostProfile) -> f64 {
    cost(Stage::Verifier, p)
}

pub fn cost_reader(p: &CostProfile) -> f64 {
    cost(Stage::Reader, p)
}

pub fn cost_aggregator(p: &CostProfile) -> f64 {
    cost(Stage::Aggregator, p)
}

/// Least-squares calibration constant for one stage: the `c` minimizing
/// `sum((c * formula(profile) - seconds)^2)` over the samples.
pub fn fit_unit_cost(stage: Stage, samples: &[(CostProfile, f64)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(MaqaError::invalid("cannot fit a unit cost from no samples"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (profile, seconds) in samples {
        profile.validate()?;
        if !seconds.is_finite() || *seconds < 0.0 {
            return Err(MaqaError::invalid(format!(
                "measured seconds must be finite and non-negative, got {seconds}"
            )));
        }
        let f = raw_cost(stage, profile);
        num += f * seconds;
        den += f * f;
    }
    if den == 0.0 {
        return Err(MaqaError::invalid(
            "formula value is zero across all samples; unit cost is unidentifiable",
        ));
    }
    Ok(num / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub stage: Stage,
    /// Raw formula value at the profile.
    pub units: f64,
    /// `calibration * units`, when a calibration constant was supplied.
    pub seconds: Option<f64>,
}

/// Per-stage cost table at one operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub profile: CostProfile,
    pub rows: Vec<CostRow>,
    pub total_units: f64,
    pub total_seconds: Option<f64>,
}

pub fn cost_report(
    profile: &CostProfile,
    calibration: Option<&BTreeMap<Stage, f64>>,
) -> Result<CostReport> {
    profile.validate()?;
    let mut rows = Vec::with_capacity(Stage::ALL.len());
    let mut total_units = 0.0;
    let mut total_seconds = calibration.map(|_| 0.0);
    for stage in Stage::ALL {
        let units = raw_cost(stage, profile);
        let seconds = calibration.and_then(|c| c.get(&stage)).map(|c| c * units);
        total_units += units;
        if let (Some(t), Some(s)) = (total_seconds.as_mut(), seconds) {
            *t += s;
        }
        rows.push(CostRow { stage, units, seconds });
    }
    Ok(CostReport {
        profile: profile.clone(),
        rows,
        total_units,
        total_seconds,
    })
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "operating point: l_p={} l_a={} b={} k={} a={}",
            self.profile.l_p, self.profile.l_a, self.profile.b, self.profile.k, self.profile.a
        )?;
        writeln!(f, "{:<12} {:>16} {:>12}", "stage", "units", "seconds")?;
        for row in &self.rows {
            match row.seconds {
                Some(s) => writeln!(f, "{:<12} {:>16.1} {:>12.4}", row.stage.name(), row.units, s)?,
                None => writeln!(f, "{:<12} {:>16.1} {:>12}", row.stage.name(), row.units, "-")?,
            }
        }
        match self.total_seconds {
            Some(s) => writeln!(f, "{:<12} {:>16.1} {:>12.4}", "total", self.total_units, s),
            None => writeln!(f, "{:<12} {:>16.1} {:>12}", "total", self.total_units, "-"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn profile(l_p: f64, l_a: f64, b: f64, k: f64, a: f64) -> CostProfile {
        CostProfile {
            l_p,
            l_a,
            b,
            k,
            a,
            unit_costs: BTreeMap::new(),
        }
    }

    #[test]
    fn unit_profiles() {
        let ones = profile(1.0, 1.0, 1.0, 1.0, 1.0);
        assert_eq!(cost_recaller(&ones), 3.0);
        assert_eq!(cost_reranker(&ones), 3.0);
        assert_eq!(cost_verifier(&ones), 2.0);
        assert_eq!(cost_reader(&ones), 3.0);
        assert_eq!(cost_aggregator(&ones), 1.0);
    }

    #[test]
    fn reference_operating_point() {
        let p = CostProfile::default();
        assert_eq!(cost_recaller(&p), 6_880_000.0);
        assert_eq!(cost_reranker(&p), 6_000_100.0);
        assert_eq!(cost_verifier(&p), 28.7 * 578_400.0);
        assert_eq!(cost_reader(&p), 673_600.0);
        let expected_agg = 28.7 * (57_600.0 + 100.0 * 10.0_f64.log2());
        assert!((cost_aggregator(&p) - expected_agg).abs() < 1e-9);
    }

    #[test]
    fn doubling_b_doubles_recaller() {
        let p = CostProfile::default();
        let mut p2 = p.clone();
        p2.b *= 2.0;
        assert_eq!(cost_recaller(&p2), 2.0 * cost_recaller(&p));
    }

    #[test]
    fn verifier_linear_in_a() {
        let p = CostProfile::default();
        let mut p3 = p.clone();
        p3.a *= 3.0;
        assert!((cost_verifier(&p3) - 3.0 * cost_verifier(&p)).abs() < 1e-6);
        // Candidate-count averages 28.7 vs 16.0 give a 1.79x verifier cost
        // ratio at equal k.
        let mut lo = p.clone();
        lo.a = 16.0;
        let ratio = cost_verifier(&p) / cost_verifier(&lo);
        assert!((ratio - 1.79375).abs() < 1e-12);
        assert_eq!((ratio * 100.0).round() / 100.0, 1.79);
    }

    #[test]
    fn verifier_to_reader_ratio_below_candidate_count() {
        let p = CostProfile::default();
        let ratio = cost_verifier(&p) / cost_reader(&p);
        assert!(ratio < p.a);
        // Per-candidate verification is cheaper than one reader pass here.
        assert!(ratio / p.a < 1.0);
    }

    #[test]
    fn reader_k_terms_scale_linearly() {
        let p = CostProfile::default();
        let mut p2 = p.clone();
        p2.k *= 2.0;
        let fixed = p.l_a * p.l_a;
        assert!((cost_reader(&p2) - fixed - 2.0 * (cost_reader(&p) - fixed)).abs() < 1e-6);
    }

    #[test]
    fn reranker_encoding_share_dominates() {
        // The passage-encoding side (both terms carrying l_p) holds at least
        // 90% of the reranker total from l_p = 64 on, at b=100, k=10.
        for l_p in 64..=512 {
            let p = profile(l_p as f64, 40.0, 100.0, 10.0, 1.0);
            let encode = p.b * p.l_p * p.l_p + p.k * p.b * p.l_p;
            assert!(encode / cost_reranker(&p) >= 0.9, "l_p = {l_p}");
        }
        // The quadratic term alone crosses 90% later, at l_p = 91.
        let share = |l_p: f64| {
            let p = profile(l_p, 40.0, 100.0, 10.0, 1.0);
            (p.b * p.l_p * p.l_p) / cost_reranker(&p)
        };
        assert!(share(90.0) < 0.9);
        assert!(share(91.0) >= 0.9);
    }

    #[test]
    fn recaller_approaches_reranker_for_long_encodings() {
        let p = profile(1e6, 40.0, 100.0, 10.0, 1.0);
        let ratio = cost_recaller(&p) / cost_reranker(&p);
        assert!((ratio - 1.0).abs() < 1e-4);
    }

    #[test]
    fn profile_validation() {
        assert!(CostProfile::default().validate().is_ok());
        assert!(profile(0.0, 1.0, 1.0, 1.0, 1.0).validate().is_err());
        assert!(profile(1.0, -2.0, 1.0, 1.0, 1.0).validate().is_err());
        assert!(profile(1.0, 1.0, 1.0, 0.5, 1.0).validate().is_err());
        assert!(profile(1.0, 1.0, f64::NAN, 1.0, 1.0).validate().is_err());
        let mut p = CostProfile::default();
        p.unit_costs.insert(Stage::Reader, 0.0);
        assert!(p.validate().is_err());
    }

    #[test]
    fn unit_costs_scale() {
        let mut p = CostProfile::default();
        p.unit_costs.insert(Stage::Recaller, 2.5);
        assert_eq!(cost_recaller(&p), 2.5 * 6_880_000.0);
        assert_eq!(cost_reranker(&p), 6_000_100.0);
    }

    #[test]
    fn fit_recovers_exact_constant() {
        let samples: Vec<(CostProfile, f64)> = [64.0, 128.0, 240.0, 384.0]
            .iter()
            .map(|&l_p| {
                let p = profile(l_p, 40.0, 100.0, 10.0, 20.0);
                let secs = 3e-7 * raw_cost(Stage::Recaller, &p);
                (p, secs)
            })
            .collect();
        let c = fit_unit_cost(Stage::Recaller, &samples).unwrap();
        assert!((c - 3e-7).abs() < 1e-18);
        assert!(fit_unit_cost(Stage::Recaller, &[]).is_err());
    }

    #[test]
    fn fit_is_least_squares() {
        // Two samples with equal formula value f and mismatched seconds:
        // the minimizer is the mean over f.
        let p = profile(100.0, 10.0, 50.0, 5.0, 8.0);
        let f = raw_cost(Stage::Verifier, &p);
        let c = fit_unit_cost(Stage::Verifier, &[(p.clone(), 2.0 * f), (p, 4.0 * f)]).unwrap();
        assert!((c - 3.0).abs() < 1e-12);
    }

    #[test]
    fn report_rows_and_totals() {
        let p = CostProfile::default();
        let report = cost_report(&p, None).unwrap();
        assert_eq!(report.rows.len(), 5);
        assert!(report.rows.iter().all(|r| r.seconds.is_none()));
        assert_eq!(
            report.total_units,
            report.rows.iter().map(|r| r.units).sum::<f64>()
        );
        let mut calib = BTreeMap::new();
        calib.insert(Stage::Recaller, 1e-6);
        let report = cost_report(&p, Some(&calib)).unwrap();
        assert_eq!(report.rows[0].seconds, Some(6.88));
        assert!(report.rows[1].seconds.is_none());
        let text = report.to_string();
        assert!(text.contains("recaller"));
        assert!(text.contains("aggregator"));
    }

    fn sweep_profile() -> impl Strategy<Value = CostProfile> {
        // l_p >= l_a >= k and b >= k, the regime where the recaller and
        // reranker stay within a small constant factor of each other.
        (1u32..=64, 1u32..=200).prop_flat_map(|(k, extra_b)| {
            let b = k + extra_b;
            (Just(k), Just(b), 0u32..=448, 1u32..=32).prop_map(move |(k, b, extra_lp, la_mul)| {
                let l_a = (k * la_mul) as f64;
                profile(l_a + extra_lp as f64, l_a, b as f64, k as f64, 1.0)
            })
        })
    }

    proptest! {
        #[test]
        fn recaller_reranker_ratio_bounded(p in sweep_profile()) {
            let ratio = cost_recaller(&p) / cost_reranker(&p);
            prop_assert!((1.0..=3.0).contains(&ratio), "ratio {ratio} at {p:?}");
        }

        #[test]
        fn strictly_monotone_in_used_arguments(
            l_p in 1u32..=500, l_a in 1u32..=500, b in 1u32..=500, k in 2u32..=500, a in 1u32..=500
        ) {
            let p = profile(l_p as f64, l_a as f64, b as f64, k as f64, a as f64);
            for stage in Stage::ALL {
                let base = cost(stage, &p);
                let uses = |field: &str| match stage {
                    Stage::Recaller => matches!(field, "l_p" | "l_a" | "b"),
                    Stage::Reranker => matches!(field, "l_p" | "b" | "k"),
                    Stage::Verifier => matches!(field, "l_p" | "k" | "a"),
                    Stage::Reader => matches!(field, "l_p" | "l_a" | "k"),
                    Stage::Aggregator => matches!(field, "l_p" | "b" | "k" | "a"),
                };
                for field in ["l_p", "l_a", "b", "k", "a"] {
                    let mut bumped = p.clone();
                    match field {
                        "l_p" => bumped.l_p += 1.0,
                        "l_a" => bumped.l_a += 1.0,
                        "b" => bumped.b += 1.0,
                        "k" => bumped.k += 1.0,
                        _ => bumped.a += 1.0,
                    }
                    let c = cost(stage, &bumped);
                    if uses(field) {
                        prop_assert!(c > base, "{} not increasing in {field}", stage.name());
                    } else {
                        prop_assert!(c == base, "{} moved with unused {field}", stage.name());
                    }
                }
            }
        }

        #[test]
        fn aggregator_flat_in_b_only_at_k1(b in 1u32..=500) {
            let p = profile(10.0, 5.0, b as f64, 1.0, 2.0);
            let mut more_b = p.clone();
            more_b.b += 50.0;
            prop_assert_eq!(cost_aggregator(&p), cost_aggregator(&more_b));
            let mut k2 = p.clone();
            k2.k = 2.0;
            let mut k2_more_b = more_b;
            k2_more_b.k = 2.0;
            prop_assert!(cost_aggregator(&k2_more_b) > cost_aggregator(&k2));
        }
    }
}
