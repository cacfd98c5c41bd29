use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Area under the monotone precision envelope at every recall step.
    #[default]
    AllPoints,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.0.
    ElevenPoint,
}

impl std::str::FromStr for Interpolation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all_points" | "all-points" => Ok(Self::AllPoints),
            "eleven_point" | "eleven-point" | "11" => Ok(Self::ElevenPoint),
            other => Err(format!("unknown interpolation `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub confidence: f64,
}

/// One PR point per ranked detection using cumulative TP counts.
///
/// `ranked` holds `(confidence, is_true_positive)` already in ranking order.
/// With no ground truth every recall is 0.
pub fn pr_curve(ranked: &[(f64, bool)], n_ground_truth: usize) -> Vec<PrPoint> {
    let mut tp = 0usize;
    ranked
        .iter()
        .enumerate()
        .map(|(k, &(confidence, is_tp))| {
            if is_tp {
                tp += 1;
            }
            let recall = if n_ground_truth == 0 {
                0.0
            } else {
                tp as f64 / n_ground_truth as f64
            };
            PrPoint {
                recall,
                precision: tp as f64 / (k + 1) as f64,
                confidence,
            }
        })
        .collect()
}

/// Interpolated precision: at each point, the max precision at that point or
/// any later one (i.e. at any recall >= this point's recall).
pub fn precision_envelope(points: &[PrPoint]) -> Vec<f64> {
    let mut env = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for (i, p) in points.iter().enumerate().rev() {
        running = running.max(p.precision);
        env[i] = running;
    }
    env
}

pub fn average_precision(points: &[PrPoint], interpolation: Interpolation) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let env = precision_envelope(points);
    let ap = match interpolation {
        Interpolation::AllPoints => {
            let mut prev_recall = 0.0;
            let mut area = 0.0;
            for (p, &e) in points.iter().zip(&env) {
                let step = p.recall - prev_recall;
                if step > 0.0 {
                    area += step * e;
                }
                prev_recall = p.recall;
            }
            area
        }
        Interpolation::ElevenPoint => {
            let total: f64 = (0..=10)
                .map(|t| {
                    let level = t as f64 / 10.0;
                    // env is non-increasing, so the first point reaching the
                    // recall level carries the max over all later points.
                    points
                        .iter()
                        .position(|p| p.recall >= level)
                        .map_or(0.0, |i| env[i])
                })
                .sum();
            total / 11.0
        }
    };
    ap.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tp_fp_tp_two_ground_truths() {
        let pts = pr_curve(&[(0.9, true), (0.8, false), (0.7, true)], 2);
        let rp: Vec<(f64, f64)> = pts.iter().map(|p| (p.recall, p.precision)).collect();
        assert_eq!(rp, vec![(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0)]);
        let ap = average_precision(&pts, Interpolation::AllPoints);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn all_true_positive_precision_is_one() {
        let pts = pr_curve(&[(0.9, true), (0.8, true), (0.1, true)], 3);
        assert!(pts.iter().all(|p| p.precision == 1.0));
        assert_eq!(average_precision(&pts, Interpolation::AllPoints), 1.0);
        assert_eq!(average_precision(&pts, Interpolation::ElevenPoint), 1.0);
    }

    #[test]
    fn all_false_positive() {
        let pts = pr_curve(&[(0.9, false), (0.8, false), (0.1, false)], 2);
        for p in &pts {
            assert_eq!(p.recall, 0.0);
            assert_eq!(p.precision, 0.0);
        }
        assert_eq!(average_precision(&pts, Interpolation::AllPoints), 0.0);
    }

    #[test]
    fn empty_curve_has_zero_ap() {
        assert_eq!(average_precision(&[], Interpolation::AllPoints), 0.0);
        assert_eq!(average_precision(&[], Interpolation::ElevenPoint), 0.0);
    }

    #[test]
    fn eleven_point_half_recall() {
        // Single TP out of 2 GT: recall 0.5 at precision 1 -> levels 0..=0.5 hit.
        let pts = pr_curve(&[(0.9, true)], 2);
        let ap = average_precision(&pts, Interpolation::ElevenPoint);
        assert!((ap - 6.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn no_ground_truth_recall_zero() {
        let pts = pr_curve(&[(0.9, false)], 0);
        assert_eq!(pts[0].recall, 0.0);
    }
}
