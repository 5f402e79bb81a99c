//! Evaluation metrics and decision rules.
//!
//! Everything here is a pure f64 function over materialized predictions and
//! labels: set-level concordance for valence/arousal, per-unit binary F1 for
//! the 8 action units, macro F1 and accuracy for the 7 expressions. Batch
//! losses live in [`crate::objectives`]; these metrics are computed over the
//! whole evaluation set, which is not the same thing as averaging per-batch
//! values.

use crate::error::{Error, Result};
use crate::model::{ModelOutput, NUM_AUS, NUM_EXPRESSIONS};
use crate::tensor::Element;

const EPS: f64 = 1e-8;

/// Concordance correlation 2*cov / (var_x + var_y + (mean_x - mean_y)^2)
/// with population (1/N) moments. A vanishing denominator means both series
/// are constant: identical constants score 1, anything else 0.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "ccc series lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "ccc needs at least 2 samples, got {n}"
        )));
    }
    let inv = 1.0 / n as f64;
    let mx = x.iter().sum::<f64>() * inv;
    let my = y.iter().sum::<f64>() * inv;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    sxx *= inv;
    syy *= inv;
    sxy *= inv;
    let md = mx - my;
    let denom = sxx + syy + md * md;
    if denom < EPS {
        let mean_abs_diff = x
            .iter()
            .zip(y)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * inv;
        return Ok(if mean_abs_diff < EPS { 1.0 } else { 0.0 });
    }
    Ok(2.0 * sxy / denom)
}

/// Mean of per-group concordance, groups evaluated independently. Groups
/// with fewer than 2 members are skipped.
pub fn ccc_grouped(groups: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    let mut acc = 0.0;
    let mut counted = 0usize;
    for (x, y) in groups {
        if x.len() < 2 {
            continue;
        }
        acc += ccc(x, y)?;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::InvalidArgument(
            "no group with >= 2 samples".into(),
        ));
    }
    Ok(acc / counted as f64)
}

/// Binary F1 with the zero-division convention: no predicted and no actual
/// positives scores 0.
pub fn binary_f1(pred: &[bool], truth: &[bool]) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if 2 * tp + fp + fn_ == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// Unweighted mean of one-vs-rest F1 over the 7 expression classes.
pub fn expr_macro_f1(pred: &[usize], truth: &[usize]) -> Result<(f64, [f64; NUM_EXPRESSIONS])> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(
            "expression series lengths differ".into(),
        ));
    }
    let mut per_class = [0.0; NUM_EXPRESSIONS];
    for (c, f1) in per_class.iter_mut().enumerate() {
        let p: Vec<bool> = pred.iter().map(|&v| v == c).collect();
        let t: Vec<bool> = truth.iter().map(|&v| v == c).collect();
        *f1 = binary_f1(&p, &t);
    }
    let mean = per_class.iter().sum::<f64>() / NUM_EXPRESSIONS as f64;
    Ok((mean, per_class))
}

/// Mean of per-unit binary F1 over the 8 action units. Rows are packed
/// (N, 8) activation flags.
pub fn au_mean_f1(pred: &[bool], truth: &[bool]) -> Result<(f64, [f64; NUM_AUS])> {
    if pred.len() != truth.len() || pred.len() % NUM_AUS != 0 {
        return Err(Error::InvalidArgument(
            "au series must be equal-length multiples of 8".into(),
        ));
    }
    let n = pred.len() / NUM_AUS;
    let mut per_au = [0.0; NUM_AUS];
    for (k, f1) in per_au.iter_mut().enumerate() {
        let p: Vec<bool> = (0..n).map(|i| pred[i * NUM_AUS + k]).collect();
        let t: Vec<bool> = (0..n).map(|i| truth[i * NUM_AUS + k]).collect();
        *f1 = binary_f1(&p, &t);
    }
    let mean = per_au.iter().sum::<f64>() / NUM_AUS as f64;
    Ok((mean, per_au))
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(
            "accuracy needs equal non-empty series".into(),
        ));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Discrete predictions derived from raw model outputs.
#[derive(Clone, Debug)]
pub struct Decisions {
    /// (N,2) valence/arousal passed through.
    pub va: Vec<[f64; 2]>,
    /// (N,8) action-unit activation flags.
    pub au: Vec<bool>,
    /// (N,8) action-unit probabilities.
    pub au_scores: Vec<f64>,
    /// (N) argmax class, lowest index on ties.
    pub expr: Vec<usize>,
}

/// Argmax with lowest-index tie-break for expressions; an action unit is
/// active iff sigmoid(logit) >= 0.5, i.e. logit >= 0.
pub fn decision_rules<E: Element>(output: &ModelOutput<E>) -> Decisions {
    let n = output.expr_logits.shape()[0];
    let mut va = Vec::with_capacity(n);
    let mut au = Vec::with_capacity(n * NUM_AUS);
    let mut au_scores = Vec::with_capacity(n * NUM_AUS);
    let mut expr = Vec::with_capacity(n);
    for i in 0..n {
        va.push([
            output.va.data()[i * 2].to_f64(),
            output.va.data()[i * 2 + 1].to_f64(),
        ]);
        for k in 0..NUM_AUS {
            let logit = output.au_logits.data()[i * NUM_AUS + k].to_f64();
            au.push(logit >= 0.0);
            au_scores.push(1.0 / (1.0 + (-logit).exp()));
        }
        let row = &output.expr_logits.data()[i * NUM_EXPRESSIONS..(i + 1) * NUM_EXPRESSIONS];
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = c;
            }
        }
        expr.push(best);
    }
    Decisions {
        va,
        au,
        au_scores,
        expr,
    }
}

/// Set-level evaluation results, one value per challenge column plus
/// breakdowns.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ccc_valence: f64,
    pub ccc_arousal: f64,
    pub f1_au: f64,
    pub f1_expr: f64,
    pub accuracy_expr: f64,
    pub per_au_f1: [f64; NUM_AUS],
    pub per_class_f1: [f64; NUM_EXPRESSIONS],
    pub n_va: usize,
    pub n_au: usize,
    pub n_expr: usize,
}

/// Aligned per-task series ready for metric computation.
#[derive(Clone, Debug, Default)]
pub struct EvalSeries {
    pub valence_pred: Vec<f64>,
    pub valence_true: Vec<f64>,
    pub arousal_pred: Vec<f64>,
    pub arousal_true: Vec<f64>,
    /// (N,8) packed flags.
    pub au_pred: Vec<bool>,
    pub au_true: Vec<bool>,
    pub expr_pred: Vec<usize>,
    pub expr_true: Vec<usize>,
}

impl EvalReport {
    pub fn from_series(series: &EvalSeries) -> Result<EvalReport> {
        let ccc_valence = ccc(&series.valence_pred, &series.valence_true)?;
        let ccc_arousal = ccc(&series.arousal_pred, &series.arousal_true)?;
        let (f1_au, per_au_f1) = au_mean_f1(&series.au_pred, &series.au_true)?;
        let (f1_expr, per_class_f1) = expr_macro_f1(&series.expr_pred, &series.expr_true)?;
        let accuracy_expr = accuracy(&series.expr_pred, &series.expr_true)?;
        Ok(EvalReport {
            ccc_valence,
            ccc_arousal,
            f1_au,
            f1_expr,
            accuracy_expr,
            per_au_f1,
            per_class_f1,
            n_va: series.valence_pred.len(),
            n_au: series.au_pred.len() / NUM_AUS,
            n_expr: series.expr_pred.len(),
        })
    }

    /// Key-value serialization, one field per line.
    pub fn to_records(&self) -> String {
        let mut out = String::from("report-version = 1\n");
        out.push_str(&format!("n_va = {}\n", self.n_va));
        out.push_str(&format!("n_au = {}\n", self.n_au));
        out.push_str(&format!("n_expr = {}\n", self.n_expr));
        out.push_str(&format!("ccc_valence = {:.10}\n", self.ccc_valence));
        out.push_str(&format!("ccc_arousal = {:.10}\n", self.ccc_arousal));
        out.push_str(&format!("f1_au = {:.10}\n", self.f1_au));
        out.push_str(&format!("f1_expr = {:.10}\n", self.f1_expr));
        out.push_str(&format!("accuracy_expr = {:.10}\n", self.accuracy_expr));
        for (k, v) in self.per_au_f1.iter().enumerate() {
            out.push_str(&format!("au{k}_f1 = {v:.10}\n"));
        }
        for (c, v) in self.per_class_f1.iter().enumerate() {
            out.push_str(&format!("expr{c}_f1 = {v:.10}\n"));
        }
        out
    }

    /// Parse the `to_records` format back; unknown keys are ignored.
    pub fn parse_records(text: &str) -> Result<EvalReport> {
        let mut report = EvalReport {
            ccc_valence: f64::NAN,
            ccc_arousal: f64::NAN,
            f1_au: f64::NAN,
            f1_expr: f64::NAN,
            accuracy_expr: f64::NAN,
            per_au_f1: [f64::NAN; NUM_AUS],
            per_class_f1: [f64::NAN; NUM_EXPRESSIONS],
            n_va: 0,
            n_au: 0,
            n_expr: 0,
        };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Config {
                line: lineno + 1,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let parse = |v: &str| -> Result<f64> {
                v.parse().map_err(|_| Error::Config {
                    line: lineno + 1,
                    message: format!("bad number '{v}'"),
                })
            };
            match key {
                "report-version" => {}
                "n_va" => report.n_va = parse(value)? as usize,
                "n_au" => report.n_au = parse(value)? as usize,
                "n_expr" => report.n_expr = parse(value)? as usize,
                "ccc_valence" => report.ccc_valence = parse(value)?,
                "ccc_arousal" => report.ccc_arousal = parse(value)?,
                "f1_au" => report.f1_au = parse(value)?,
                "f1_expr" => report.f1_expr = parse(value)?,
                "accuracy_expr" => report.accuracy_expr = parse(value)?,
                k if k.starts_with("au") && k.ends_with("_f1") => {
                    let idx: usize = k[2..k.len() - 3].parse().map_err(|_| Error::Config {
                        line: lineno + 1,
                        message: format!("bad key '{k}'"),
                    })?;
                    report.per_au_f1[idx] = parse(value)?;
                }
                k if k.starts_with("expr") && k.ends_with("_f1") => {
                    let idx: usize = k[4..k.len() - 3].parse().map_err(|_| Error::Config {
                        line: lineno + 1,
                        message: format!("bad key '{k}'"),
                    })?;
                    report.per_class_f1[idx] = parse(value)?;
                }
                _ => {}
            }
        }
        Ok(report)
    }

    /// Challenge-style table; the baseline row renders the published
    /// reference constants.
    pub fn render_table(&self, show_baseline: bool) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>8} {:>10}\n",
            "Structure", "Valence", "Arousal", "AUs", "Expression"
        ));
        if show_baseline {
            let (v, a, au, ex) = BASELINE_ROW;
            out.push_str(&format!(
                "{:<12} {:>8.2} {:>8.2} {:>8.2} {:>10.2}\n",
                "Baseline", v, a, au, ex
            ));
        }
        out.push_str(&format!(
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>10.4}\n",
            "Computed", self.ccc_valence, self.ccc_arousal, self.f1_au, self.f1_expr
        ));
        out.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>8} {:>10.4}\n",
            "(accuracy)", "", "", "", self.accuracy_expr
        ));
        out
    }
}

/// Published validation-set reference row (valence CCC, arousal CCC, AU F1,
/// expression F1).
pub const BASELINE_ROW: (f64, f64, f64, f64) = (0.14, 0.24, 0.31, 0.36);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn ccc_perfect_concordance() {
        assert_eq!(ccc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
    }

    #[test]
    fn ccc_perfect_reversal_is_exactly_minus_one() {
        assert_eq!(ccc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    }

    #[test]
    fn ccc_zero_covariance() {
        assert_eq!(ccc(&[0.5, 0.5, 0.5], &[0.1, 0.9, 0.4]).unwrap(), 0.0);
    }

    #[test]
    fn ccc_degenerate_constants() {
        assert_eq!(ccc(&[0.3, 0.3], &[0.3, 0.3]).unwrap(), 1.0);
        assert_eq!(ccc(&[0.3, 0.3], &[0.4, 0.4]).unwrap(), 0.0);
        assert!(ccc(&[1.0], &[1.0]).is_err());
        assert!(ccc(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn macro_f1_all_predicted_class_zero() {
        // balanced truth over 7 classes, every prediction class 0:
        // class 0 F1 = 2*(1/7)/(1+1/7) = 1/4, all others 0 -> macro 1/28.
        let truth: Vec<usize> = (0..70).map(|i| i % 7).collect();
        let pred = vec![0usize; 70];
        let (macro_f1, per_class) = expr_macro_f1(&pred, &truth).unwrap();
        assert!((per_class[0] - 0.25).abs() < 1e-12);
        assert!((macro_f1 - 0.25 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let truth: Vec<usize> = (0..21).map(|i| i % 7).collect();
        let (macro_f1, _) = expr_macro_f1(&truth, &truth).unwrap();
        assert_eq!(macro_f1, 1.0);
        assert_eq!(accuracy(&truth, &truth).unwrap(), 1.0);
    }

    #[test]
    fn au_all_inactive_predictions_score_zero() {
        // truth half active per unit, predictions all inactive
        let n = 10;
        let truth: Vec<bool> = (0..n * 8).map(|i| (i / 8) % 2 == 0).collect();
        let pred = vec![false; n * 8];
        let (mean, per_au) = au_mean_f1(&pred, &truth).unwrap();
        assert_eq!(mean, 0.0);
        assert!(per_au.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decision_rules_tie_break_and_boundary() {
        let out = ModelOutput::<f64> {
            va: Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap(),
            au_logits: Tensor::new(
                vec![1, 8],
                vec![0.0, -0.1, 0.1, -40.0, 40.0, 0.0, -1e-9, 1e-9],
            )
            .unwrap(),
            expr_logits: Tensor::new(vec![1, 7], vec![1.0; 7]).unwrap(),
        };
        let d = decision_rules(&out);
        assert_eq!(d.expr, vec![0]); // tie -> lowest index
        assert_eq!(
            d.au,
            vec![true, false, true, false, true, true, false, true]
        );
        assert_eq!(d.va[0], [0.3, -0.7]);
    }

    #[test]
    fn decision_rules_match_reference_recomputation() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 64;
        let out = ModelOutput::<f32> {
            va: crate::gradcheck::rand_tensor(vec![n, 2], -1.0, 1.0, &mut rng),
            au_logits: crate::gradcheck::rand_tensor(vec![n, 8], -2.0, 2.0, &mut rng),
            expr_logits: crate::gradcheck::rand_tensor(vec![n, 7], -2.0, 2.0, &mut rng),
        };
        let d = decision_rules(&out);
        for i in 0..n {
            let row: Vec<f32> = out.expr_logits.data()[i * 7..(i + 1) * 7].to_vec();
            let mut best = 0;
            for c in 1..7 {
                if row[c] > row[best] {
                    best = c;
                }
            }
            assert_eq!(d.expr[i], best);
            for k in 0..8 {
                let logit = out.au_logits.data()[i * 8 + k];
                assert_eq!(d.au[i * 8 + k], (1.0 / (1.0 + (-logit).exp())) >= 0.5);
            }
        }
    }

    #[test]
    fn full_set_ccc_differs_from_batch_mean() {
        // Two batches whose internal agreement is poor but whose means track
        // each other: per-batch values average near -1 while the pooled
        // series is strongly positive.
        let b1_pred = [0.0, 0.2];
        let b1_true = [0.2, 0.0];
        let b2_pred = [1.0, 1.2];
        let b2_true = [1.2, 1.0];
        let batch_mean = (ccc(&b1_pred, &b1_true).unwrap() + ccc(&b2_pred, &b2_true).unwrap()) / 2.0;
        let full_pred = [0.0, 0.2, 1.0, 1.2];
        let full_true = [0.2, 0.0, 1.2, 1.0];
        let full = ccc(&full_pred, &full_true).unwrap();
        assert!((full - batch_mean).abs() > 0.5, "full {full} mean {batch_mean}");
        assert!(full > 0.5 && batch_mean < 0.0);
    }

    #[test]
    fn report_round_trip() {
        let series = EvalSeries {
            valence_pred: vec![0.1, 0.5, -0.2],
            valence_true: vec![0.2, 0.4, -0.1],
            arousal_pred: vec![0.0, 0.3, 0.9],
            arousal_true: vec![0.1, 0.2, 0.8],
            au_pred: (0..24).map(|i| i % 3 == 0).collect(),
            au_true: (0..24).map(|i| i % 2 == 0).collect(),
            expr_pred: vec![0, 3, 5],
            expr_true: vec![0, 2, 5],
        };
        let report = EvalReport::from_series(&series).unwrap();
        let parsed = EvalReport::parse_records(&report.to_records()).unwrap();
        assert!((parsed.ccc_valence - report.ccc_valence).abs() < 1e-9);
        assert!((parsed.f1_expr - report.f1_expr).abs() < 1e-9);
        assert_eq!(parsed.n_expr, 3);
    }

    #[test]
    fn baseline_row_renders_expected_constants() {
        let report = EvalReport {
            ccc_valence: 0.5,
            ccc_arousal: 0.5,
            f1_au: 0.5,
            f1_expr: 0.5,
            accuracy_expr: 0.5,
            per_au_f1: [0.5; 8],
            per_class_f1: [0.5; 7],
            n_va: 1,
            n_au: 1,
            n_expr: 1,
        };
        let table = report.render_table(true);
        assert!(table.contains("0.14"));
        assert!(table.contains("0.24"));
        assert!(table.contains("0.31"));
        assert!(table.contains("0.36"));
        assert!(table.contains("Baseline"));
        let without = report.render_table(false);
        assert!(!without.contains("Baseline"));
    }
}
