//! Quantitative evaluation: masked NCC against ground-truth difference maps,
//! regression metrics with t-approximated p-values, the independent-classifier
//! flip test, and the FA-map/phenotype correlation comparison.
//!
//! All statistics are computed in `f64` regardless of input precision.
//! "mean ± std" uses the population standard deviation (divisor N).

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Translation direction an attribution score refers to.
/// `Pos` is class 0 → 1 (maps `M_x`), `Neg` is class 1 → 0 (maps `M_y`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Direction {
    Pos,
    Neg,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::Pos => write!(f, "ncc+"),
            Direction::Neg => write!(f, "ncc-"),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(MeanStd { mean, std: var.sqrt() })
    }
}

/// Aggregated per-subject NCC for one direction; degenerate records are
/// skipped and counted rather than failing the whole evaluation.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct AttributionScore {
    pub direction: Direction,
    pub mean: f64,
    pub std: f64,
    pub n_used: usize,
    pub n_skipped: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct RegressionMetrics {
    pub n: usize,
    pub mae: MeanStd,
    pub pearson_r: f64,
    pub pearson_p: f64,
    pub spearman_rho: f64,
    pub spearman_p: f64,
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct ClassFlip {
    pub n: usize,
    pub flipped: usize,
    /// `None` when no translations targeted this class.
    pub rate: Option<f64>,
}

/// Flip-test outcome; an empty translation set yields zero counts and `None`
/// rates, never a division by zero.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct FlipReport {
    pub per_class: [ClassFlip; 2],
    pub overall: Option<f64>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CorrelationComparison {
    pub r_pred: f64,
    pub p_pred: f64,
    pub r_true: f64,
    pub p_true: f64,
    /// Whether the predicted phenotype correlates more strongly with the mean
    /// FA signal than the true phenotype does.
    pub pred_stronger: bool,
}

/// One labeled row of the NCC table (method × direction).
#[derive(Clone, Debug, Serialize)]
pub struct LabeledScore {
    pub method: String,
    pub score: AttributionScore,
}

/// Full evaluation output.
///
/// CSV schema (`to_csv`): header `section,label,value`, one row per scalar;
/// NCC rows use labels `<method>/<direction>/<field>`.
#[derive(Clone, Debug, Default, Serialize)]
pub struct MetricsReport {
    pub n_test: usize,
    pub accuracy: Option<f64>,
    pub ncc: Vec<LabeledScore>,
    pub regression: Option<RegressionMetrics>,
    pub flip: Option<FlipReport>,
    pub real_flip_reference: Option<FlipReport>,
    pub fa_correlation: Option<CorrelationComparison>,
}

/// Pearson correlation of two masked grids.
pub fn ncc(a: &Array2<f32>, b: &Array2<f32>, mask: &Array2<bool>) -> Result<f64> {
    if a.dim() != b.dim() || a.dim() != mask.dim() {
        return Err(Error::Contract(format!(
            "ncc shape mismatch: {:?} vs {:?} vs {:?}",
            a.dim(),
            b.dim(),
            mask.dim()
        )));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for ((av, bv), &m) in a.iter().zip(b.iter()).zip(mask.iter()) {
        if m {
            xs.push(*av as f64);
            ys.push(*bv as f64);
        }
    }
    if xs.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "ncc needs at least 2 masked pixels, got {}",
            xs.len()
        )));
    }
    pearson(&xs, &ys)
}

/// Pearson correlation with a degenerate-input error on zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::DegenerateInput(
            "correlation undefined: an input is constant".into(),
        ));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Two-sided p-value for a correlation via the t approximation with n−2
/// degrees of freedom.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    if n < 3 {
        return 1.0;
    }
    let df = (n - 2) as f64;
    let denom = 1.0 - r * r;
    if denom <= f64::EPSILON {
        return 0.0;
    }
    let t = r * (df / denom).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
    2.0 * (1.0 - dist.cdf(t.abs()))
}

/// Ranks with ties replaced by the average rank of the tied group (1-based).
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j share the average of ranks i+1..=j+1
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Per-subject `ncc(|map|, |gt_diff|, mask)`, aggregated as mean ± std.
/// Subjects with degenerate inputs (constant within the mask) are skipped and
/// counted in `n_skipped`.
pub fn evaluate_attribution(
    maps: &[Array2<f32>],
    gt_diffs: &[Array2<f32>],
    masks: &[Array2<bool>],
    direction: Direction,
) -> Result<AttributionScore> {
    if maps.len() != gt_diffs.len() || maps.len() != masks.len() {
        return Err(Error::Contract(format!(
            "evaluate_attribution needs aligned lists, got {}/{}/{}",
            maps.len(),
            gt_diffs.len(),
            masks.len()
        )));
    }
    let mut scores = Vec::new();
    let mut skipped = 0usize;
    for ((m, g), mask) in maps.iter().zip(gt_diffs).zip(masks) {
        let am = m.mapv(f32::abs);
        let ag = g.mapv(f32::abs);
        match ncc(&am, &ag, mask) {
            Ok(v) => scores.push(v),
            Err(Error::DegenerateInput(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let stats = MeanStd::of(&scores).ok_or_else(|| {
        Error::DegenerateInput("all subjects degenerate in attribution evaluation".into())
    })?;
    Ok(AttributionScore {
        direction,
        mean: stats.mean,
        std: stats.std,
        n_used: scores.len(),
        n_skipped: skipped,
    })
}

/// MAE (mean ± std), Pearson and Spearman with p-values.
pub fn regression_metrics(pred: &[f64], truth: &[f64]) -> Result<RegressionMetrics> {
    if pred.len() != truth.len() || pred.len() < 3 {
        return Err(Error::Contract(format!(
            "regression metrics need equal lengths ≥ 3, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let abs_err: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect();
    let mae = MeanStd::of(&abs_err).expect("non-empty");
    let r = pearson(pred, truth)?;
    let rho = spearman(pred, truth)?;
    Ok(RegressionMetrics {
        n: pred.len(),
        mae,
        pearson_r: r,
        pearson_p: correlation_p_value(r, pred.len()),
        spearman_rho: rho,
        spearman_p: correlation_p_value(rho, pred.len()),
    })
}

/// Fraction of translated images the independent classifier assigns to their
/// target class, per target class. `classify` returns the class-1 probability.
pub fn flip_test(
    mut classify: impl FnMut(&Array2<f32>) -> Result<f64>,
    images: &[Array2<f32>],
    target_labels: &[u8],
) -> Result<FlipReport> {
    if images.len() != target_labels.len() {
        return Err(Error::Contract(format!(
            "flip test needs aligned images and labels, got {} and {}",
            images.len(),
            target_labels.len()
        )));
    }
    let mut per_class = [ClassFlip::default(), ClassFlip::default()];
    for (img, &label) in images.iter().zip(target_labels) {
        if label > 1 {
            return Err(Error::Contract(format!("class label must be 0 or 1, got {label}")));
        }
        let p1 = classify(img)?;
        let predicted = u8::from(p1 >= 0.5);
        let slot = &mut per_class[label as usize];
        slot.n += 1;
        if predicted == label {
            slot.flipped += 1;
        }
    }
    for slot in &mut per_class {
        slot.rate = (slot.n > 0).then(|| slot.flipped as f64 / slot.n as f64);
    }
    let total_n = per_class[0].n + per_class[1].n;
    let overall = (total_n > 0)
        .then(|| (per_class[0].flipped + per_class[1].flipped) as f64 / total_n as f64);
    Ok(FlipReport { per_class, overall })
}

/// Pearson correlation of mean FA signal against predicted and against true
/// phenotypes, with p-values and the "predicted is stronger" comparison.
pub fn fa_phenotype_correlation(
    fa_means: &[f64],
    predicted: &[f64],
    truth: &[f64],
) -> Result<CorrelationComparison> {
    if fa_means.len() != predicted.len() || fa_means.len() != truth.len() {
        return Err(Error::Contract("fa_phenotype_correlation needs aligned lists".into()));
    }
    if fa_means.len() < 3 {
        return Err(Error::Contract("fa_phenotype_correlation needs n ≥ 3".into()));
    }
    let r_pred = pearson(fa_means, predicted)?;
    let r_true = pearson(fa_means, truth)?;
    let n = fa_means.len();
    Ok(CorrelationComparison {
        r_pred,
        p_pred: correlation_p_value(r_pred, n),
        r_true,
        p_true: correlation_p_value(r_true, n),
        pred_stronger: r_pred > r_true,
    })
}

impl MetricsReport {
    /// `section,label,value` rows; floats with full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,label,value\n");
        let mut row = |section: &str, label: &str, value: f64| {
            out.push_str(&format!("{section},{label},{value}\n"));
        };
        row("dataset", "n_test", self.n_test as f64);
        if let Some(acc) = self.accuracy {
            row("classification", "accuracy", acc);
        }
        for ls in &self.ncc {
            let base = format!("{}/{}", ls.method, ls.score.direction);
            row("ncc", &format!("{base}/mean"), ls.score.mean);
            row("ncc", &format!("{base}/std"), ls.score.std);
            row("ncc", &format!("{base}/n_used"), ls.score.n_used as f64);
            row("ncc", &format!("{base}/n_skipped"), ls.score.n_skipped as f64);
        }
        if let Some(reg) = &self.regression {
            row("regression", "mae_mean", reg.mae.mean);
            row("regression", "mae_std", reg.mae.std);
            row("regression", "pearson_r", reg.pearson_r);
            row("regression", "pearson_p", reg.pearson_p);
            row("regression", "spearman_rho", reg.spearman_rho);
            row("regression", "spearman_p", reg.spearman_p);
        }
        let mut flip_rows = |prefix: &str, f: &FlipReport| {
            for (c, slot) in f.per_class.iter().enumerate() {
                row(prefix, &format!("class{c}_n"), slot.n as f64);
                if let Some(rate) = slot.rate {
                    row(prefix, &format!("class{c}_rate"), rate);
                }
            }
            if let Some(overall) = f.overall {
                row(prefix, "overall", overall);
            }
        };
        if let Some(f) = &self.flip {
            flip_rows("flip", f);
        }
        if let Some(f) = &self.real_flip_reference {
            flip_rows("flip_real_reference", f);
        }
        if let Some(c) = &self.fa_correlation {
            row("fa_correlation", "r_pred", c.r_pred);
            row("fa_correlation", "p_pred", c.p_pred);
            row("fa_correlation", "r_true", c.r_true);
            row("fa_correlation", "p_true", c.p_true);
            row("fa_correlation", "pred_stronger", f64::from(c.pred_stronger));
        }
        out
    }

    /// Human-readable aligned table.
    pub fn render_table(&self) -> String {
        let mut lines: Vec<(String, String)> = Vec::new();
        lines.push(("test subjects".into(), self.n_test.to_string()));
        if let Some(acc) = self.accuracy {
            lines.push(("accuracy".into(), format!("{acc:.3}")));
        }
        for ls in &self.ncc {
            lines.push((
                format!("{} {}", ls.method, ls.score.direction),
                format!(
                    "{:.3} ± {:.3}  (n={}, skipped {})",
                    ls.score.mean, ls.score.std, ls.score.n_used, ls.score.n_skipped
                ),
            ));
        }
        if let Some(reg) = &self.regression {
            lines.push(("mae".into(), format!("{:.3} ± {:.3}", reg.mae.mean, reg.mae.std)));
            lines.push((
                "pearson".into(),
                format!("r={:.3} (p={:.2e})", reg.pearson_r, reg.pearson_p),
            ));
            lines.push((
                "spearman".into(),
                format!("rho={:.3} (p={:.2e})", reg.spearman_rho, reg.spearman_p),
            ));
        }
        let flip_line = |f: &FlipReport| {
            let fmt = |s: &ClassFlip| match s.rate {
                Some(r) => format!("{r:.3} (n={})", s.n),
                None => "n/a".into(),
            };
            format!("class0 {}  class1 {}", fmt(&f.per_class[0]), fmt(&f.per_class[1]))
        };
        if let Some(f) = &self.flip {
            lines.push(("flip rate".into(), flip_line(f)));
        }
        if let Some(f) = &self.real_flip_reference {
            lines.push(("flip rate (real)".into(), flip_line(f)));
        }
        if let Some(c) = &self.fa_correlation {
            lines.push((
                "fa corr".into(),
                format!(
                    "r_pred={:.3} (p={:.2e})  r_true={:.3} (p={:.2e})  pred_stronger={}",
                    c.r_pred, c.p_pred, c.r_true, c.p_true, c.pred_stronger
                ),
            ));
        }
        let width = lines.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&format!("{k:<width$}  {v}\n"));
        }
        out
    }
}
