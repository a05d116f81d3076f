//! AUC, log-loss and RelaImpr per held-out split.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{predict_ctr, PROB_CLAMP};
use crate::data::{Instance, SplitSet, SPLIT_NAMES};
use crate::training::{DeepFmBaseline, TrainError, VelfModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC undefined: labels contain a single class")]
    SingleClass,
    #[error("RelaImpr undefined for a base AUC of 0.5")]
    RandomBase,
    #[error("score {0} outside (0, 1)")]
    ScoreOutOfRange(f64),
    #[error("{scores} scores for {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no instances")]
    Empty,
    #[error("model vocabulary does not match the splits: {0}")]
    VocabMismatch(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Mann-Whitney AUC by rank sum; tied scores share their average rank.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 averaged
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Quadratic pair-counting AUC; the reference the rank-sum form must match.
pub fn auc_brute_force(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    check_lengths(scores, labels)?;
    let (mut credit, mut pairs) = (0.0, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] == 1 {
                continue;
            }
            pairs += 1;
            credit += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
        }
    }
    if pairs == 0 {
        return Err(EvalError::SingleClass);
    }
    Ok(credit / pairs as f64)
}

/// Relative AUC improvement over `base`, in percent.
pub fn rela_impr(auc_measured: f64, auc_base: f64) -> Result<f64, EvalError> {
    if auc_base == 0.5 {
        return Err(EvalError::RandomBase);
    }
    Ok(((auc_measured - 0.5) / (auc_base - 0.5) - 1.0) * 100.0)
}

/// Mean negative log-likelihood; scores are clamped by `1e-7` first.
pub fn log_loss(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    check_lengths(scores, labels)?;
    let mut total = 0.0;
    for (&s, &y) in scores.iter().zip(labels) {
        if !(s > 0.0 && s < 1.0) {
            return Err(EvalError::ScoreOutOfRange(s));
        }
        let p = s.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub model: String,
    pub split: String,
    pub count: usize,
    pub auc: Option<f64>,
    pub log_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rela_impr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub base_model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

/// One model's metrics on every held-out split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub model: String,
    pub splits: Vec<SplitMetrics>,
}

impl SplitReport {
    pub fn get(&self, split: &str) -> Option<&SplitMetrics> {
        self.splits.iter().find(|m| m.split == split)
    }

    pub fn auc(&self, split: &str) -> Option<f64> {
        self.get(split).and_then(|m| m.auc)
    }

    /// Fill RelaImpr against `base` wherever both AUCs exist.
    pub fn with_base(mut self, base: &SplitReport) -> Self {
        for m in &mut self.splits {
            if let (Some(a), Some(b)) = (m.auc, base.auc(&m.split)) {
                m.rela_impr = rela_impr(a, b).ok();
                m.base_model = Some(base.model.clone());
            }
        }
        self
    }

    pub fn to_jsonl(&self) -> String {
        self.splits.iter().map(|m| serde_json::to_string(m).expect("serializable") + "\n").collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let splits: Vec<SplitMetrics> = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?;
        let model = splits.first().map(|m| m.model.clone()).unwrap_or_default();
        Ok(SplitReport { model, splits })
    }
}

/// Score every split with `logits` (higher means more likely to click).
pub fn evaluate_with(
    model: &str,
    splits: &SplitSet,
    logits: impl Fn(&[&Instance]) -> Result<Vec<f64>, EvalError>,
) -> Result<SplitReport, EvalError> {
    let mut out = Vec::with_capacity(SPLIT_NAMES.len());
    for (name, insts) in splits.test_splits() {
        let batch: Vec<&Instance> = insts.iter().collect();
        let labels: Vec<u8> = insts.iter().map(|i| i.label).collect();
        let mut m = SplitMetrics {
            model: model.to_string(),
            split: name.to_string(),
            count: insts.len(),
            auc: None,
            log_loss: None,
            rela_impr: None,
            base_model: None,
            error: None,
        };
        if insts.is_empty() {
            m.error = Some(EvalError::Empty.to_string());
        } else {
            let s = logits(&batch)?;
            let probs: Vec<f64> = s.iter().map(|&x| predict_ctr(x)).collect();
            match auc(&s, &labels) {
                Ok(a) => m.auc = Some(a),
                Err(e) => m.error = Some(e.to_string()),
            }
            m.log_loss = Some(log_loss(&probs, &labels)?);
        }
        out.push(m);
    }
    Ok(SplitReport { model: model.to_string(), splits: out })
}

/// Evaluate a trained model through its inference path.
pub fn evaluate_splits(name: &str, model: &VelfModel<f32>, splits: &SplitSet) -> Result<SplitReport, EvalError> {
    if model.schema != splits.schema {
        return Err(EvalError::VocabMismatch(format!("model {:?} vs splits {:?}", model.schema, splits.schema)));
    }
    evaluate_with(name, splits, |b| Ok(model.logits(b)?))
}

pub fn evaluate_baseline(name: &str, model: &DeepFmBaseline<f32>, splits: &SplitSet) -> Result<SplitReport, EvalError> {
    evaluate_with(name, splits, |b| Ok(model.logits(b)?))
}

/// Mean and sample standard deviation of one split's AUC over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    pub model: String,
    pub split: String,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, std)
}

/// Per-split AUC mean and std over several runs of the same model.
pub fn aggregate(model: &str, runs: &[SplitReport]) -> Vec<AucSummary> {
    SPLIT_NAMES
        .iter()
        .map(|&split| {
            let aucs: Vec<f64> = runs.iter().filter_map(|r| r.auc(split)).collect();
            let (mean, std) = mean_std(&aucs);
            AucSummary { model: model.to_string(), split: split.to_string(), runs: aucs.len(), mean, std }
        })
        .collect()
}

/// Plain-text table, one row per model, splits as columns.
pub fn render_table(reports: &[SplitReport]) -> String {
    let mut out = format!("{:<16}", "model");
    for s in SPLIT_NAMES {
        let _ = write!(out, " {s:>20}");
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{:<16}", r.model);
        for s in SPLIT_NAMES {
            let cell = match r.get(s) {
                Some(SplitMetrics { auc: Some(a), rela_impr: Some(ri), .. }) => format!("{a:.4} ({ri:+.1}%)"),
                Some(SplitMetrics { auc: Some(a), .. }) => format!("{a:.4}"),
                _ => "n/a".to_string(),
            };
            let _ = write!(out, " {cell:>20}");
        }
        out.push('\n');
    }
    out
}

/// Plain-text table of aggregated AUCs, `mean±std`.
pub fn render_summary(rows: &[AucSummary]) -> String {
    let mut models: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    let mut out = format!("{:<16}", "model");
    for s in SPLIT_NAMES {
        let _ = write!(out, " {s:>16}");
    }
    out.push('\n');
    for m in models {
        let _ = write!(out, "{m:<16}");
        for s in SPLIT_NAMES {
            let cell = rows
                .iter()
                .find(|r| r.model == m && r.split == s)
                .filter(|r| r.runs > 0)
                .map_or("n/a".to_string(), |r| format!("{:.4}±{:.4}", r.mean, r.std));
            let _ = write!(out, " {cell:>16}");
        }
        out.push('\n');
    }
    out
}
