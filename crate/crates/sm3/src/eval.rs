//! Evaluation protocols: cross-modality pair matching, threshold-free
//! ranking metrics (AUC via pair counting), confusion-matrix metrics, and
//! the linear-probe / fine-tune protocols on true labels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, StageConfig};
use crate::error::{Error, Result};
use crate::losses;
use crate::params::{ParamSet, ParamVars};
use crate::rng::derived_rng;
use crate::synthdata::Dataset;
use crate::tape::Tape;
use crate::tensor::{cosine_similarity_checked, Tensor};
use crate::train::{AdamW, Checkpoint, Sm3Model};

use rand::seq::SliceRandom;

/// Ranking report for matching each dermoscopy embedding against all
/// candidate clinical embeddings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairMatchReport {
    pub n: usize,
    pub acc_at_1: f64,
    pub acc_at_5: f64,
    pub avg_rank: f64,
    pub ranks: Vec<f64>,
}

/// Rank every row of `zd` against all rows of `zc` by cosine similarity.
///
/// The rank of the true match is `1 + (#strictly higher) + 0.5 * (#ties)`,
/// so exact ties average their positions instead of rewarding order of
/// appearance.
pub fn pair_match(zd: &Tensor, zc: &Tensor) -> Result<PairMatchReport> {
    if zd.shape() != zc.shape() || zd.rows() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "pair matching needs equal nonempty embedding matrices, got {:?} vs {:?}",
            zd.shape(),
            zc.shape()
        )));
    }
    let m = zd.rows();
    let mut ranks = Vec::with_capacity(m);
    for i in 0..m {
        let (self_score, _) = cosine_similarity_checked(zd.row(i), zc.row(i));
        let mut higher = 0usize;
        let mut ties = 0usize;
        for j in 0..m {
            if j == i {
                continue;
            }
            let (s, _) = cosine_similarity_checked(zd.row(i), zc.row(j));
            if s > self_score {
                higher += 1;
            } else if s == self_score {
                ties += 1;
            }
        }
        ranks.push(1.0 + higher as f64 + 0.5 * ties as f64);
    }
    let acc_at_1 = ranks.iter().filter(|&&r| r <= 1.0).count() as f64 / m as f64;
    let acc_at_5 = ranks.iter().filter(|&&r| r <= 5.0).count() as f64 / m as f64;
    let avg_rank = ranks.iter().sum::<f64>() / m as f64;
    Ok(PairMatchReport {
        n: m,
        acc_at_1,
        acc_at_5,
        avg_rank,
        ranks,
    })
}

/// Area under the ROC curve by Mann–Whitney pair counting: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
/// Returns `None` when only one class is present (the metric is undefined,
/// not zero).
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (&s, &l) in scores.iter().zip(labels) {
        if l {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    /// False when TP + FP = 0, in which case `precision` is reported as 0
    /// and must not be averaged as a real measurement.
    pub precision_defined: bool,
}

pub fn confusion_metrics(tp: usize, fn_: usize, tn: usize, fp: usize) -> ConfusionMetrics {
    let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    ConfusionMetrics {
        sensitivity: rate(tp, tp + fn_),
        specificity: rate(tn, tn + fp),
        precision: rate(tp, tp + fp),
        precision_defined: tp + fp > 0,
    }
}

/// One-vs-rest metrics for a single class of a single label head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub auc: Option<f64>,
    #[serde(flatten)]
    pub confusion: ConfusionMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: usize,
    pub classes: Vec<ClassMetrics>,
    pub macro_auc: Option<f64>,
    pub macro_sensitivity: f64,
    pub macro_specificity: f64,
    pub macro_precision: f64,
}

/// Full multi-label classification report over one data split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub n: usize,
    pub labels: Vec<LabelMetrics>,
    pub macro_auc: Option<f64>,
    pub macro_sensitivity: f64,
    pub macro_specificity: f64,
    pub macro_precision: f64,
}

impl MetricsReport {
    /// Flat CSV: label,class,auc,sensitivity,specificity,precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,class,auc,sensitivity,specificity,precision\n");
        for l in &self.labels {
            for c in &l.classes {
                let auc = c.auc.map_or(String::new(), |v| v.to_string());
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    l.label, c.class, auc, c.confusion.sensitivity, c.confusion.specificity, c.confusion.precision
                ));
            }
        }
        out
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn mean_opt(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(mean(values))
    }
}

/// Score a set of per-head probability matrices against true labels.
///
/// `probs[k]` is n × c_k; predictions are per-head argmax, AUC is
/// one-vs-rest on the class probability column.
pub fn score_predictions(
    split: &str,
    probs: &[Tensor],
    targets: &[Vec<usize>],
) -> MetricsReport {
    let n = targets.len();
    let mut labels = Vec::with_capacity(probs.len());
    for (k, p) in probs.iter().enumerate() {
        let c = p.cols();
        let preds: Vec<usize> = (0..n)
            .map(|i| {
                let row = p.row(i);
                (0..c)
                    .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                    .unwrap()
            })
            .collect();
        let mut classes = Vec::with_capacity(c);
        for class in 0..c {
            let scores: Vec<f64> = (0..n).map(|i| p.get2(i, class)).collect();
            let is_pos: Vec<bool> = (0..n).map(|i| targets[i][k] == class).collect();
            let (mut tp, mut fn_, mut tn, mut fp) = (0, 0, 0, 0);
            for i in 0..n {
                match (is_pos[i], preds[i] == class) {
                    (true, true) => tp += 1,
                    (true, false) => fn_ += 1,
                    (false, false) => tn += 1,
                    (false, true) => fp += 1,
                }
            }
            classes.push(ClassMetrics {
                class,
                auc: auc(&scores, &is_pos),
                confusion: confusion_metrics(tp, fn_, tn, fp),
            });
        }
        let aucs: Vec<f64> = classes.iter().filter_map(|c| c.auc).collect();
        let sens: Vec<f64> = classes.iter().map(|c| c.confusion.sensitivity).collect();
        let spec: Vec<f64> = classes.iter().map(|c| c.confusion.specificity).collect();
        let prec: Vec<f64> = classes
            .iter()
            .filter(|c| c.confusion.precision_defined)
            .map(|c| c.confusion.precision)
            .collect();
        labels.push(LabelMetrics {
            label: k,
            macro_auc: mean_opt(&aucs),
            macro_sensitivity: mean(&sens),
            macro_specificity: mean(&spec),
            macro_precision: mean(&prec),
            classes,
        });
    }
    let aucs: Vec<f64> = labels.iter().filter_map(|l| l.macro_auc).collect();
    MetricsReport {
        split: split.into(),
        n,
        macro_auc: mean_opt(&aucs),
        macro_sensitivity: mean(&labels.iter().map(|l| l.macro_sensitivity).collect::<Vec<_>>()),
        macro_specificity: mean(&labels.iter().map(|l| l.macro_specificity).collect::<Vec<_>>()),
        macro_precision: mean(&labels.iter().map(|l| l.macro_precision).collect::<Vec<_>>()),
        labels,
    }
}

fn true_targets(dataset: &Dataset, indices: &[usize], label_count: usize) -> Vec<Vec<usize>> {
    indices
        .iter()
        .map(|&i| {
            (0..label_count)
                .map(|k| dataset.samples[i].labels[k])
                .collect()
        })
        .collect()
}

/// Per-head class probabilities for the given split, without dropout.
pub fn predict_probs(
    model: &Sm3Model,
    params: &ParamSet,
    dataset: &Dataset,
    indices: &[usize],
) -> Vec<Tensor> {
    let h_cat = crate::train::concat_features(model, params, dataset, indices);
    let mut tape = Tape::new();
    let vars = ParamVars::bind_trainable(&mut tape, params, |_| false);
    let h = tape.constant(h_cat);
    let logits = model.classifier_logits(&mut tape, &vars, h, None);
    logits
        .into_iter()
        .map(|id| {
            let sm = tape.softmax_rows(id);
            tape.value(sm).clone()
        })
        .collect()
}

/// Train the classifier stack on the train split's *true* labels, starting
/// from `base` parameters. Encoders move only if `train_encoders`.
pub fn fit_classifier(
    dataset: &Dataset,
    base: &ParamSet,
    run: &RunConfig,
    stage: &StageConfig,
    train_encoders: bool,
    seed: u64,
) -> Result<ParamSet> {
    let model = Sm3Model::from_run(run);
    let mut params = base.clone();
    // initialize any classifier components the base checkpoint lacks
    let missing = model
        .stage2_param_names()
        .iter()
        .any(|n| !params.contains(n));
    if missing {
        model.init_stage2(&mut params, seed);
    }
    let trainable = |name: &str| -> bool {
        if Sm3Model::is_encoder_param(name) {
            train_encoders
        } else {
            name.starts_with("label_proj")
                || name.starts_with("relation")
                || name.starts_with("class_head")
        }
    };
    let mut opt = AdamW::new(
        stage.learning_rate,
        run.train.beta1,
        run.train.beta2,
        run.train.weight_decay,
    );
    let k = model.class_counts.len();
    for epoch in 0..stage.epochs {
        let mut order = dataset.train.clone();
        let mut rng = derived_rng(seed, "eval-shuffle", &[epoch as u64]);
        order.shuffle(&mut rng);
        for batch in order.chunks(stage.batch_size) {
            let targets_rows = true_targets(dataset, batch, k);
            let targets: Vec<Vec<usize>> = (0..k)
                .map(|kk| targets_rows.iter().map(|r| r[kk]).collect())
                .collect();
            let (derm, clinic) = crate::train::batch_inputs(dataset, batch);
            let mut tape = Tape::new();
            let vars = ParamVars::bind_trainable(&mut tape, &params, |n| trainable(n));
            let d = tape.constant(derm);
            let c = tape.constant(clinic);
            let h = model.features(&mut tape, &vars, d, c);
            let mut drop_rng = derived_rng(seed, "eval-dropout", &[epoch as u64, batch[0] as u64]);
            let logits = model.classifier_logits(&mut tape, &vars, h, Some(&mut drop_rng));
            let loss = losses::multilabel_ce(&mut tape, &logits, &targets)?;
            let loss_v = tape.value(loss).item();
            if !loss_v.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: epoch + 1 });
            }
            tape.backward(loss);
            let grads = vars.grads(&tape);
            opt.step(&mut params, &grads, |n| trainable(n))?;
        }
    }
    Ok(params)
}

/// Linear-probe protocol: freeze the checkpoint's encoders, train the
/// classifier stack on true labels, report test-split metrics.
pub fn linear_probe(dataset: &Dataset, ckpt: &Checkpoint, run: &RunConfig) -> Result<MetricsReport> {
    let params = fit_classifier(dataset, &ckpt.params, run, &run.eval.probe, false, run.train.seed)?;
    let model = Sm3Model::from_run(run);
    let probs = predict_probs(&model, &params, dataset, &dataset.test);
    let targets = true_targets(dataset, &dataset.test, model.class_counts.len());
    Ok(score_predictions("test", &probs, &targets))
}

/// Fine-tune protocol: same as the probe, but encoder weights train too.
pub fn finetune(dataset: &Dataset, ckpt: &Checkpoint, run: &RunConfig) -> Result<MetricsReport> {
    let params =
        fit_classifier(dataset, &ckpt.params, run, &run.eval.finetune, true, run.train.seed)?;
    let model = Sm3Model::from_run(run);
    let probs = predict_probs(&model, &params, dataset, &dataset.test);
    let targets = true_targets(dataset, &dataset.test, model.class_counts.len());
    Ok(score_predictions("test", &probs, &targets))
}

/// Evaluate a checkpoint's pair-matching quality on one split.
pub fn eval_pairmatch(
    dataset: &Dataset,
    ckpt: &Checkpoint,
    indices: &[usize],
) -> Result<PairMatchReport> {
    let (zd, zc) = crate::train::pairmatch_embeddings(ckpt, dataset, indices);
    pair_match(&zd, &zc)
}

/// Strategy-comparison table: metric name -> (run label -> value).
pub fn comparison_table(rows: &[(String, serde_json::Value)]) -> BTreeMap<String, BTreeMap<String, f64>> {
    let mut table: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (name, report) in rows {
        if let Some(obj) = report.as_object() {
            for key in ["acc_at_1", "acc_at_5", "avg_rank", "macro_auc", "macro_sensitivity", "macro_specificity", "macro_precision"] {
                if let Some(v) = obj.get(key).and_then(|v| v.as_f64()) {
                    table
                        .entry(key.to_string())
                        .or_default()
                        .insert(name.clone(), v);
                }
            }
        }
    }
    table
}
