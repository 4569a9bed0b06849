//! Linear evaluation of frozen encoders: a softmax probe per modality on
//! pooled features, score-fused multi-stream accuracy, and cosine kNN
//! retrieval as a probe-free diagnostic.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, NORM_EPS};
use crate::encoder::{
    encode, insert_params, standardized_frames, EncoderStack, GradientSet, ParamBlock, ParamSet,
};
use crate::engine::train::{mix_seed, sgd_step};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::modality::{derive_all, ModalityKind};
use crate::skeleton::{resize_sequence, SkeletonSequence, SkeletonTopology, RESIZE_FRAMES};

const SEED_DOMAIN_PROBE_SHUFFLE: u64 = 21;

/// Probe-training hyperparameters: supervised softmax regression over frozen
/// features, same momentum descent as pretraining, one rate drop late in the
/// run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub knn_k: usize,
    /// Per-stream fusion weights; `None` is the uniform mean.
    pub fusion_weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            epochs: 100,
            batch_size: 128,
            learning_rate: 0.1,
            lr_drop_epoch: 80,
            lr_drop_factor: 0.1,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            knn_k: 5,
            fusion_weights: None,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.lr_drop_factor <= 0.0 {
            return Err(Error::Config("learning rate terms must be positive".into()));
        }
        if self.lr_drop_epoch > self.epochs {
            return Err(Error::Config(format!(
                "drop epoch {} is past the {} total",
                self.lr_drop_epoch, self.epochs
            )));
        }
        if !(0.0..=1.0).contains(&self.sgd_momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("bad optimizer coefficients".into()));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("retrieval depth must be at least 1".into()));
        }
        if let Some(w) = &self.fusion_weights {
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config("fusion weights must be nonnegative with positive sum".into()));
            }
        }
        Ok(())
    }

    fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.learning_rate * self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }
}

/// A trained linear classifier over frozen features.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    /// feature width x classes.
    pub weights: Matrix,
    /// 1 x classes.
    pub bias: Matrix,
}

impl LinearProbe {
    pub fn classes(&self) -> usize {
        self.weights.cols()
    }

    /// Raw class scores, one row per sample.
    pub fn logits(&self, features: &Matrix) -> Matrix {
        let mut out = features.matmul(&self.weights);
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                let v = out.get(r, c) + self.bias.get(0, c);
                out.set(r, c, v);
            }
        }
        out
    }

    /// Softmax class probabilities, one row per sample.
    pub fn probabilities(&self, features: &Matrix) -> Matrix {
        let mut out = self.logits(features);
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        out
    }
}

/// Extract pooled backbone features (one row per sample) with the stack's
/// query encoder. The stack is read-only throughout.
pub fn extract_features(
    stack: &EncoderStack,
    dataset: &[SkeletonSequence],
    topo: &SkeletonTopology,
) -> Result<Matrix> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot extract features from an empty dataset".into()));
    }
    let slot = ModalityKind::ALL
        .iter()
        .position(|k| *k == stack.kind)
        .unwrap();
    let mut samples = Vec::with_capacity(dataset.len());
    for seq in dataset {
        let resized = resize_sequence(seq, RESIZE_FRAMES)?;
        let derived = derive_all(&resized, topo)?;
        samples.push(standardized_frames(&derived[slot].data));
    }
    let mut tape = Tape::new();
    let nodes = insert_params(&mut tape, &stack.query, false);
    let features = encode(&mut tape, &nodes, &samples);
    Ok(tape.value(features).clone())
}

/// Labels for a dataset, rejecting unlabeled samples.
pub fn collect_labels(dataset: &[SkeletonSequence]) -> Result<Vec<usize>> {
    dataset
        .iter()
        .enumerate()
        .map(|(i, seq)| {
            seq.label()
                .map(|l| l as usize)
                .ok_or_else(|| Error::Data(format!("sample {i} has no label")))
        })
        .collect()
}

/// Train a softmax probe on frozen features with momentum descent.
pub fn train_probe(features: &Matrix, labels: &[usize], config: &EvalConfig) -> Result<LinearProbe> {
    config.validate()?;
    if features.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows vs {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if features.rows() == 0 {
        return Err(Error::Data("cannot train a probe on an empty dataset".into()));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let distinct = {
        let mut seen = vec![false; classes];
        for &l in labels {
            seen[l] = true;
        }
        seen.iter().filter(|s| **s).count()
    };
    if distinct < 2 {
        return Err(Error::Data(
            "probe training needs at least two distinct classes".into(),
        ));
    }
    let width = features.cols();

    let mut params = ParamSet::from_blocks(vec![
        ParamBlock {
            name: "probe.w".into(),
            value: Matrix::zeros(width, classes),
        },
        ParamBlock {
            name: "probe.b".into(),
            value: Matrix::zeros(1, classes),
        },
    ]);
    let mut velocity = GradientSet {
        blocks: params.zeros_like().blocks().to_vec(),
    };

    for epoch in 0..config.epochs {
        let lr = config.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..features.rows()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
            SEED_DOMAIN_PROBE_SHUFFLE,
            config.seed,
            epoch as u64,
        ]));
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut x = Matrix::zeros(batch.len(), width);
            let mut y = Vec::with_capacity(batch.len());
            for (row, &i) in batch.iter().enumerate() {
                x.row_mut(row).copy_from_slice(features.row(i));
                y.push(labels[i]);
            }
            let mut tape = Tape::new();
            let xn = tape.constant(x);
            let w = tape.param(params.block("probe.w").clone());
            let b = tape.param(params.block("probe.b").clone());
            let scores = tape.matmul(xn, w);
            let logits = tape.add_row_bias(scores, b);
            let lse = tape.log_sum_exp_rows(logits);
            let picked = tape.gather_cols(logits, y);
            let gap = tape.sub(lse, picked);
            let loss = tape.mean_rows(gap);
            tape.backward(loss);
            let grads = GradientSet {
                blocks: vec![
                    ParamBlock {
                        name: "probe.w".into(),
                        value: tape.grad(w).unwrap().clone(),
                    },
                    ParamBlock {
                        name: "probe.b".into(),
                        value: tape.grad(b).unwrap().clone(),
                    },
                ],
            };
            sgd_step(
                &mut params,
                &mut velocity,
                &grads,
                lr,
                config.sgd_momentum,
                config.weight_decay,
            );
        }
    }
    Ok(LinearProbe {
        weights: params.block("probe.w").clone(),
        bias: params.block("probe.b").clone(),
    })
}

/// Top-1 accuracy of one probe over one feature matrix.
pub fn probe_accuracy(probe: &LinearProbe, features: &Matrix, labels: &[usize]) -> f64 {
    let probs = probe.probabilities(features);
    let mut hits = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        if argmax(probs.row(r)) == label {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy, confusion, and retrieval summary of an evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_modality_top1: BTreeMap<String, f64>,
    /// Present when score fusion across streams was requested.
    pub fused_top1: Option<f64>,
    /// Confusion of the fused prediction (or the single stream), rows true
    /// class, columns predicted class.
    pub confusion: Vec<Vec<usize>>,
    /// kNN retrieval precision per modality, when requested.
    pub precision_at_k: BTreeMap<String, f64>,
    pub samples: usize,
}

impl EvalReport {
    /// Top-1 accuracy of the confusion matrix, exactly trace over total.
    pub fn confusion_accuracy(&self) -> f64 {
        let trace: usize = (0..self.confusion.len())
            .map(|i| self.confusion[i][i])
            .sum();
        trace as f64 / self.samples as f64
    }
}

/// Score one labeled stream set: per-stream accuracy, fused accuracy when
/// asked, and the confusion matrix of the reported prediction.
pub fn evaluate_features(
    kinds: &[ModalityKind],
    probes: &[LinearProbe],
    features: &[Matrix],
    labels: &[usize],
    fusion: bool,
    fusion_weights: Option<&[f64]>,
) -> Result<EvalReport> {
    if probes.is_empty() || probes.len() != features.len() || kinds.len() != probes.len() {
        return Err(Error::Shape(format!(
            "{} probes, {} feature sets, {} kinds",
            probes.len(),
            features.len(),
            kinds.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    for f in features {
        if f.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows vs {} labels",
                f.rows(),
                labels.len()
            )));
        }
    }
    let classes = probes[0].classes();
    for p in probes {
        if p.classes() != classes {
            return Err(Error::Shape("probes disagree on class count".into()));
        }
    }
    if labels.iter().any(|&l| l >= classes) {
        return Err(Error::Data("label outside the probe's class range".into()));
    }
    let weights = match fusion_weights {
        Some(w) => {
            if w.len() != probes.len() {
                return Err(Error::Config(format!(
                    "{} fusion weights for {} streams",
                    w.len(),
                    probes.len()
                )));
            }
            w.to_vec()
        }
        None => vec![1.0; probes.len()],
    };

    let mut per_modality_top1 = BTreeMap::new();
    let mut fused = Matrix::zeros(labels.len(), classes);
    for ((kind, probe), (feats, weight)) in kinds
        .iter()
        .zip(probes)
        .zip(features.iter().zip(&weights))
    {
        let probs = probe.probabilities(feats);
        per_modality_top1.insert(kind.to_string(), {
            let mut hits = 0usize;
            for (r, &label) in labels.iter().enumerate() {
                if argmax(probs.row(r)) == label {
                    hits += 1;
                }
            }
            hits as f64 / labels.len() as f64
        });
        for r in 0..probs.rows() {
            for c in 0..probs.cols() {
                let v = fused.get(r, c) + weight * probs.get(r, c);
                fused.set(r, c, v);
            }
        }
    }

    let reported = if fusion {
        &fused
    } else {
        // Single-stream reporting: the confusion matrix describes stream 0.
        fused = probes[0].probabilities(&features[0]);
        &fused
    };
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (r, &label) in labels.iter().enumerate() {
        confusion[label][argmax(reported.row(r))] += 1;
    }
    let trace: usize = (0..classes).map(|i| confusion[i][i]).sum();
    let fused_top1 = if fusion {
        Some(trace as f64 / labels.len() as f64)
    } else {
        None
    };
    Ok(EvalReport {
        per_modality_top1,
        fused_top1,
        confusion,
        precision_at_k: BTreeMap::new(),
        samples: labels.len(),
    })
}

/// Extract features with every stack, train one probe per stream on the
/// training split, and score the evaluation split. `knn_k` adds retrieval
/// precision over the evaluation features.
pub fn evaluate(
    stacks: &[EncoderStack],
    train_set: &[SkeletonSequence],
    eval_set: &[SkeletonSequence],
    topo: &SkeletonTopology,
    config: &EvalConfig,
    fusion: bool,
    knn_k: Option<usize>,
) -> Result<EvalReport> {
    config.validate()?;
    if stacks.is_empty() {
        return Err(Error::Config("no encoder stacks to evaluate".into()));
    }
    let train_labels = collect_labels(train_set)?;
    let eval_labels = collect_labels(eval_set)?;
    let kinds: Vec<ModalityKind> = stacks.iter().map(|s| s.kind).collect();
    let mut probes = Vec::with_capacity(stacks.len());
    let mut eval_features = Vec::with_capacity(stacks.len());
    for stack in stacks {
        let train_features = extract_features(stack, train_set, topo)?;
        probes.push(train_probe(&train_features, &train_labels, config)?);
        eval_features.push(extract_features(stack, eval_set, topo)?);
    }
    let mut report = evaluate_features(
        &kinds,
        &probes,
        &eval_features,
        &eval_labels,
        fusion,
        config.fusion_weights.as_deref(),
    )?;
    if let Some(k) = knn_k {
        report.precision_at_k = knn_report(&kinds, &eval_features, &eval_labels, k)?;
    }
    Ok(report)
}

/// Cosine kNN retrieval precision per stream: the mean fraction of each
/// sample's k nearest neighbors (self excluded) that share its label.
pub fn knn_report(
    kinds: &[ModalityKind],
    features: &[Matrix],
    labels: &[usize],
    k: usize,
) -> Result<BTreeMap<String, f64>> {
    if k == 0 {
        return Err(Error::Config("retrieval depth must be at least 1".into()));
    }
    if k >= labels.len() {
        return Err(Error::Config(format!(
            "retrieval depth {k} needs more than {} samples",
            labels.len()
        )));
    }
    if kinds.len() != features.len() {
        return Err(Error::Shape(format!(
            "{} kinds vs {} feature sets",
            kinds.len(),
            features.len()
        )));
    }
    let mut out = BTreeMap::new();
    for (kind, feats) in kinds.iter().zip(features) {
        if feats.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows vs {} labels",
                feats.rows(),
                labels.len()
            )));
        }
        let norms: Vec<f64> = (0..feats.rows())
            .map(|r| crate::linalg::norm(feats.row(r)))
            .collect();
        let mut precision_sum = 0.0;
        for q in 0..feats.rows() {
            let mut sims: Vec<(f64, usize)> = (0..feats.rows())
                .filter(|&i| i != q)
                .map(|i| {
                    let cos = crate::linalg::dot(feats.row(q), feats.row(i))
                        / (norms[q] * norms[i] + NORM_EPS);
                    (cos, i)
                })
                .collect();
            sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let hits = sims[..k].iter().filter(|(_, i)| labels[*i] == labels[q]).count();
            precision_sum += hits as f64 / k as f64;
        }
        out.insert(kind.to_string(), precision_sum / feats.rows() as f64);
    }
    Ok(out)
}

/// Serialize a report as pretty JSON.
pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Data(format!("report serialization failed: {e}")))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Write a confusion matrix as CSV: header `true\predicted` class indices.
pub fn write_confusion_csv(path: &Path, confusion: &[Vec<usize>]) -> Result<()> {
    let classes = confusion.len();
    let mut text = String::from("true_class");
    for c in 0..classes {
        text.push_str(&format!(",pred_{c}"));
    }
    text.push('\n');
    for (i, row) in confusion.iter().enumerate() {
        text.push_str(&i.to_string());
        for &x in row {
            text.push_str(&format!(",{x}"));
        }
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}
