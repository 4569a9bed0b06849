//! Relational teacher-student distillation.
//!
//! A frozen multi-modality teacher embeds every training sample once into a
//! fully consistent memory bank. A smaller student then learns, per
//! (teacher modality v, student modality u) pair, to reproduce the teacher's
//! similarity structure: its own anchor-to-teacher alignment plus the
//! relation to the bank entry the teacher ranks most similar.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape, NORM_EPS};
use crate::encoder::{
    collect_gradients, encode, insert_params, project, standardized_frames, EncoderArch, EncoderStack,
    GradientSet, Head,
};
use crate::engine::bank::MemoryBank;
use crate::engine::losses::LossNodes;
use crate::engine::train::{mix_seed, sgd_step, Checkpoint};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::modality::{derive_all, ModalityKind};
use crate::skeleton::{resize_sequence, SkeletonSequence, SkeletonTopology, RESIZE_FRAMES};

const SEED_DOMAIN_STUDENT_INIT: u64 = 11;
const SEED_DOMAIN_DISTILL_SHUFFLE: u64 = 12;

/// Distillation hyperparameters. Optimizer fields mirror the pretraining
/// defaults; the schedule drops the rate once at five sixths of the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub student_modalities: Vec<ModalityKind>,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub learning_rate: f64,
    pub lr_drop_epoch: Option<usize>,
    pub lr_drop_factor: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub hidden_width: usize,
    pub feature_width: usize,
    pub embed_width: usize,
    /// Keep the mined relation term inside the denominator sum (the literal
    /// objective) or drop it there and keep it only in the numerator.
    pub exclude_mined_from_denominator: bool,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            student_modalities: ModalityKind::FUNDAMENTAL.to_vec(),
            epochs: 150,
            batch_size: 128,
            tau: 0.07,
            learning_rate: 0.1,
            lr_drop_epoch: None,
            lr_drop_factor: 0.1,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            hidden_width: 64,
            feature_width: 128,
            embed_width: 128,
            exclude_mined_from_denominator: false,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.student_modalities.is_empty() {
            return Err(Error::Config("student needs at least one modality".into()));
        }
        let mut seen = self.student_modalities.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.student_modalities.len() {
            return Err(Error::Config("student modalities repeat".into()));
        }
        for kind in &self.student_modalities {
            if !ModalityKind::FUNDAMENTAL.contains(kind) {
                return Err(Error::Config(format!(
                    "student modality {kind} is not one of the fundamental set"
                )));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.tau)));
        }
        if self.learning_rate <= 0.0 || self.lr_drop_factor <= 0.0 {
            return Err(Error::Config("learning rate terms must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.sgd_momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("bad optimizer coefficients".into()));
        }
        if let Some(drop) = self.lr_drop_epoch {
            if drop > self.epochs {
                return Err(Error::Config(format!(
                    "drop epoch {drop} is past the {} total",
                    self.epochs
                )));
            }
        }
        if self.hidden_width == 0 || self.feature_width == 0 || self.embed_width == 0 {
            return Err(Error::Config("widths must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let drop = self.lr_drop_epoch.unwrap_or(self.epochs * 5 / 6);
        if epoch >= drop {
            self.learning_rate * self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }
}

/// One per-epoch distillation metrics record: mean batch loss and the mean
/// cosine between student and teacher embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillMetricsRow {
    pub epoch: usize,
    pub loss: f64,
    pub mean_cos_t_s: f64,
}

impl DistillMetricsRow {
    pub const CSV_HEADER: &'static str = "epoch,loss,mean_cos_t_s";

    pub fn csv_line(&self) -> String {
        format!("{},{},{}", self.epoch, self.loss, self.mean_cos_t_s)
    }
}

pub fn write_distill_metrics_csv(path: &Path, rows: &[DistillMetricsRow]) -> Result<()> {
    let mut text = String::from(DistillMetricsRow::CSV_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.csv_line());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Student stacks plus the per-epoch metrics that produced them.
#[derive(Debug, Clone)]
pub struct DistillOutput {
    pub stacks: Vec<EncoderStack>,
    pub metrics: Vec<DistillMetricsRow>,
}

fn embed_width_of(teacher: &[EncoderStack]) -> Result<usize> {
    let width = teacher
        .first()
        .ok_or_else(|| Error::Config("teacher checkpoint holds no encoder stacks".into()))?
        .arch
        .embed_width;
    for stack in teacher {
        if stack.arch.embed_width != width {
            return Err(Error::Config(format!(
                "teacher stack {} has embedding width {}, expected {width}",
                stack.kind, stack.arch.embed_width
            )));
        }
    }
    Ok(width)
}

/// Embed one raw sequence with every teacher key encoder and concatenate in
/// the teacher's stack order, then L2-normalize the whole vector.
pub fn teacher_embed(
    teacher: &[EncoderStack],
    sample: &SkeletonSequence,
    topo: &SkeletonTopology,
) -> Result<Vec<f64>> {
    let width = embed_width_of(teacher)?;
    let resized = resize_sequence(sample, RESIZE_FRAMES)?;
    let derived = derive_all(&resized, topo)?;
    let mut out = Vec::with_capacity(teacher.len() * width);
    for stack in teacher {
        let slot = ModalityKind::ALL
            .iter()
            .position(|k| *k == stack.kind)
            .unwrap();
        let input = standardized_frames(&derived[slot].data);
        let mut tape = Tape::new();
        let nodes = insert_params(&mut tape, &stack.key, false);
        let features = encode(&mut tape, &nodes, &[input]);
        let z = project(&mut tape, &nodes, Head::G, features);
        out.extend_from_slice(tape.value(z).as_slice());
    }
    let norm = crate::linalg::norm(&out);
    for x in &mut out {
        *x /= norm + NORM_EPS;
    }
    Ok(out)
}

/// Slice columns `lo..hi` from each bank row, L2-normalize each slice, and
/// return the transpose (width x occupancy), ready to multiply anchors by.
fn bank_slice_transposed(bank_rows: &Matrix, lo: usize, hi: usize) -> Matrix {
    let width = hi - lo;
    let mut out = Matrix::zeros(width, bank_rows.rows());
    for k in 0..bank_rows.rows() {
        let slice = &bank_rows.row(k)[lo..hi];
        let norm = crate::linalg::norm(slice);
        for (c, &x) in slice.iter().enumerate() {
            out.set(c, k, x / (norm + NORM_EPS));
        }
    }
    out
}

/// Per-row argmax over a similarity matrix.
fn argmax_rows(sims: &Matrix) -> Vec<usize> {
    (0..sims.rows())
        .map(|b| {
            let row = sims.row(b);
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Build the relational distillation loss on the tape.
///
/// `z_t` is the teacher's concatenated batch embedding (constant), `z_u` one
/// normalized student projection per student modality, both of width
/// `teacher_count * slice width`. For every (teacher slice v, student
/// modality u): the anchor alignment `z_t . z_u / tau` is the positive; the
/// relation products `s_i^u * s_i^v / tau` over the bank are the negatives;
/// the relation at the teacher's most similar entry joins the numerator.
/// Attribution in the result is per student modality.
pub fn distill_loss_graph(
    tape: &mut Tape,
    z_t: NodeId,
    z_u: &[NodeId],
    bank: &MemoryBank,
    teacher_count: usize,
    tau: f64,
    exclude_mined_from_denominator: bool,
) -> Result<LossNodes> {
    if bank.is_empty() {
        return Err(Error::Data(
            "distillation needs a populated consistent bank".into(),
        ));
    }
    if z_u.is_empty() {
        return Err(Error::Config("no student modalities to distill into".into()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let full_width = bank.width();
    if teacher_count == 0 || full_width % teacher_count != 0 {
        return Err(Error::Shape(format!(
            "bank width {full_width} does not split into {teacher_count} slices"
        )));
    }
    let width = full_width / teacher_count;
    let batch = tape.value(z_t).rows();
    if tape.value(z_t).cols() != full_width {
        return Err(Error::Shape(format!(
            "teacher batch is {}x{}, expected width {full_width}",
            batch,
            tape.value(z_t).cols()
        )));
    }
    for &id in z_u {
        let v = tape.value(id);
        if v.rows() != batch || v.cols() != full_width {
            return Err(Error::Shape(format!(
                "student batch is {}x{}, expected {batch}x{full_width}",
                v.rows(),
                v.cols()
            )));
        }
    }

    let bank_rows = bank.as_matrix();
    let occupancy = bank_rows.rows();
    let teacher_batch = tape.value(z_t).clone();

    // Teacher-side similarities and mined indices carry no gradient, so they
    // are prepared outside the tape, per teacher slice.
    let mut slice_nodes = Vec::with_capacity(teacher_count);
    let mut mined = Vec::with_capacity(teacher_count);
    let mut relations_t = Vec::with_capacity(teacher_count);
    for v in 0..teacher_count {
        let lo = v * width;
        let hi = lo + width;
        let bank_t = bank_slice_transposed(&bank_rows, lo, hi);
        let mut anchor_v = Matrix::zeros(batch, width);
        for b in 0..batch {
            let slice = &teacher_batch.row(b)[lo..hi];
            let norm = crate::linalg::norm(slice);
            for (c, &x) in slice.iter().enumerate() {
                anchor_v.set(b, c, x / (norm + NORM_EPS));
            }
        }
        let sims = anchor_v.matmul(&bank_t);
        mined.push(argmax_rows(&sims));
        relations_t.push(tape.constant(sims));
        slice_nodes.push(tape.constant(bank_t));
    }

    let mut per_modality = Vec::with_capacity(z_u.len());
    let mut total: Option<NodeId> = None;
    for &student in z_u {
        let pos_raw = tape.row_dot(z_t, student);
        let pos = tape.scale(pos_raw, 1.0 / tau);
        let mut modality_loss: Option<NodeId> = None;
        for v in 0..teacher_count {
            let lo = v * width;
            let hi = lo + width;
            let sliced = tape.slice_cols(student, lo, hi);
            let student_v = tape.l2_normalize_rows(sliced);
            let sims_u = tape.matmul(student_v, slice_nodes[v]);
            let products = tape.mul(sims_u, relations_t[v]);
            let relations = tape.scale(products, 1.0 / tau);
            let mined_col = tape.gather_cols(relations, mined[v].clone());
            let num = {
                let cat = tape.concat_cols(&[pos, mined_col]);
                tape.log_sum_exp_rows(cat)
            };
            let den = if exclude_mined_from_denominator && occupancy > 1 {
                let mut keep = Vec::with_capacity(batch * (occupancy - 1));
                for b in 0..batch {
                    for i in 0..occupancy {
                        if i != mined[v][b] {
                            keep.push(i);
                        }
                    }
                }
                let rest = tape.gather_cols(relations, keep);
                let cat = tape.concat_cols(&[pos, rest]);
                tape.log_sum_exp_rows(cat)
            } else {
                let cat = tape.concat_cols(&[pos, relations]);
                tape.log_sum_exp_rows(cat)
            };
            let gap = tape.sub(den, num);
            let pair_loss = tape.mean_rows(gap);
            modality_loss = Some(match modality_loss {
                None => pair_loss,
                Some(acc) => tape.add(acc, pair_loss),
            });
        }
        let modality_loss = modality_loss.unwrap();
        per_modality.push(modality_loss);
        total = Some(match total {
            None => modality_loss,
            Some(acc) => tape.add(acc, modality_loss),
        });
    }
    Ok(LossNodes {
        total: total.unwrap(),
        per_modality,
    })
}

/// Scalar distillation loss over plain matrices, for oracles and smoke use.
pub fn distill_loss(
    z_t: &Matrix,
    z_u: &[Matrix],
    bank: &MemoryBank,
    teacher_count: usize,
    tau: f64,
    exclude_mined_from_denominator: bool,
) -> Result<f64> {
    let mut tape = Tape::new();
    let t = tape.constant(z_t.clone());
    let u: Vec<NodeId> = z_u.iter().map(|m| tape.constant(m.clone())).collect();
    let nodes = distill_loss_graph(
        &mut tape,
        t,
        &u,
        bank,
        teacher_count,
        tau,
        exclude_mined_from_denominator,
    )?;
    Ok(tape.value(nodes.total).item())
}

/// Distill a frozen teacher checkpoint into a fresh student.
///
/// The consistent bank is filled with one frozen-teacher pass over the whole
/// dataset (capacity = dataset size), then the student trains against it;
/// teacher parameters are never touched. When `out_dir` is given, emits
/// `distill_metrics.csv` and `student.ckpt` (or `diagnostic.ckpt` on
/// divergence).
pub fn distill_train(
    teacher: &Checkpoint,
    dataset: &[SkeletonSequence],
    topo: &SkeletonTopology,
    config: &DistillConfig,
    out_dir: Option<&Path>,
) -> Result<DistillOutput> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("cannot distill on an empty dataset".into()));
    }
    let teacher_count = teacher.stacks.len();
    let embed = embed_width_of(&teacher.stacks)?;
    let group = teacher_count * embed;
    let joints = dataset[0].data().joints();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }

    let mut bank = MemoryBank::new(dataset.len(), group)?;
    let mut teacher_all = Matrix::zeros(dataset.len(), group);
    for (i, sample) in dataset.iter().enumerate() {
        let z = teacher_embed(&teacher.stacks, sample, topo)?;
        bank.push(&z, i as u64)?;
        teacher_all.row_mut(i).copy_from_slice(&z);
    }

    let arch = EncoderArch {
        input_width: 3 * joints,
        hidden_width: config.hidden_width,
        feature_width: config.feature_width,
        embed_width: config.embed_width,
        group_width: config.embed_width,
        aux_width: group,
    };
    let slots: Vec<usize> = config
        .student_modalities
        .iter()
        .map(|kind| ModalityKind::ALL.iter().position(|k| k == kind).unwrap())
        .collect();
    let n = config.student_modalities.len();
    let mut stacks: Vec<EncoderStack> = Vec::with_capacity(n);
    let mut velocities: Vec<GradientSet> = Vec::with_capacity(n);
    for (u, &kind) in config.student_modalities.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
            SEED_DOMAIN_STUDENT_INIT,
            config.seed,
            u as u64,
        ]));
        let stack = EncoderStack::init(kind, arch.clone(), &mut rng);
        velocities.push(GradientSet {
            blocks: stack.query.zeros_like().blocks().to_vec(),
        });
        stacks.push(stack);
    }

    let inputs: Vec<Vec<Matrix>> = dataset
        .iter()
        .map(|sample| {
            let resized = resize_sequence(sample, RESIZE_FRAMES)?;
            let derived = derive_all(&resized, topo)?;
            Ok(slots
                .iter()
                .map(|&slot| standardized_frames(&derived[slot].data))
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
            SEED_DOMAIN_DISTILL_SHUFFLE,
            config.seed,
            epoch as u64,
        ]));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut cos_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut teacher_batch = Matrix::zeros(batch.len(), group);
            for (row, &i) in batch.iter().enumerate() {
                teacher_batch
                    .row_mut(row)
                    .copy_from_slice(teacher_all.row(i));
            }

            let mut tape = Tape::new();
            let z_t = tape.constant(teacher_batch);
            let mut query_nodes = Vec::with_capacity(n);
            let mut z_u = Vec::with_capacity(n);
            for u in 0..n {
                let samples: Vec<Matrix> =
                    batch.iter().map(|&i| inputs[i][u].clone()).collect();
                let qn = insert_params(&mut tape, &stacks[u].query, true);
                let features = encode(&mut tape, &qn, &samples);
                z_u.push(project(&mut tape, &qn, Head::Aux, features));
                query_nodes.push(qn);
            }
            let nodes = distill_loss_graph(
                &mut tape,
                z_t,
                &z_u,
                &bank,
                teacher_count,
                config.tau,
                config.exclude_mined_from_denominator,
            )?;
            let loss_value = tape.value(nodes.total).item();
            if !loss_value.is_finite() {
                if let Some(dir) = out_dir {
                    let snapshot = Checkpoint {
                        label: "diagnostic".into(),
                        epoch,
                        stacks: stacks.clone(),
                    };
                    let path = dir.join("diagnostic.ckpt");
                    match snapshot.save(&path) {
                        Ok(()) => log::error!(
                            "non-finite loss; diagnostic checkpoint at {}",
                            path.display()
                        ),
                        Err(e) => {
                            log::error!("non-finite loss; diagnostic checkpoint failed: {e}")
                        }
                    }
                }
                return Err(Error::Numeric(format!(
                    "distillation diverged at epoch {epoch}: loss {loss_value}"
                )));
            }

            for (u, &z) in z_u.iter().enumerate() {
                let mut dot = tape.row_dot(z_t, z);
                dot = tape.mean_rows(dot);
                cos_sum += tape.value(dot).item() / n as f64;
                let _ = u;
            }

            tape.backward(nodes.total);
            for u in 0..n {
                let grads = collect_gradients(&tape, &query_nodes[u], &stacks[u].query);
                sgd_step(
                    &mut stacks[u].query,
                    &mut velocities[u],
                    &grads,
                    lr,
                    config.sgd_momentum,
                    config.weight_decay,
                );
            }
            loss_sum += loss_value;
            batches += 1;
        }
        metrics.push(DistillMetricsRow {
            epoch,
            loss: loss_sum / batches as f64,
            mean_cos_t_s: cos_sum / batches as f64,
        });
    }

    if let Some(dir) = out_dir {
        write_distill_metrics_csv(&dir.join("distill_metrics.csv"), &metrics)?;
        let snapshot = Checkpoint {
            label: "student".into(),
            epoch: config.epochs,
            stacks: stacks.clone(),
        };
        snapshot.save(&dir.join("student.ckpt"))?;
    }
    Ok(DistillOutput { stacks, metrics })
}
