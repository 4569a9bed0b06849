//! Two-stage momentum-contrast pretraining across derived modalities.
//!
//! Stage 1 trains every modality independently: InfoNCE between two augmented
//! views with the modality's own memory bank as negatives. Stage 2 adds the
//! knowledge-exchange objectives on top of the same machinery: mined
//! cross-modality positives and the group objective against concatenated
//! keys, with the key encoders of designated modalities frozen.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::encoder::{
    collect_gradients, encode, insert_params, project, standardized_frames, EncoderArch, EncoderStack,
    GradientSet, Head, ParamSet, KEY_BLOCKS,
};
use crate::engine::augment::apply_augmentation;
use crate::engine::bank::MemoryBank;
use crate::engine::config::TrainConfig;
use crate::engine::losses::{ekem_loss, enqueue_keys, ikem_loss, info_nce_graph, BatchState};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::modality::{derive_all, ModalityKind};
use crate::skeleton::{SkeletonSequence, SkeletonTopology};

const CKPT_MAGIC: &str = "KMCKPT";
const CKPT_VERSION: u32 = 1;

const SEED_DOMAIN_INIT: u64 = 1;
const SEED_DOMAIN_SHUFFLE: u64 = 2;
const SEED_DOMAIN_VIEW: u64 = 3;

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a list of seed components into one stream seed. Used to give every
/// (epoch, sample, view) and every encoder init its own deterministic RNG.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &p| splitmix64(acc ^ p))
}

/// One heavy-ball descent step over every block:
/// `v <- momentum*v + g + weight_decay*p` then `p <- p - lr*v`.
pub fn sgd_step(
    params: &mut ParamSet,
    velocity: &mut GradientSet,
    grads: &GradientSet,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let blocks = params.blocks_mut();
    assert_eq!(blocks.len(), velocity.blocks.len());
    assert_eq!(blocks.len(), grads.blocks.len());
    for ((p, v), g) in blocks
        .iter_mut()
        .zip(velocity.blocks.iter_mut())
        .zip(grads.blocks.iter())
    {
        debug_assert_eq!(p.name, v.name);
        debug_assert_eq!(p.name, g.name);
        let ps = p.value.as_mut_slice();
        let vs = v.value.as_mut_slice();
        let gs = g.value.as_slice();
        for i in 0..ps.len() {
            vs[i] = momentum * vs[i] + gs[i] + weight_decay * ps[i];
            ps[i] -= lr * vs[i];
        }
    }
}

/// One per-epoch, per-modality metrics record.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub stage: u8,
    pub modality: ModalityKind,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "epoch,stage,modality,loss,lr,wall_ms";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.stage, self.modality, self.loss, self.lr, self.wall_ms
        )
    }
}

/// Write pretraining metrics as CSV. Float formatting is shortest-roundtrip,
/// so identical runs produce byte-identical files.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut text = String::from(MetricsRow::CSV_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.csv_line());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// A labeled snapshot of encoder stacks, serialized as a text header followed
/// by the parameter-set payload of each stack (query then key).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub label: String,
    pub epoch: usize,
    pub stacks: Vec<EncoderStack>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.label.is_empty() || self.label.chars().any(char::is_whitespace) {
            return Err(Error::Config(format!(
                "checkpoint label {:?} must be one non-empty token",
                self.label
            )));
        }
        let file = fs::File::create(path)?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{CKPT_MAGIC} {CKPT_VERSION}")?;
        writeln!(out, "label {}", self.label)?;
        writeln!(out, "epoch {}", self.epoch)?;
        writeln!(out, "stacks {}", self.stacks.len())?;
        for stack in &self.stacks {
            let a = &stack.arch;
            writeln!(
                out,
                "stack {} {} {} {} {} {} {}",
                stack.kind,
                a.input_width,
                a.hidden_width,
                a.feature_width,
                a.embed_width,
                a.group_width,
                a.aux_width
            )?;
            stack.query.write_to(&mut out)?;
            stack.key.write_to(&mut out)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = fs::File::open(path)?;
        let mut input = BufReader::new(file);
        let mut line_no = 0usize;
        let shown = path.display().to_string();
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: shown.clone(),
            line,
            msg,
        };

        let next_line = |input: &mut BufReader<fs::File>, line_no: &mut usize| -> Result<String> {
            let mut line = String::new();
            *line_no += 1;
            if input.read_line(&mut line)? == 0 {
                return Err(parse_err(*line_no, "unexpected end of file".into()));
            }
            Ok(line.trim_end().to_string())
        };

        let header = next_line(&mut input, &mut line_no)?;
        let expect = format!("{CKPT_MAGIC} {CKPT_VERSION}");
        if header != expect {
            return Err(parse_err(line_no, format!("expected {expect:?}, found {header:?}")));
        }
        let field = |line: &str, key: &str, at: usize| -> Result<String> {
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| parse_err(at, format!("expected `{key} ...`, found {line:?}")))
        };
        let label = field(&next_line(&mut input, &mut line_no)?, "label", line_no)?;
        let epoch_text = field(&next_line(&mut input, &mut line_no)?, "epoch", line_no)?;
        let epoch: usize = epoch_text
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad epoch {epoch_text:?}")))?;
        let count_text = field(&next_line(&mut input, &mut line_no)?, "stacks", line_no)?;
        let count: usize = count_text
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad stack count {count_text:?}")))?;

        let mut stacks = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next_line(&mut input, &mut line_no)?;
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.len() != 8 || tokens[0] != "stack" {
                return Err(parse_err(line_no, format!("bad stack header {line:?}")));
            }
            let kind = ModalityKind::from_name(tokens[1])
                .map_err(|_| parse_err(line_no, format!("unknown modality {:?}", tokens[1])))?;
            let dims: Vec<usize> = tokens[2..]
                .iter()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(line_no, format!("bad stack dimensions {line:?}")))?;
            let arch = EncoderArch {
                input_width: dims[0],
                hidden_width: dims[1],
                feature_width: dims[2],
                embed_width: dims[3],
                group_width: dims[4],
                aux_width: dims[5],
            };
            let query = ParamSet::read_from(&mut input)?;
            let key = ParamSet::read_from(&mut input)?;
            let expected = arch.block_shapes();
            let query_names: Vec<&str> = query.blocks().iter().map(|b| b.name.as_str()).collect();
            let expected_names: Vec<&str> = expected.iter().map(|&(n, _, _)| n).collect();
            if query_names != expected_names || key.blocks().len() != KEY_BLOCKS {
                return Err(parse_err(
                    line_no,
                    format!("parameter blocks do not match the declared {kind} architecture"),
                ));
            }
            stacks.push(EncoderStack {
                kind,
                arch,
                query,
                key,
            });
        }
        Ok(Checkpoint {
            label,
            epoch,
            stacks,
        })
    }
}

/// Trained stacks plus the per-epoch metrics that produced them.
#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub stacks: Vec<EncoderStack>,
    pub metrics: Vec<MetricsRow>,
}

/// Augmented views of one batch, one matrix list per configured modality.
struct BatchViews {
    query: Vec<Vec<Matrix>>,
    key: Vec<Vec<Matrix>>,
}

fn assemble_views(
    dataset: &[SkeletonSequence],
    topo: &SkeletonTopology,
    batch: &[usize],
    slots: &[usize],
    config: &TrainConfig,
    epoch: usize,
) -> Result<BatchViews> {
    let n = slots.len();
    let mut views = BatchViews {
        query: vec![Vec::with_capacity(batch.len()); n],
        key: vec![Vec::with_capacity(batch.len()); n],
    };
    for &sample in batch {
        for view in 0..2 {
            let seed = mix_seed(&[
                SEED_DOMAIN_VIEW,
                config.seed,
                epoch as u64,
                sample as u64,
                view,
            ]);
            let augmented = apply_augmentation(&dataset[sample], &config.augment, seed)?;
            let derived = derive_all(&augmented, topo)?;
            let out = if view == 0 {
                &mut views.query
            } else {
                &mut views.key
            };
            for (u, &slot) in slots.iter().enumerate() {
                out[u].push(standardized_frames(&derived[slot].data));
            }
        }
    }
    Ok(views)
}

fn divergence_abort(
    stacks: &[EncoderStack],
    epoch: usize,
    loss: f64,
    out_dir: Option<&Path>,
) -> Error {
    if let Some(dir) = out_dir {
        let path = dir.join("diagnostic.ckpt");
        let snapshot = Checkpoint {
            label: "diagnostic".into(),
            epoch,
            stacks: stacks.to_vec(),
        };
        match snapshot.save(&path) {
            Ok(()) => log::error!("non-finite loss; diagnostic checkpoint at {}", path.display()),
            Err(e) => log::error!("non-finite loss; diagnostic checkpoint failed: {e}"),
        }
    }
    Error::Numeric(format!("training diverged at epoch {epoch}: loss {loss}"))
}

/// Run both pretraining stages over a dataset of raw (unresized) sequences.
/// When `out_dir` is given, emits `pretrain_metrics.csv`, a final
/// `pretrain.ckpt`, and a `diagnostic.ckpt` snapshot if training diverges.
pub fn pretrain(
    dataset: &[SkeletonSequence],
    topo: &SkeletonTopology,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<PretrainOutput> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("cannot pretrain on an empty dataset".into()));
    }
    let joints = dataset[0].data().joints();
    for (i, seq) in dataset.iter().enumerate() {
        if seq.data().joints() != joints {
            return Err(Error::Data(format!(
                "sample {i} has {} joints, expected {joints}",
                seq.data().joints()
            )));
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }

    let n = config.modalities.len();
    let slots: Vec<usize> = config
        .modalities
        .iter()
        .map(|kind| ModalityKind::ALL.iter().position(|k| k == kind).unwrap())
        .collect();
    let arch = EncoderArch {
        input_width: 3 * joints,
        hidden_width: config.hidden_width,
        feature_width: config.feature_width,
        embed_width: config.embed_width,
        group_width: n * config.embed_width,
        aux_width: 0,
    };

    let mut stacks: Vec<EncoderStack> = Vec::with_capacity(n);
    let mut velocities: Vec<GradientSet> = Vec::with_capacity(n);
    let mut banks: Vec<MemoryBank> = Vec::with_capacity(n);
    for (u, &kind) in config.modalities.iter().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(&[SEED_DOMAIN_INIT, config.seed, u as u64]));
        let stack = EncoderStack::init(kind, arch.clone(), &mut rng);
        velocities.push(GradientSet {
            blocks: stack.query.zeros_like().blocks().to_vec(),
        });
        banks.push(MemoryBank::new(config.bank_capacity, config.embed_width)?);
        stacks.push(stack);
    }
    let mut bank_c = MemoryBank::new(config.bank_capacity, n * config.embed_width)?;

    let mut metrics = Vec::new();
    for epoch in 0..config.total_epochs() {
        let stage: u8 = if epoch < config.stage1_epochs { 1 } else { 2 };
        let lr = config.lr_at_epoch(epoch);
        let started = Instant::now();

        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(&[SEED_DOMAIN_SHUFFLE, config.seed, epoch as u64]));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sums = vec![0.0; n];
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let views = assemble_views(dataset, topo, batch, &slots, config, epoch)?;

            let mut tape = Tape::new();
            let mut query_nodes = Vec::with_capacity(n);
            let mut queries = Vec::with_capacity(n);
            let mut anchors = Vec::new();
            let mut keys = Vec::with_capacity(n);
            for u in 0..n {
                let qn = insert_params(&mut tape, &stacks[u].query, true);
                let kn = insert_params(&mut tape, &stacks[u].key, false);
                let fq = encode(&mut tape, &qn, &views.query[u]);
                queries.push(project(&mut tape, &qn, Head::G, fq));
                if stage == 2 {
                    anchors.push(project(&mut tape, &qn, Head::GTilde, fq));
                }
                let fk = encode(&mut tape, &kn, &views.key[u]);
                keys.push(project(&mut tape, &kn, Head::G, fk));
                query_nodes.push(qn);
            }
            let ids: Vec<u64> = batch.iter().map(|&i| i as u64).collect();
            let state = BatchState::new(&mut tape, ids, queries, anchors, keys)?;

            let (total, batch_losses) = if stage == 1 {
                let mut nodes = Vec::with_capacity(n);
                let mut total: Option<NodeId> = None;
                for u in 0..n {
                    let l = info_nce_graph(
                        &mut tape,
                        state.queries[u],
                        state.keys[u],
                        &banks[u],
                        config.tau,
                    )?;
                    total = Some(match total {
                        None => l,
                        Some(t) => tape.add(t, l),
                    });
                    nodes.push(l);
                }
                let per: Vec<f64> = nodes.iter().map(|&l| tape.value(l).item()).collect();
                (total.unwrap(), per)
            } else {
                let ikem = ikem_loss(&mut tape, &state, &mut bank_c, config.tau)?;
                let mut total = tape.scale(ikem.total, config.ikem_weight);
                let mut per: Vec<f64> = ikem
                    .per_modality
                    .iter()
                    .map(|&l| config.ikem_weight * tape.value(l).item())
                    .collect();
                if n >= 2 {
                    let topk = config.ekem_topk.min(banks[0].len());
                    let ekem = ekem_loss(&mut tape, &state, &banks, config.tau, topk)?;
                    let weighted = tape.scale(ekem.total, config.ekem_weight);
                    total = tape.add(total, weighted);
                    for (u, &l) in ekem.per_modality.iter().enumerate() {
                        per[u] += config.ekem_weight * tape.value(l).item();
                    }
                }
                (total, per)
            };

            let loss_value = tape.value(total).item();
            if !loss_value.is_finite() {
                return Err(divergence_abort(&stacks, epoch, loss_value, out_dir));
            }
            tape.backward(total);
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
            for stack in stacks.iter_mut() {
                let frozen = stage == 2 && config.freeze_high_perf.contains(&stack.kind);
                if !frozen {
                    stack.momentum_update(config.key_momentum);
                }
            }
            enqueue_keys(&tape, &state, &mut banks)?;

            for u in 0..n {
                loss_sums[u] += batch_losses[u];
            }
            batches += 1;
        }

        let wall_ms = if config.deterministic_timing {
            0
        } else {
            started.elapsed().as_millis() as u64
        };
        for u in 0..n {
            metrics.push(MetricsRow {
                epoch,
                stage,
                modality: config.modalities[u],
                loss: loss_sums[u] / batches as f64,
                lr,
                wall_ms,
            });
        }
    }

    if let Some(dir) = out_dir {
        write_metrics_csv(&dir.join("pretrain_metrics.csv"), &metrics)?;
        let snapshot = Checkpoint {
            label: "pretrain".into(),
            epoch: config.total_epochs(),
            stacks: stacks.clone(),
        };
        snapshot.save(&dir.join("pretrain.ckpt"))?;
    }
    Ok(PretrainOutput { stacks, metrics })
}
