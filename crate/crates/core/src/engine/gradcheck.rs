//! Finite-difference verification of all four training objectives through a
//! real encoder stack: plain InfoNCE, the concatenated-key exchange, explicit
//! cross-modality mining, and relational distillation. Each objective is
//! rebuilt from scratch per probe, so the check covers the full path from
//! backbone weights through projection heads and normalization to the loss.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::distill::distill_loss_graph;
use crate::encoder::{
    collect_gradients, encode, grad_check, insert_params, project, standardized_frames,
    EncoderArch, EncoderStack, GradCheckConfig, GradCheckReport, GradientSet, Head, ParamSet,
};
use crate::engine::bank::MemoryBank;
use crate::engine::losses::{ekem_loss, ikem_loss, info_nce_graph, BatchState};
use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};
use crate::modality::derive_all;
use crate::modality::ModalityKind;
use crate::skeleton::{resize_sequence, toy_topology, SkeletonSequence, RESIZE_FRAMES};
use crate::tensor::Tensor3;

const TAU: f64 = 0.07;
const BATCH: usize = 3;
const BANK: usize = 8;

/// One verified objective.
pub struct SuiteOutcome {
    pub loss: &'static str,
    pub report: GradCheckReport,
}

fn walk_sequence(rng: &mut ChaCha8Rng, frames: usize, joints: usize) -> Result<SkeletonSequence> {
    let mut data = Tensor3::zeros(3, frames, joints);
    for v in 0..joints {
        let mut p = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        for t in 0..frames {
            data.set_vec3(t, v, p);
            for x in &mut p {
                *x += 0.1 * rng.gen_range(-1.0..1.0);
            }
        }
    }
    SkeletonSequence::from_tensor(data, None)
}

fn unit_row(rng: &mut ChaCha8Rng, width: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = norm(&row);
    for x in &mut row {
        *x /= n;
    }
    row
}

fn filled_bank(rng: &mut ChaCha8Rng, capacity: usize, width: usize) -> Result<MemoryBank> {
    let mut bank = MemoryBank::new(capacity, width)?;
    for i in 0..capacity {
        bank.push(&unit_row(rng, width), 1000 + i as u64)?;
    }
    Ok(bank)
}

/// Embed one modality's inputs with a parameter set that has no gradient
/// role (key encoders, frozen teachers).
fn constant_embedding(set: &ParamSet, inputs: &[Matrix], head: Head) -> Matrix {
    let mut tape = crate::autodiff::Tape::new();
    let nodes = insert_params(&mut tape, set, false);
    let f = encode(&mut tape, &nodes, inputs);
    let z = project(&mut tape, &nodes, head, f);
    tape.value(z).clone()
}

fn named_err(loss: &'static str, err: Error) -> Error {
    match err {
        Error::Numeric(msg) => Error::Numeric(format!("{loss}: {msg}")),
        other => other,
    }
}

/// Run every objective's gradient check on a small randomly initialized
/// two-modality setup and return the per-loss reports. Fails with a numeric
/// error naming the objective when any sampled coordinate breaches the
/// tolerance.
pub fn gradient_suite(seed: u64, check: &GradCheckConfig) -> Result<Vec<SuiteOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topo = toy_topology();
    let kinds = [ModalityKind::Joint, ModalityKind::Motion];

    // Three short random walks, resized and derived once; the two modality
    // input sets are shared by every scenario.
    let mut inputs: Vec<Vec<Matrix>> = vec![Vec::new(), Vec::new()];
    for _ in 0..BATCH {
        let seq = walk_sequence(&mut rng, 6, topo.joint_count())?;
        let resized = resize_sequence(&seq, RESIZE_FRAMES)?;
        let modalities = derive_all(&resized, &topo)?;
        inputs[0].push(standardized_frames(&modalities[0].data));
        inputs[1].push(standardized_frames(&modalities[1].data));
    }
    let ids: Vec<u64> = (0..BATCH as u64).collect();

    let arch = EncoderArch {
        input_width: 3 * topo.joint_count(),
        hidden_width: 8,
        feature_width: 6,
        embed_width: 4,
        group_width: 2 * 4,
        aux_width: 0,
    };
    let stacks: Vec<EncoderStack> = kinds
        .iter()
        .map(|&k| EncoderStack::init(k, arch, &mut rng))
        .collect();
    let keys_m: Vec<Matrix> = (0..2)
        .map(|u| constant_embedding(&stacks[u].key, &inputs[u], Head::G))
        .collect();

    let bank_nce = filled_bank(&mut rng, BANK, arch.embed_width)?;
    let bank_concat = filled_bank(&mut rng, BANK, 2 * arch.embed_width)?;
    let banks_m: Vec<MemoryBank> = {
        let mut banks = Vec::new();
        for _ in 0..2 {
            banks.push(MemoryBank::new(BANK, arch.embed_width)?);
        }
        for i in 0..BANK {
            for bank in &mut banks {
                bank.push(&unit_row(&mut rng, arch.embed_width), 2000 + i as u64)?;
            }
        }
        banks
    };

    let mut outcomes = Vec::new();

    // Plain InfoNCE: one modality's query path, key side constant. Only the
    // backbone and g head participate, so only those blocks are probed.
    {
        let params = vec![stacks[0].query.key_subset()];
        let run = |sets: &[ParamSet], want: bool| -> Result<(f64, Option<GradientSet>)> {
            let mut tape = crate::autodiff::Tape::new();
            let nodes = insert_params(&mut tape, &sets[0], true);
            let f = encode(&mut tape, &nodes, &inputs[0]);
            let q = project(&mut tape, &nodes, Head::G, f);
            let pos = tape.constant(keys_m[0].clone());
            let loss = info_nce_graph(&mut tape, q, pos, &bank_nce, TAU)?;
            let value = tape.value(loss).item();
            if !want {
                return Ok((value, None));
            }
            tape.backward(loss);
            Ok((value, Some(collect_gradients(&tape, &nodes, &sets[0]))))
        };
        let (_, grads) = run(&params, true)?;
        let report = grad_check(&params, &[grads.unwrap()], &mut |p| Ok(run(p, false)?.0), check)
            .map_err(|e| named_err("info_nce", e))?;
        outcomes.push(SuiteOutcome {
            loss: "info_nce",
            report,
        });
    }

    // The two exchange objectives share one batch construction: both query
    // paths trainable, key embeddings constant, group anchors on the tape.
    let params_pair: Vec<ParamSet> = stacks.iter().map(|s| s.query.clone()).collect();
    for which in ["ikem", "ekem"] {
        let run = |sets: &[ParamSet], want: bool| -> Result<(f64, Option<Vec<GradientSet>>)> {
            let mut tape = crate::autodiff::Tape::new();
            let mut all_nodes = Vec::new();
            let mut queries = Vec::new();
            let mut anchors = Vec::new();
            let mut keys = Vec::new();
            for u in 0..2 {
                let nodes = insert_params(&mut tape, &sets[u], true);
                let f = encode(&mut tape, &nodes, &inputs[u]);
                queries.push(project(&mut tape, &nodes, Head::G, f));
                anchors.push(project(&mut tape, &nodes, Head::GTilde, f));
                keys.push(tape.constant(keys_m[u].clone()));
                all_nodes.push(nodes);
            }
            let state = BatchState::new(&mut tape, ids.clone(), queries, anchors, keys)?;
            let total = if which == "ikem" {
                let mut bank = bank_concat.clone();
                ikem_loss(&mut tape, &state, &mut bank, TAU)?.total
            } else {
                ekem_loss(&mut tape, &state, &banks_m, TAU, 1)?.total
            };
            let value = tape.value(total).item();
            if !want {
                return Ok((value, None));
            }
            tape.backward(total);
            let grads: Vec<GradientSet> = all_nodes
                .iter()
                .zip(sets)
                .map(|(nodes, set)| collect_gradients(&tape, nodes, set))
                .collect();
            Ok((value, Some(grads)))
        };
        let (_, grads) = run(&params_pair, true)?;
        let name: &'static str = if which == "ikem" { "ikem" } else { "ekem" };
        let report = grad_check(
            &params_pair,
            &grads.unwrap(),
            &mut |p| Ok(run(p, false)?.0),
            check,
        )
        .map_err(|e| named_err(name, e))?;
        outcomes.push(SuiteOutcome { loss: name, report });
    }

    // Relational distillation: a two-teacher concatenation as the frozen
    // anchor, the student's auxiliary head under test.
    {
        let teacher_z = {
            let mut t = Matrix::zeros(BATCH, 2 * arch.embed_width);
            for i in 0..BATCH {
                let mut row: Vec<f64> = Vec::new();
                for m in &keys_m {
                    row.extend_from_slice(m.row(i));
                }
                let n = norm(&row);
                for (j, x) in row.iter().enumerate() {
                    t.set(i, j, x / n);
                }
            }
            t
        };
        let student_arch = EncoderArch {
            aux_width: 2 * arch.embed_width,
            ..arch
        };
        let student = EncoderStack::init(ModalityKind::Joint, student_arch, &mut rng);
        let blocks: Vec<_> = student
            .query
            .blocks()
            .iter()
            .filter(|b| b.name.starts_with("enc.") || b.name.starts_with("aux."))
            .cloned()
            .collect();
        let params = vec![ParamSet::from_blocks(blocks)];
        let bank = filled_bank(&mut rng, 5, 2 * arch.embed_width)?;
        let run = |sets: &[ParamSet], want: bool| -> Result<(f64, Option<GradientSet>)> {
            let mut tape = crate::autodiff::Tape::new();
            let nodes = insert_params(&mut tape, &sets[0], true);
            let f = encode(&mut tape, &nodes, &inputs[0]);
            let zu = project(&mut tape, &nodes, Head::Aux, f);
            let t = tape.constant(teacher_z.clone());
            let loss = distill_loss_graph(&mut tape, t, &[zu], &bank, 2, TAU, false)?;
            let value = tape.value(loss.total).item();
            if !want {
                return Ok((value, None));
            }
            tape.backward(loss.total);
            Ok((value, Some(collect_gradients(&tape, &nodes, &sets[0]))))
        };
        let (_, grads) = run(&params, true)?;
        let report = grad_check(&params, &[grads.unwrap()], &mut |p| Ok(run(p, false)?.0), check)
            .map_err(|e| named_err("distill", e))?;
        outcomes.push(SuiteOutcome {
            loss: "distill",
            report,
        });
    }

    Ok(outcomes)
}
