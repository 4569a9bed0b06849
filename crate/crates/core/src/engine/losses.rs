//! Contrastive objectives: InfoNCE, the concatenated-key exchange loss, and
//! explicit positive mining across modalities.
//!
//! All builders append to a caller-owned [`Tape`] and return the loss node,
//! so one training step can combine several objectives and run a single
//! backward pass. Every loss is a batch mean; multi-modality objectives sum
//! those means over modalities (or ordered modality pairs).

use crate::autodiff::{NodeId, Tape};
use crate::engine::bank::MemoryBank;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Tape nodes for one batch across the trained modalities.
///
/// `queries` and `keys` hold the per-modality contrastive embeddings
/// (`B x c_z`, unit rows); `anchors`, when present, hold the group-head
/// outputs (`B x n*c_z`); `concat_key` is the normalized concatenation of all
/// key embeddings per sample.
pub struct BatchState {
    pub sample_ids: Vec<u64>,
    pub queries: Vec<NodeId>,
    pub anchors: Vec<NodeId>,
    pub keys: Vec<NodeId>,
    pub concat_key: NodeId,
}

impl BatchState {
    /// Assemble and validate a batch. `anchors` may be empty when the group
    /// objective is not in use. The concatenated key is built here: with a
    /// single modality it is that modality's key unchanged (already unit), so
    /// the group objective reduces to plain InfoNCE without rounding drift.
    pub fn new(
        tape: &mut Tape,
        sample_ids: Vec<u64>,
        queries: Vec<NodeId>,
        anchors: Vec<NodeId>,
        keys: Vec<NodeId>,
    ) -> Result<BatchState> {
        if queries.is_empty() || queries.len() != keys.len() {
            return Err(Error::Shape(format!(
                "{} query sets vs {} key sets",
                queries.len(),
                keys.len()
            )));
        }
        if !anchors.is_empty() && anchors.len() != queries.len() {
            return Err(Error::Shape(format!(
                "{} anchor sets vs {} query sets",
                anchors.len(),
                queries.len()
            )));
        }
        let batch = sample_ids.len();
        let embed = tape.value(queries[0]).cols();
        for &id in queries.iter().chain(&keys) {
            let v = tape.value(id);
            if v.rows() != batch || v.cols() != embed {
                return Err(Error::Shape(format!(
                    "embedding block is {}x{}, expected {batch}x{embed}",
                    v.rows(),
                    v.cols()
                )));
            }
        }
        let group_width = queries.len() * embed;
        for &id in &anchors {
            let v = tape.value(id);
            if v.rows() != batch || v.cols() != group_width {
                return Err(Error::Shape(format!(
                    "anchor block is {}x{}, expected {batch}x{group_width}",
                    v.rows(),
                    v.cols()
                )));
            }
        }
        let concat_key = if keys.len() == 1 {
            keys[0]
        } else {
            let cat = tape.concat_cols(&keys);
            tape.l2_normalize_rows(cat)
        };
        Ok(BatchState {
            sample_ids,
            queries,
            anchors,
            keys,
            concat_key,
        })
    }

    pub fn modality_count(&self) -> usize {
        self.queries.len()
    }
}

/// A summed loss with its per-modality attribution (`total` equals the sum of
/// `per_modality` in order).
pub struct LossNodes {
    pub total: NodeId,
    pub per_modality: Vec<NodeId>,
}

/// InfoNCE with the bank as negatives:
/// `-log( exp(a.p/tau) / (exp(a.p/tau) + sum_i exp(a.m_i/tau)) )`, averaged
/// over the batch. An empty bank is degenerate (loss identically 0) and
/// logged as a warning.
pub fn info_nce_graph(
    tape: &mut Tape,
    anchors: NodeId,
    positives: NodeId,
    bank: &MemoryBank,
    tau: f64,
) -> Result<NodeId> {
    check_tau(tau)?;
    let width = tape.value(anchors).cols();
    if tape.value(positives).cols() != width || bank.width() != width {
        return Err(Error::Shape(format!(
            "anchor width {width} vs positive width {} vs bank width {}",
            tape.value(positives).cols(),
            bank.width()
        )));
    }
    if bank.is_empty() {
        log::warn!("InfoNCE with an empty bank is degenerate (loss = 0)");
    }
    let pos = tape.row_dot(anchors, positives);
    let pos = tape.scale(pos, 1.0 / tau);
    let den = if bank.is_empty() {
        tape.log_sum_exp_rows(pos)
    } else {
        let negs = tape.constant(bank.as_matrix().transpose());
        let negs = tape.matmul(anchors, negs);
        let negs = tape.scale(negs, 1.0 / tau);
        let all = tape.concat_cols(&[pos, negs]);
        tape.log_sum_exp_rows(all)
    };
    let per_sample = tape.sub(den, pos);
    Ok(tape.mean_rows(per_sample))
}

/// InfoNCE evaluated on plain matrices (builds and discards a scratch tape).
pub fn info_nce(anchors: &Matrix, positives: &Matrix, bank: &MemoryBank, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(anchors.clone());
    let p = tape.constant(positives.clone());
    let loss = info_nce_graph(&mut tape, a, p, bank, tau)?;
    Ok(tape.value(loss).item())
}

/// Concatenated-key exchange objective: every modality's group anchor is
/// pulled toward the shared concatenated key against the concatenated bank,
/// and the loss is the sum of those per-modality InfoNCE terms. After the
/// loss is built, this batch's concatenated keys are enqueued (so a batch
/// never serves as its own negatives).
pub fn ikem_loss(
    tape: &mut Tape,
    batch: &BatchState,
    bank_c: &mut MemoryBank,
    tau: f64,
) -> Result<LossNodes> {
    if batch.anchors.is_empty() {
        return Err(Error::Shape("batch carries no group anchors".into()));
    }
    let mut per_modality = Vec::with_capacity(batch.anchors.len());
    for &anchor in &batch.anchors {
        per_modality.push(info_nce_graph(tape, anchor, batch.concat_key, bank_c, tau)?);
    }
    let total = sum_nodes(tape, &per_modality);
    bank_c.push_batch(tape.value(batch.concat_key), &batch.sample_ids)?;
    Ok(LossNodes {
        total,
        per_modality,
    })
}

/// Explicit positive mining: for each ordered modality pair `(u, v)` the
/// `topk` bank entries most similar to `z_v` are promoted to positives in
/// modality `u`'s InfoNCE, weighted by modality `v`'s softmax similarity over
/// its whole bank. Gradients flow through both `z_u` and the mining weights.
/// Returns the loss summed over ordered pairs, attributed to each anchor
/// modality `u`.
pub fn ekem_loss(
    tape: &mut Tape,
    batch: &BatchState,
    banks: &[MemoryBank],
    tau: f64,
    topk: usize,
) -> Result<LossNodes> {
    check_tau(tau)?;
    let n = batch.modality_count();
    if banks.len() != n {
        return Err(Error::Shape(format!(
            "{} banks for {n} modalities",
            banks.len()
        )));
    }
    if n < 2 {
        return Err(Error::Config(
            "explicit mining needs at least two modalities".into(),
        ));
    }
    let ids = banks[0].ids();
    for bank in &banks[1..] {
        if bank.ids() != ids {
            return Err(Error::Data(
                "per-modality banks are misaligned (different entry ids)".into(),
            ));
        }
    }
    if topk > banks[0].len() {
        return Err(Error::Data(format!(
            "cannot mine top {topk} from a bank of {}",
            banks[0].len()
        )));
    }

    // Per-modality logits against that modality's bank, shared across pairs.
    let mut pos = Vec::with_capacity(n);
    let mut negs = Vec::with_capacity(n);
    for u in 0..n {
        let p = tape.row_dot(batch.queries[u], batch.keys[u]);
        pos.push(tape.scale(p, 1.0 / tau));
        if banks[u].is_empty() {
            negs.push(None);
        } else {
            let bank = tape.constant(banks[u].as_matrix().transpose());
            let l = tape.matmul(batch.queries[u], bank);
            negs.push(Some(tape.scale(l, 1.0 / tau)));
        }
    }

    let mut per_modality: Vec<Option<NodeId>> = vec![None; n];
    for u in 0..n {
        for v in 0..n {
            if u == v {
                continue;
            }
            let den = match negs[u] {
                Some(neg) => {
                    let all = tape.concat_cols(&[pos[u], neg]);
                    tape.log_sum_exp_rows(all)
                }
                None => tape.log_sum_exp_rows(pos[u]),
            };
            let num = match (negs[u], negs[v]) {
                (Some(neg_u), Some(neg_v)) if topk > 0 => {
                    let mined = mine_topk(tape.value(neg_v), topk);
                    let picked_u = tape.gather_cols(neg_u, mined.clone());
                    let picked_v = tape.gather_cols(neg_v, mined);
                    let lse_v = tape.log_sum_exp_rows(neg_v);
                    let log_weight = tape.sub_col_broadcast(picked_v, lse_v);
                    let terms = tape.add(picked_u, log_weight);
                    let all = tape.concat_cols(&[pos[u], terms]);
                    tape.log_sum_exp_rows(all)
                }
                _ => pos[u],
            };
            let per_sample = tape.sub(den, num);
            let pair = tape.mean_rows(per_sample);
            per_modality[u] = Some(match per_modality[u] {
                Some(acc) => tape.add(acc, pair),
                None => pair,
            });
        }
    }
    let per_modality: Vec<NodeId> = per_modality.into_iter().map(|n| n.unwrap()).collect();
    let total = sum_nodes(tape, &per_modality);
    Ok(LossNodes {
        total,
        per_modality,
    })
}

/// Append every modality's key embeddings to its bank, in modality order.
pub fn enqueue_keys(tape: &Tape, batch: &BatchState, banks: &mut [MemoryBank]) -> Result<()> {
    if banks.len() != batch.modality_count() {
        return Err(Error::Shape(format!(
            "{} banks for {} modalities",
            banks.len(),
            batch.modality_count()
        )));
    }
    for (u, bank) in banks.iter_mut().enumerate() {
        bank.push_batch(tape.value(batch.keys[u]), &batch.sample_ids)?;
    }
    Ok(())
}

/// Row-wise indices of the `k` largest entries, descending, ties broken
/// toward the lower index. Returned flattened as `rows * k` values.
pub(crate) fn mine_topk(sims: &Matrix, k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(sims.rows() * k);
    for i in 0..sims.rows() {
        let row = sims.row(i);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        out.extend_from_slice(&order[..k]);
    }
    out
}

fn sum_nodes(tape: &mut Tape, nodes: &[NodeId]) -> NodeId {
    let mut total = nodes[0];
    for &n in &nodes[1..] {
        total = tape.add(total, n);
    }
    total
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut row: Vec<f64> = (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = crate::linalg::norm(&row);
            for x in &mut row {
                *x /= n;
            }
            m.row_mut(i).copy_from_slice(&row);
        }
        m
    }

    fn filled_bank(rng: &mut ChaCha8Rng, entries: usize, width: usize) -> MemoryBank {
        let mut bank = MemoryBank::new(entries, width).unwrap();
        let rows = unit_rows(rng, entries, width);
        for i in 0..entries {
            bank.push(rows.row(i), i as u64).unwrap();
        }
        bank
    }

    /// Straightforward per-sample loop evaluation of InfoNCE.
    fn info_nce_oracle(anchors: &Matrix, positives: &Matrix, bank: &Matrix, tau: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..anchors.rows() {
            let l0 = crate::linalg::dot(anchors.row(i), positives.row(i)) / tau;
            let mut den = l0.exp();
            for j in 0..bank.rows() {
                den += (crate::linalg::dot(anchors.row(i), bank.row(j)) / tau).exp();
            }
            total += den.ln() - l0;
        }
        total / anchors.rows() as f64
    }

    fn build_batch(
        tape: &mut Tape,
        queries: &[Matrix],
        anchors: &[Matrix],
        keys: &[Matrix],
    ) -> BatchState {
        let ids: Vec<u64> = (0..queries[0].rows() as u64).collect();
        let q: Vec<NodeId> = queries.iter().map(|m| tape.constant(m.clone())).collect();
        let a: Vec<NodeId> = anchors.iter().map(|m| tape.constant(m.clone())).collect();
        let k: Vec<NodeId> = keys.iter().map(|m| tape.constant(m.clone())).collect();
        BatchState::new(tape, ids, q, a, k).unwrap()
    }

    #[test]
    fn info_nce_orthogonal_negative_closed_form() {
        let a = Matrix::row_vector(vec![1.0, 0.0]);
        let mut bank = MemoryBank::new(4, 2).unwrap();
        bank.push(&[0.0, 1.0], 0).unwrap();
        let loss = info_nce(&a, &a, &bank, 1.0).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((loss - expect).abs() < 1e-12);
        assert!((loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn info_nce_empty_bank_is_zero() {
        let a = Matrix::row_vector(vec![0.6, 0.8]);
        let bank = MemoryBank::new(4, 2).unwrap();
        assert_eq!(info_nce(&a, &a, &bank, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn info_nce_all_negatives_equal_positive() {
        let a = Matrix::row_vector(vec![0.0, 1.0, 0.0]);
        for n in [1usize, 5, 11] {
            let mut bank = MemoryBank::new(16, 3).unwrap();
            for i in 0..n {
                bank.push(&[0.0, 1.0, 0.0], i as u64).unwrap();
            }
            for tau in [0.07, 0.5, 3.0] {
                let loss = info_nce(&a, &a, &bank, tau).unwrap();
                assert!(
                    (loss - (1.0 + n as f64).ln()).abs() < 1e-12,
                    "n={n} tau={tau}"
                );
            }
        }
    }

    #[test]
    fn info_nce_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let anchors = unit_rows(&mut rng, 4, 6);
        let positives = unit_rows(&mut rng, 4, 6);
        let bank = filled_bank(&mut rng, 8, 6);
        let loss = info_nce(&anchors, &positives, &bank, 0.07).unwrap();
        let expect = info_nce_oracle(&anchors, &positives, &bank.as_matrix(), 0.07);
        assert!((loss - expect).abs() < 1e-10);
    }

    #[test]
    fn info_nce_decreases_as_alignment_improves() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = filled_bank(&mut rng, 8, 4);
        let p = Matrix::row_vector(vec![1.0, 0.0, 0.0, 0.0]);
        let mut last = f64::INFINITY;
        for align in [0.0_f64, 0.5, 0.9, 1.0] {
            let other = (1.0 - align * align).sqrt();
            let a = Matrix::row_vector(vec![align, other, 0.0, 0.0]);
            let loss = info_nce(&a, &p, &bank, 0.2).unwrap();
            assert!(loss >= 0.0);
            assert!(loss < last);
            last = loss;
        }
    }

    #[test]
    fn info_nce_is_bank_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let anchors = unit_rows(&mut rng, 3, 5);
        let positives = unit_rows(&mut rng, 3, 5);
        let rows = unit_rows(&mut rng, 6, 5);
        let mut fwd = MemoryBank::new(6, 5).unwrap();
        let mut rev = MemoryBank::new(6, 5).unwrap();
        for i in 0..6 {
            fwd.push(rows.row(i), i as u64).unwrap();
            rev.push(rows.row(5 - i), (5 - i) as u64).unwrap();
        }
        let a = info_nce(&anchors, &positives, &fwd, 0.07).unwrap();
        let b = info_nce(&anchors, &positives, &rev, 0.07).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn info_nce_rejects_width_mismatch() {
        let a = Matrix::row_vector(vec![1.0, 0.0]);
        let p = Matrix::row_vector(vec![1.0, 0.0, 0.0]);
        let bank = MemoryBank::new(4, 2).unwrap();
        assert!(info_nce(&a, &p, &bank, 0.07).is_err());
        assert!(info_nce(&a, &a, &bank, 0.0).is_err());
    }

    #[test]
    fn ikem_perfect_alignment_empty_bank_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let keys: Vec<Matrix> = (0..3).map(|_| unit_rows(&mut rng, 4, 5)).collect();
        // Anchors equal to the normalized concatenated key.
        let mut scratch = Tape::new();
        let k_nodes: Vec<NodeId> = keys.iter().map(|m| scratch.constant(m.clone())).collect();
        let cat = scratch.concat_cols(&k_nodes);
        let zc = scratch.l2_normalize_rows(cat);
        let zc_value = scratch.value(zc).clone();

        let mut tape = Tape::new();
        let batch = build_batch(&mut tape, &keys, &vec![zc_value; 3], &keys);
        let mut bank = MemoryBank::new(8, 15).unwrap();
        let loss = ikem_loss(&mut tape, &batch, &mut bank, 0.07).unwrap();
        assert_eq!(tape.value(loss.total).item(), 0.0);
        assert_eq!(bank.len(), 4); // the batch keys were enqueued
    }

    #[test]
    fn ikem_single_modality_equals_info_nce_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = unit_rows(&mut rng, 4, 6);
        let anchor = unit_rows(&mut rng, 4, 6);
        let k = unit_rows(&mut rng, 4, 6);
        let bank = filled_bank(&mut rng, 8, 6);

        let mut tape = Tape::new();
        let batch = build_batch(&mut tape, &[q], &[anchor.clone()], &[k.clone()]);
        let mut bank_c = bank.clone();
        let loss = ikem_loss(&mut tape, &batch, &mut bank_c, 0.07).unwrap();
        let direct = info_nce(&anchor, &k, &bank, 0.07).unwrap();
        assert_eq!(tape.value(loss.total).item(), direct);
    }

    #[test]
    fn ikem_matches_loop_oracle_and_evicts_fifo() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 3;
        let c = 4;
        let queries: Vec<Matrix> = (0..n).map(|_| unit_rows(&mut rng, 4, c)).collect();
        let anchors: Vec<Matrix> = (0..n).map(|_| unit_rows(&mut rng, 4, n * c)).collect();
        let keys: Vec<Matrix> = (0..n).map(|_| unit_rows(&mut rng, 4, c)).collect();
        let mut bank = filled_bank(&mut rng, 8, n * c);
        let bank_before = bank.as_matrix();

        let mut tape = Tape::new();
        let batch = build_batch(&mut tape, &queries, &anchors, &keys);
        let zc = tape.value(batch.concat_key).clone();
        let loss = ikem_loss(&mut tape, &batch, &mut bank, 0.07).unwrap();

        let mut expect = 0.0;
        for a in &anchors {
            expect += info_nce_oracle(a, &zc, &bank_before, 0.07);
        }
        assert!((tape.value(loss.total).item() - expect).abs() < 1e-10);
        assert_eq!(loss.per_modality.len(), n);

        // Capacity 8, 4 enqueued: the oldest 4 entries were evicted.
        assert_eq!(bank.len(), 8);
        let after = bank.as_matrix();
        for i in 0..4 {
            assert_eq!(after.row(i), bank_before.row(i + 4));
            assert_eq!(after.row(i + 4), zc.row(i));
        }
    }

    #[test]
    fn ekem_topk_zero_reduces_to_summed_info_nce() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let queries: Vec<Matrix> = (0..2).map(|_| unit_rows(&mut rng, 4, 5)).collect();
        let keys: Vec<Matrix> = (0..2).map(|_| unit_rows(&mut rng, 4, 5)).collect();
        let banks: Vec<MemoryBank> = (0..2).map(|_| filled_bank(&mut rng, 8, 5)).collect();

        let mut tape = Tape::new();
        let batch = build_batch(&mut tape, &queries, &[], &keys);
        let loss = ekem_loss(&mut tape, &batch, &banks, 0.07, 0).unwrap();
        let expect: f64 = (0..2)
            .map(|u| info_nce(&queries[u], &keys[u], &banks[u], 0.07).unwrap())
            .sum();
        assert_eq!(tape.value(loss.total).item(), expect);
    }

    #[test]
    fn ekem_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 3;
        let queries: Vec<Matrix> = (0..n).map(|_| unit_rows(&mut rng, 4, 5)).collect();
        let keys: Vec<Matrix> = (0..n).map(|_| unit_rows(&mut rng, 4, 5)).collect();
        let banks: Vec<MemoryBank> = (0..n).map(|_| filled_bank(&mut rng, 8, 5)).collect();
        let tau = 0.07;

        let mut tape = Tape::new();
        let batch = build_batch(&mut tape, &queries, &[], &keys);
        let loss = ekem_loss(&mut tape, &batch, &banks, tau, 1).unwrap();

        let mut expect = 0.0;
        for u in 0..n {
            for v in 0..n {
                if u == v {
                    continue;
                }
                let bu = banks[u].as_matrix();
                let bv = banks[v].as_matrix();
                let mut pair = 0.0;
                for i in 0..4 {
                    let l0 = crate::linalg::dot(queries[u].row(i), keys[u].row(i)) / tau;
                    let lu: Vec<f64> = (0..bu.rows())
                        .map(|j| crate::linalg::dot(queries[u].row(i), bu.row(j)) / tau)
                        .collect();
                    let lv: Vec<f64> = (0..bv.rows())
                        .map(|j| crate::linalg::dot(queries[v].row(i), bv.row(j)) / tau)
                        .collect();
                    let den: f64 = l0.exp() + lu.iter().map(|x| x.exp()).sum::<f64>();
                    let z: f64 = lv.iter().map(|x| x.exp()).sum();
                    let mut best = 0;
                    for j in 1..lv.len() {
                        if lv[j] > lv[best] {
                            best = j;
                        }
                    }
                    let num = l0.exp() + lu[best].exp() * (lv[best].exp() / z);
                    pair += den.ln() - num.ln();
                }
                expect += pair / 4.0;
            }
        }
        assert!((tape.value(loss.total).item() - expect).abs() < 1e-10);
    }

    #[test]
    fn ekem_mining_picks_most_similar_bank_entries() {
        let sims = Matrix::from_vec(2, 4, vec![0.1, 0.9, 0.3, 0.9, 0.5, 0.2, 0.2, 0.1]).unwrap();
        assert_eq!(mine_topk(&sims, 1), vec![1, 0]);
        assert_eq!(mine_topk(&sims, 2), vec![1, 3, 0, 1]);
    }

    #[test]
    fn ekem_identical_modalities_mine_identically() {
        // With identical embeddings in both modalities, the indices mined in
        // v are exactly the entries most similar to the anchor's own bank.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = unit_rows(&mut rng, 4, 5);
        let bank = filled_bank(&mut rng, 8, 5);
        let sims = q.matmul(&bank.as_matrix().transpose());
        let mined = mine_topk(&sims, 1);
        for i in 0..4 {
            let row = sims.row(i);
            let best = (0..8).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            assert_eq!(mined[i], best);
        }
    }

    #[test]
    fn ekem_rejects_misaligned_banks() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let queries: Vec<Matrix> = (0..2).map(|_| unit_rows(&mut rng, 2, 4)).collect();
        let keys: Vec<Matrix> = (0..2).map(|_| unit_rows(&mut rng, 2, 4)).collect();
        let a = filled_bank(&mut rng, 4, 4);
        let mut b = filled_bank(&mut rng, 4, 4);
        let extra = unit_rows(&mut rng, 1, 4);
        b.push(extra.row(0), 99).unwrap();

        let mut tape = Tape::new();
        let batch = build_batch(&mut tape, &queries, &[], &keys);
        assert!(ekem_loss(&mut tape, &batch, &[a, b], 0.07, 1).is_err());
    }

    #[test]
    fn engine_losses_pass_gradient_check() {
        use crate::encoder::{grad_check, GradCheckConfig, GradientSet, ParamBlock, ParamSet};

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 2;
        let batch = 3;
        let c = 4;
        let raw: Vec<Matrix> = (0..n).map(|_| unit_rows(&mut rng, batch, c)).collect();
        let keys: Vec<Matrix> = (0..n).map(|_| unit_rows(&mut rng, batch, c)).collect();
        let anchors_raw: Vec<Matrix> =
            (0..n).map(|_| unit_rows(&mut rng, batch, n * c)).collect();
        let banks: Vec<MemoryBank> = (0..n).map(|_| filled_bank(&mut rng, 6, c)).collect();
        let bank_c = filled_bank(&mut rng, 6, n * c);

        // Parameter blocks are the raw (pre-normalization) queries and
        // anchors, so the check exercises the normalization too.
        let mut blocks = Vec::new();
        for (u, m) in raw.iter().enumerate() {
            blocks.push(ParamBlock {
                name: format!("q{u}"),
                value: m.clone(),
            });
        }
        for (u, m) in anchors_raw.iter().enumerate() {
            blocks.push(ParamBlock {
                name: format!("a{u}"),
                value: m.clone(),
            });
        }
        let params = ParamSet::from_blocks(blocks);

        let eval = |sets: &[ParamSet], want_grads: bool| -> (f64, Option<GradientSet>) {
            let mut tape = Tape::new();
            let mut param_nodes = Vec::new();
            let mut queries = Vec::new();
            for u in 0..n {
                let q = tape.param(sets[0].block(&format!("q{u}")).clone());
                param_nodes.push(q);
                queries.push(tape.l2_normalize_rows(q));
            }
            let mut anchors = Vec::new();
            for u in 0..n {
                let a = tape.param(sets[0].block(&format!("a{u}")).clone());
                param_nodes.push(a);
                anchors.push(tape.l2_normalize_rows(a));
            }
            let key_nodes: Vec<NodeId> = keys.iter().map(|m| tape.constant(m.clone())).collect();
            let ids: Vec<u64> = (0..batch as u64).collect();
            let state = BatchState::new(&mut tape, ids, queries, anchors, key_nodes).unwrap();
            let mut bank_c = bank_c.clone();
            let ikem = ikem_loss(&mut tape, &state, &mut bank_c, 0.07).unwrap();
            let ekem = ekem_loss(&mut tape, &state, &banks, 0.07, 1).unwrap();
            let total = tape.add(ikem.total, ekem.total);
            let value = tape.value(total).item();
            if !want_grads {
                return (value, None);
            }
            tape.backward(total);
            let gblocks = sets[0]
                .blocks()
                .iter()
                .zip(&param_nodes)
                .map(|(b, &node)| ParamBlock {
                    name: b.name.clone(),
                    value: tape.grad(node).cloned().unwrap_or_else(|| {
                        Matrix::zeros(b.value.rows(), b.value.cols())
                    }),
                })
                .collect();
            (value, Some(GradientSet { blocks: gblocks }))
        };

        let sets = vec![params];
        let (_, grads) = eval(&sets, true);
        let report = grad_check(
            &sets,
            &[grads.unwrap()],
            &mut |p| Ok(eval(p, false).0),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 72); // every coordinate of the 2x(3x4 + 3x8) blocks
        assert!(report.max_rel_err < 1e-4);
    }
}
