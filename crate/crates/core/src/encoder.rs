//! Per-modality encoder stacks: a shared backbone with projection heads,
//! a momentum-updated key copy, and gradient checking over parameter sets.
//!
//! The backbone flattens each frame to `3 * joints` values, applies an affine
//! layer with tanh, mean-pools over time, and maps the pooled vector to the
//! feature width. Projection heads are two-layer tanh networks whose outputs
//! are row-normalized onto the unit sphere.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::modality::ModalityKind;
use crate::tensor::Tensor3;

/// Block count of a key parameter set: backbone plus the `g` head.
pub const KEY_BLOCKS: usize = 8;

/// Layer widths of one encoder stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderArch {
    /// Flattened frame width, `3 * joints`.
    pub input_width: usize,
    /// Per-frame hidden width before temporal pooling.
    pub hidden_width: usize,
    /// Pooled feature width, the representation used for evaluation.
    pub feature_width: usize,
    /// Contrastive embedding width of the `g` head.
    pub embed_width: usize,
    /// Output width of the group head, `group_size * embed_width`.
    pub group_width: usize,
    /// Output width of the auxiliary head; 0 when the stack has none.
    pub aux_width: usize,
}

/// Which projection head to apply after the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Contrastive embedding head, width `embed_width`.
    G,
    /// Group head producing the concatenation-sized anchor, `group_width`.
    GTilde,
    /// Auxiliary head (students only), width `aux_width`.
    Aux,
}

impl EncoderArch {
    /// Block names and shapes in fixed serialization order.
    pub(crate) fn block_shapes(&self) -> Vec<(&'static str, usize, usize)> {
        let mut shapes = vec![
            ("enc.w1", self.input_width, self.hidden_width),
            ("enc.b1", 1, self.hidden_width),
            ("enc.w2", self.hidden_width, self.feature_width),
            ("enc.b2", 1, self.feature_width),
            ("g.w1", self.feature_width, self.feature_width),
            ("g.b1", 1, self.feature_width),
            ("g.w2", self.feature_width, self.embed_width),
            ("g.b2", 1, self.embed_width),
            ("gt.w1", self.feature_width, self.feature_width),
            ("gt.b1", 1, self.feature_width),
            ("gt.w2", self.feature_width, self.group_width),
            ("gt.b2", 1, self.group_width),
        ];
        if self.aux_width > 0 {
            shapes.extend([
                ("aux.w1", self.feature_width, self.feature_width),
                ("aux.b1", 1, self.feature_width),
                ("aux.w2", self.feature_width, self.aux_width),
                ("aux.b2", 1, self.aux_width),
            ]);
        }
        shapes
    }
}

/// One named parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: Matrix,
}

/// An ordered collection of named parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    blocks: Vec<ParamBlock>,
}

/// Gradients mirroring a [`ParamSet`] block for block.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub blocks: Vec<ParamBlock>,
}

impl ParamSet {
    /// Initialize all blocks: weights uniform in `(-1/sqrt(fan_in),
    /// 1/sqrt(fan_in))`, biases zero so an all-zero input maps to an all-zero
    /// feature.
    pub fn init(arch: &EncoderArch, rng: &mut ChaCha8Rng) -> ParamSet {
        let mut blocks = Vec::new();
        for (name, rows, cols) in arch.block_shapes() {
            let mut value = Matrix::zeros(rows, cols);
            if !name.ends_with(".b1") && !name.ends_with(".b2") {
                let bound = 1.0 / (rows as f64).sqrt();
                for x in value.as_mut_slice() {
                    *x = rng.gen_range(-bound..bound);
                }
            }
            blocks.push(ParamBlock {
                name: name.to_string(),
                value,
            });
        }
        ParamSet { blocks }
    }

    /// A set over caller-provided blocks (probes, test fixtures).
    pub fn from_blocks(blocks: Vec<ParamBlock>) -> ParamSet {
        ParamSet { blocks }
    }

    /// Zero-valued set with the same block structure as `self`.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock {
                    name: b.name.clone(),
                    value: Matrix::zeros(b.value.rows(), b.value.cols()),
                })
                .collect(),
        }
    }

    /// The backbone and `g`-head blocks, the part a key encoder carries.
    pub fn key_subset(&self) -> ParamSet {
        ParamSet {
            blocks: self.blocks[..KEY_BLOCKS].to_vec(),
        }
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn block(&self, name: &str) -> &Matrix {
        &self
            .blocks
            .iter()
            .find(|b| b.name == name)
            .unwrap_or_else(|| panic!("no parameter block named '{name}'"))
            .value
    }

    pub fn coordinate_count(&self) -> usize {
        self.blocks.iter().map(|b| b.value.as_slice().len()).sum()
    }

    /// Serialize as interleaved text/binary block records.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "params {}", self.blocks.len())?;
        for b in &self.blocks {
            writeln!(out, "block {} {} {}", b.name, b.value.rows(), b.value.cols())?;
            for x in b.value.as_slice() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: &mut R) -> Result<ParamSet> {
        let header = read_line(input)?;
        let count: usize = match header.split_whitespace().collect::<Vec<_>>()[..] {
            ["params", n] => n
                .parse()
                .map_err(|_| Error::Data(format!("bad params header '{header}'")))?,
            _ => return Err(Error::Data(format!("bad params header '{header}'"))),
        };
        let mut blocks = Vec::with_capacity(count);
        for _ in 0..count {
            let line = read_line(input)?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            let (name, rows, cols) = match fields[..] {
                ["block", name, rows, cols] => {
                    let rows: usize = rows
                        .parse()
                        .map_err(|_| Error::Data(format!("bad block header '{line}'")))?;
                    let cols: usize = cols
                        .parse()
                        .map_err(|_| Error::Data(format!("bad block header '{line}'")))?;
                    (name.to_string(), rows, cols)
                }
                _ => return Err(Error::Data(format!("bad block header '{line}'"))),
            };
            let mut raw = vec![0u8; rows * cols * 8];
            input
                .read_exact(&mut raw)
                .map_err(|_| Error::Data(format!("block '{name}' truncated")))?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blocks.push(ParamBlock {
                name,
                value: Matrix::from_vec(rows, cols, data)?,
            });
        }
        Ok(ParamSet { blocks })
    }

    /// `self += scale * delta` over matching blocks.
    pub fn add_scaled(&mut self, delta: &GradientSet, scale: f64) {
        assert_eq!(self.blocks.len(), delta.blocks.len(), "block count mismatch");
        for (p, d) in self.blocks.iter_mut().zip(&delta.blocks) {
            assert_eq!(p.name, d.name, "block order mismatch");
            p.value.add_scaled(&d.value, scale);
        }
    }
}

fn read_line<R: BufRead>(input: &mut R) -> Result<String> {
    let mut line = String::new();
    let n = input.read_line(&mut line)?;
    if n == 0 {
        return Err(Error::Data("unexpected end of parameter data".into()));
    }
    Ok(line.trim_end().to_string())
}

/// Query/key parameter pair for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub kind: ModalityKind,
    pub arch: EncoderArch,
    pub query: ParamSet,
    pub key: ParamSet,
}

impl EncoderStack {
    /// Initialize the query parameters and copy their backbone into the key.
    pub fn init(kind: ModalityKind, arch: EncoderArch, rng: &mut ChaCha8Rng) -> EncoderStack {
        let query = ParamSet::init(&arch, rng);
        let key = query.key_subset();
        EncoderStack {
            kind,
            arch,
            query,
            key,
        }
    }

    /// `key <- m * key + (1 - m) * query` over the key blocks.
    pub fn momentum_update(&mut self, m: f64) {
        momentum_update(&mut self.key, &self.query, m);
    }
}

/// `key <- m * key + (1 - m) * query`, matching key blocks by name.
pub fn momentum_update(key: &mut ParamSet, query: &ParamSet, m: f64) {
    for kb in key.blocks.iter_mut() {
        let qb = query.block(&kb.name);
        for (k, q) in kb.value.as_mut_slice().iter_mut().zip(qb.as_slice()) {
            *k = m * *k + (1.0 - m) * q;
        }
    }
}

/// Parameter blocks inserted into a tape, in block order.
pub struct ParamNodes {
    names: Vec<String>,
    ids: Vec<NodeId>,
}

impl ParamNodes {
    pub fn node(&self, name: &str) -> NodeId {
        let at = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter node named '{name}'"));
        self.ids[at]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Insert every block of `set` into the tape, differentiable when
/// `trainable`.
pub fn insert_params(tape: &mut Tape, set: &ParamSet, trainable: bool) -> ParamNodes {
    let mut names = Vec::with_capacity(set.blocks.len());
    let mut ids = Vec::with_capacity(set.blocks.len());
    for b in &set.blocks {
        names.push(b.name.clone());
        ids.push(if trainable {
            tape.param(b.value.clone())
        } else {
            tape.constant(b.value.clone())
        });
    }
    ParamNodes { names, ids }
}

/// Flatten a `[3][T][V]` modality tensor to a `T x 3V` frame matrix, row `t`
/// laid out channel-major: `[x_0..x_{V-1}, y_0.., z_0..]`.
pub fn frames_matrix(data: &Tensor3) -> Matrix {
    let (frames, joints) = (data.frames(), data.joints());
    let mut out = Matrix::zeros(frames, 3 * joints);
    for t in 0..frames {
        for c in 0..3 {
            for v in 0..joints {
                out.set(t, c * joints + v, data.get(c, t, v));
            }
        }
    }
    out
}

/// Frame matrix scaled to unit RMS over all entries. The derived streams
/// span orders of magnitude (positions are unit-scale, per-frame rates are
/// centiunits) and the backbone carries no normalization layer, so encoders
/// consume this standardized form. All-zero input stays all-zero.
pub fn standardized_frames(data: &Tensor3) -> Matrix {
    let mut m = frames_matrix(data);
    let slice = m.as_slice();
    let rms = (slice.iter().map(|x| x * x).sum::<f64>() / slice.len() as f64).sqrt();
    if rms > 1e-12 {
        for x in m.as_mut_slice() {
            *x /= rms;
        }
    }
    m
}

/// Backbone forward for a batch of frame matrices: per-frame affine and tanh,
/// temporal mean-pool, then an affine map to the feature width. Returns the
/// `B x feature_width` feature node.
pub fn encode(tape: &mut Tape, nodes: &ParamNodes, samples: &[Matrix]) -> NodeId {
    assert!(!samples.is_empty(), "encode needs at least one sample");
    let w1 = nodes.node("enc.w1");
    let b1 = nodes.node("enc.b1");
    let w2 = nodes.node("enc.w2");
    let b2 = nodes.node("enc.b2");
    let mut pooled = Vec::with_capacity(samples.len());
    for sample in samples {
        let x = tape.constant(sample.clone());
        let h = tape.matmul(x, w1);
        let h = tape.add_row_bias(h, b1);
        let h = tape.tanh(h);
        pooled.push(tape.mean_rows(h));
    }
    let batch = tape.stack_rows(&pooled);
    let f = tape.matmul(batch, w2);
    tape.add_row_bias(f, b2)
}

/// Projection head forward: affine, tanh, affine, then row normalization onto
/// the unit sphere. Returns a `B x width` node of unit (or all-zero) rows.
pub fn project(tape: &mut Tape, nodes: &ParamNodes, head: Head, features: NodeId) -> NodeId {
    let prefix = match head {
        Head::G => "g",
        Head::GTilde => "gt",
        Head::Aux => "aux",
    };
    let w1 = nodes.node(&format!("{prefix}.w1"));
    let b1 = nodes.node(&format!("{prefix}.b1"));
    let w2 = nodes.node(&format!("{prefix}.w2"));
    let b2 = nodes.node(&format!("{prefix}.b2"));
    let h = tape.matmul(features, w1);
    let h = tape.add_row_bias(h, b1);
    let h = tape.tanh(h);
    let z = tape.matmul(h, w2);
    let z = tape.add_row_bias(z, b2);
    tape.l2_normalize_rows(z)
}

/// Collect gradients for every block of `nodes` after a backward pass,
/// zero-filled where no gradient reached the block.
pub fn collect_gradients(tape: &Tape, nodes: &ParamNodes, like: &ParamSet) -> GradientSet {
    let blocks = like
        .blocks
        .iter()
        .map(|b| {
            let id = nodes.node(&b.name);
            let value = match tape.grad(id) {
                Some(g) => g.clone(),
                None => Matrix::zeros(b.value.rows(), b.value.cols()),
            };
            ParamBlock {
                name: b.name.clone(),
                value,
            }
        })
        .collect();
    GradientSet { blocks }
}

/// Settings for [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Number of coordinates to sample across all parameter sets.
    pub sample_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            sample_coords: 200,
            seed: 0,
        }
    }
}

/// Outcome of a finite-difference gradient verification.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `set/block[index]` of the worst coordinate.
    pub worst_coordinate: String,
}

/// Verify analytic gradients against central differences at sampled
/// coordinates. `loss` must re-evaluate the objective from scratch for the
/// given parameters; `grads` are the analytic gradients at `params`. Fails
/// with a numeric error when any sampled coordinate exceeds the tolerance.
pub fn grad_check(
    params: &[ParamSet],
    grads: &[GradientSet],
    loss: &mut dyn FnMut(&[ParamSet]) -> Result<f64>,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    assert_eq!(params.len(), grads.len(), "one gradient set per param set");
    let mut coords = Vec::new();
    for (si, set) in params.iter().enumerate() {
        for (bi, b) in set.blocks.iter().enumerate() {
            assert_eq!(b.name, grads[si].blocks[bi].name, "block order mismatch");
            for k in 0..b.value.as_slice().len() {
                coords.push((si, bi, k));
            }
        }
    }
    if coords.is_empty() {
        return Err(Error::Config("grad_check on empty parameter sets".into()));
    }

    use rand::prelude::*;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let count = config.sample_coords.min(coords.len());
    let sampled: Vec<(usize, usize, usize)> = coords
        .choose_multiple(&mut rng, count)
        .cloned()
        .collect();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_coordinate: String::new(),
    };
    let mut work: Vec<ParamSet> = params.to_vec();
    for (si, bi, k) in sampled {
        let base = params[si].blocks[bi].value.as_slice()[k];
        work[si].blocks[bi].value.as_mut_slice()[k] = base + config.step;
        let up = loss(&work)?;
        work[si].blocks[bi].value.as_mut_slice()[k] = base - config.step;
        let down = loss(&work)?;
        work[si].blocks[bi].value.as_mut_slice()[k] = base;

        let fd = (up - down) / (2.0 * config.step);
        let analytic = grads[si].blocks[bi].value.as_slice()[k];
        let denom = analytic.abs().max(fd.abs()).max(1e-5);
        let rel = ((analytic - fd) / denom).abs();
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coordinate =
                format!("{}/{}[{k}]", si, params[si].blocks[bi].name);
        }
        if rel > config.tolerance {
            return Err(Error::Numeric(format!(
                "gradient mismatch at {}: analytic {analytic} vs finite-difference {fd} \
                 (rel err {rel:.3e})",
                report.worst_coordinate
            )));
        }
    }
    Ok(report)
}
