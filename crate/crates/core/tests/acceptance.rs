//! Acceptance suite. Each test covers one shipping criterion and prints one
//! `criterion NN PASS` line on success (run with `--nocapture` to see them);
//! a failing assertion is the corresponding fail line. The desk-scale runs
//! use the committed synthetic dataset and the committed toy configuration
//! from `configs/toy.toml`.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use kinemod::autodiff::{Tape, NORM_EPS};
use kinemod::data::manifest::{split_dataset, DatasetManifest, ManifestRecord, SplitRule};
use kinemod::data::synthetic::{generate_synthetic, SyntheticSpec};
use kinemod::distill::{distill_loss, distill_train, DistillConfig};
use kinemod::encoder::{EncoderArch, EncoderStack};
use kinemod::engine::bank::MemoryBank;
use kinemod::engine::config::TrainConfig;
use kinemod::engine::gradcheck::gradient_suite;
use kinemod::engine::losses::{ekem_loss, ikem_loss, info_nce, BatchState};
use kinemod::engine::train::{pretrain, Checkpoint};
use kinemod::eval::{evaluate, EvalConfig};
use kinemod::linalg::Matrix;
use kinemod::modality::{
    derive_all, derive_bones, derive_joint_angles, ModalityKind, ModalityTensor, DEGENERATE_EPS,
};
use kinemod::skeleton::{
    default_topology, resize_sequence, SkeletonSequence, SkeletonTopology, RESIZE_FRAMES,
};
use kinemod::tensor::Tensor3;

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

fn max_rel(a: &Tensor3, b: &Tensor3) -> f64 {
    let (x, y) = (a.as_slice(), b.as_slice());
    assert_eq!(x.len(), y.len());
    x.iter()
        .zip(y)
        .map(|(&p, &q)| rel_err(p, q))
        .fold(0.0, f64::max)
}

fn max_abs(a: &Tensor3, b: &Tensor3) -> f64 {
    let (x, y) = (a.as_slice(), b.as_slice());
    assert_eq!(x.len(), y.len());
    x.iter()
        .zip(y)
        .map(|(&p, &q)| (p - q).abs())
        .fold(0.0, f64::max)
}

fn random_walk(rng: &mut ChaCha8Rng, frames: usize, joints: usize) -> Tensor3 {
    let mut data = Tensor3::zeros(3, frames, joints);
    for v in 0..joints {
        let mut p = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        for t in 0..frames {
            for x in &mut p {
                *x += rng.gen_range(-0.1..0.1);
            }
            data.set_vec3(t, v, p);
        }
    }
    data
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let mut row: Vec<f64> = (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = kinemod::linalg::norm(&row);
        for x in &mut row {
            *x /= norm;
        }
        m.row_mut(r).copy_from_slice(&row);
    }
    m
}

fn filled_bank(rng: &mut ChaCha8Rng, entries: usize, width: usize) -> MemoryBank {
    let mut bank = MemoryBank::new(entries.max(1), width).unwrap();
    let rows = unit_rows(rng, entries, width);
    for i in 0..entries {
        bank.push(rows.row(i), i as u64).unwrap();
    }
    bank
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// --- committed toy configuration (mirrors configs/toy.toml) ---------------

fn toy_train_config() -> TrainConfig {
    TrainConfig {
        stage1_epochs: 30,
        stage2_epochs: 30,
        batch_size: 16,
        bank_capacity: 128,
        hidden_width: 32,
        feature_width: 48,
        embed_width: 16,
        key_momentum: 0.9,
        ..TrainConfig::default()
    }
}

fn toy_baseline_config() -> TrainConfig {
    TrainConfig {
        modalities: ModalityKind::FUNDAMENTAL.to_vec(),
        freeze_high_perf: vec![ModalityKind::Joint, ModalityKind::Bone],
        ..toy_train_config()
    }
}

fn toy_distill_config() -> DistillConfig {
    DistillConfig {
        epochs: 30,
        batch_size: 16,
        hidden_width: 32,
        feature_width: 48,
        embed_width: 16,
        learning_rate: 0.5,
        tau: 0.2,
        ..DistillConfig::default()
    }
}

struct ToyRun {
    teacher_fused: f64,
    baseline_fused: f64,
    student_fused: f64,
    pretrain_elapsed: Duration,
    distill_elapsed: Duration,
    teacher_untouched: bool,
    pretrain_csv: (Vec<u8>, Vec<u8>),
    distill_csv: (Vec<u8>, Vec<u8>),
}

static TOY: OnceLock<ToyRun> = OnceLock::new();

fn toy() -> &'static ToyRun {
    TOY.get_or_init(run_toy)
}

fn run_toy() -> ToyRun {
    let topo = default_topology();
    let spec = SyntheticSpec::default();
    let samples = generate_synthetic(&spec).unwrap();
    let sequences: Vec<SkeletonSequence> =
        samples.iter().map(|s| s.sequence.clone()).collect();

    let records: Vec<ManifestRecord> = samples
        .iter()
        .map(|s| ManifestRecord {
            id: s.id.clone(),
            path: format!("{}.skeleton", s.id),
            label: s.sequence.label().unwrap(),
            subject: Some(s.subject),
            camera: Some(s.camera),
        })
        .collect();
    let manifest = DatasetManifest::new(records).unwrap();
    let eval_config = EvalConfig::default();
    let (train_ids, eval_ids) = split_dataset(
        &manifest,
        &SplitRule::RandomFraction { fraction: 0.5 },
        eval_config.seed,
    )
    .unwrap();
    let by_id: BTreeMap<&str, &SkeletonSequence> = samples
        .iter()
        .map(|s| (s.id.as_str(), &s.sequence))
        .collect();
    let pick = |ids: &[String]| -> Vec<SkeletonSequence> {
        ids.iter().map(|id| by_id[id.as_str()].clone()).collect()
    };
    let train_set = pick(&train_ids);
    let eval_set = pick(&eval_ids);

    let fused = |stacks: &[EncoderStack]| -> f64 {
        evaluate(stacks, &train_set, &eval_set, &topo, &eval_config, true, None)
            .unwrap()
            .fused_top1
            .unwrap()
    };

    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let teacher = pretrain(&sequences, &topo, &toy_train_config(), Some(&dir.path().join("t6"))).unwrap();
    let teacher_fused = fused(&teacher.stacks);
    let baseline =
        pretrain(&sequences, &topo, &toy_baseline_config(), Some(&dir.path().join("b3a"))).unwrap();
    let baseline_fused = fused(&baseline.stacks);
    let pretrain_elapsed = started.elapsed();

    // Second identical baseline run for the byte-identical metrics check.
    pretrain(&sequences, &topo, &toy_baseline_config(), Some(&dir.path().join("b3b"))).unwrap();
    let read = |p: std::path::PathBuf| std::fs::read(p).unwrap();
    let pretrain_csv = (
        read(dir.path().join("b3a/pretrain_metrics.csv")),
        read(dir.path().join("b3b/pretrain_metrics.csv")),
    );

    let ckpt = Checkpoint {
        label: "pretrain".into(),
        epoch: toy_train_config().total_epochs(),
        stacks: teacher.stacks.clone(),
    };
    let started = Instant::now();
    let student =
        distill_train(&ckpt, &sequences, &topo, &toy_distill_config(), Some(&dir.path().join("s3a")))
            .unwrap();
    let student_fused = fused(&student.stacks);
    let distill_elapsed = started.elapsed();
    let teacher_untouched = ckpt.stacks == teacher.stacks;
    distill_train(&ckpt, &sequences, &topo, &toy_distill_config(), Some(&dir.path().join("s3b")))
        .unwrap();
    let distill_csv = (
        read(dir.path().join("s3a/distill_metrics.csv")),
        read(dir.path().join("s3b/distill_metrics.csv")),
    );

    ToyRun {
        teacher_fused,
        baseline_fused,
        student_fused,
        pretrain_elapsed,
        distill_elapsed,
        teacher_untouched,
        pretrain_csv,
        distill_csv,
    }
}

// --- criterion 1 -----------------------------------------------------------

#[test]
fn criterion_01_scope_statement() {
    // Benchmark-scale accuracies (NTU-60, ST-GCN backbones, hundreds of
    // epochs) are out of reach for this desk-scale toolkit and are NOT
    // reproduced here. The suite below substitutes exact oracles, invariance
    // properties, and a committed 60-sample synthetic end-to-end run.
    let spec = SyntheticSpec::default();
    assert_eq!(spec.sample_count(), 60);
    assert_eq!(spec.classes.len(), 3);
    assert_eq!(spec.seed, 7);
    println!(
        "criterion 01 PASS: benchmark-scale results are explicitly out of scope; \
         verification uses oracle/property suites on the committed {}-sample dataset",
        spec.sample_count()
    );
}

// --- criterion 2: derivation oracles ---------------------------------------

struct OracleStreams {
    motion: Tensor3,
    bone: Tensor3,
    accel: Tensor3,
    axes: Tensor3,
    omega: Tensor3,
}

fn oracle_streams(seq: &SkeletonSequence, topo: &SkeletonTopology) -> OracleStreams {
    let x = seq.data();
    let (frames, joints) = (x.frames(), x.joints());
    let gamma = seq.original_frames() as f64 / RESIZE_FRAMES as f64;

    let mut motion = Tensor3::zeros(3, frames, joints);
    for c in 0..3 {
        for t in 1..frames {
            for v in 0..joints {
                motion.set(c, t, v, x.get(c, t, v) - x.get(c, t - 1, v));
            }
        }
    }

    let mut bone = Tensor3::zeros(3, frames, joints);
    for body in 0..seq.bodies() {
        let off = body * topo.joint_count();
        for &(child, parent) in topo.bone_pairs() {
            for c in 0..3 {
                for t in 0..frames {
                    bone.set(c, t, off + child, x.get(c, t, off + child) - x.get(c, t, off + parent));
                }
            }
        }
    }

    let mut accel = Tensor3::zeros(3, frames, joints);
    for c in 0..3 {
        for t in 1..frames - 1 {
            for v in 0..joints {
                let dv = motion.get(c, t + 1, v) / gamma - motion.get(c, t, v) / gamma;
                accel.set(c, t, v, dv / gamma);
            }
        }
    }

    let mut axes = Tensor3::zeros(3, frames, joints);
    let mut theta = vec![vec![0.0; joints]; frames];
    for body in 0..seq.bodies() {
        let off = body * topo.joint_count();
        for h in topo.hinges() {
            let vi = off + topo.bone_child(h.bone_i);
            let vj = off + topo.bone_child(h.bone_j);
            for t in 0..frames {
                let bi = bone.vec3(t, vi);
                let bj = bone.vec3(t, vj);
                let cross = [
                    bi[1] * bj[2] - bi[2] * bj[1],
                    bi[2] * bj[0] - bi[0] * bj[2],
                    bi[0] * bj[1] - bi[1] * bj[0],
                ];
                let n = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
                if n >= DEGENERATE_EPS {
                    axes.set_vec3(t, off + h.joint, [cross[0] / n, cross[1] / n, cross[2] / n]);
                }
                let ni = (bi[0] * bi[0] + bi[1] * bi[1] + bi[2] * bi[2]).sqrt();
                let nj = (bj[0] * bj[0] + bj[1] * bj[1] + bj[2] * bj[2]).sqrt();
                if ni >= DEGENERATE_EPS && nj >= DEGENERATE_EPS {
                    let cos = ((bi[0] * bj[0] + bi[1] * bj[1] + bi[2] * bj[2]) / (ni * nj))
                        .clamp(-1.0, 1.0);
                    theta[t][off + h.joint] = cos.acos();
                }
            }
        }
    }

    let mut omega = Tensor3::zeros(3, frames, joints);
    for t in 0..frames - 1 {
        for v in 0..joints {
            let rate = (theta[t + 1][v] - theta[t][v]) / gamma;
            let axis = axes.vec3(t, v);
            omega.set_vec3(t, v, [axis[0] * rate, axis[1] * rate, axis[2] * rate]);
        }
    }

    OracleStreams { motion, bone, accel, axes, omega }
}

#[test]
fn criterion_02_modality_oracles() {
    let started = Instant::now();
    let topo = default_topology();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let frame_choices = [40usize, 50, 75, 100]; // gamma 0.8, 1.0, 1.5, 2.0
    let mut worst = 0.0f64;
    for i in 0..100 {
        let frames = frame_choices[i % frame_choices.len()];
        let bodies = 1 + (i % 2);
        let joints = topo.joint_count() * bodies;
        let data = random_walk(&mut rng, frames, joints);
        let seq = SkeletonSequence::new(data, bodies, frames, None).unwrap();
        let resized = resize_sequence(&seq, RESIZE_FRAMES).unwrap();
        let derived = derive_all(&resized, &topo).unwrap();
        let oracle = oracle_streams(&resized, &topo);
        assert_eq!(derived[0].data, *resized.data(), "sequence {i}: joint stream");
        for (name, lib, ora) in [
            ("motion", &derived[1].data, &oracle.motion),
            ("bone", &derived[2].data, &oracle.bone),
            ("acceleration", &derived[3].data, &oracle.accel),
            ("rotation_axis", &derived[4].data, &oracle.axes),
            ("angular_velocity", &derived[5].data, &oracle.omega),
        ] {
            let err = max_rel(lib, ora);
            assert!(err <= 1e-12, "sequence {i}: {name} oracle rel err {err:.3e}");
            worst = worst.max(err);
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(10), "oracle sweep took {elapsed:?}");
    println!(
        "criterion 02 PASS: 100 mixed-time-scale sequences match loop oracles \
         (worst rel err {worst:.3e}, {elapsed:?})"
    );
}

// --- criterion 3: kinematic invariances ------------------------------------

fn transform_data(seq: &SkeletonSequence, f: impl Fn([f64; 3]) -> [f64; 3]) -> SkeletonSequence {
    let x = seq.data();
    let mut out = Tensor3::zeros(3, x.frames(), x.joints());
    for t in 0..x.frames() {
        for v in 0..x.joints() {
            out.set_vec3(t, v, f(x.vec3(t, v)));
        }
    }
    SkeletonSequence::new(out, seq.bodies(), seq.original_frames(), seq.label()).unwrap()
}

fn rotation_matrix(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let (x, y, z) = (axis[0] / n, axis[1] / n, axis[2] / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn apply_rot(r: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
    ]
}

fn rotate_stream(r: &[[f64; 3]; 3], stream: &ModalityTensor) -> Tensor3 {
    let d = &stream.data;
    let mut out = Tensor3::zeros(3, d.frames(), d.joints());
    for t in 0..d.frames() {
        for v in 0..d.joints() {
            out.set_vec3(t, v, apply_rot(r, d.vec3(t, v)));
        }
    }
    out
}

#[test]
fn criterion_03_translation_and_rotation() {
    let topo = default_topology();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let data = random_walk(&mut rng, 75, topo.joint_count() * 2);
    let seq = SkeletonSequence::new(data, 2, 75, None).unwrap();
    let resized = resize_sequence(&seq, RESIZE_FRAMES).unwrap();
    let base = derive_all(&resized, &topo).unwrap();

    let mut worst_t = 0.0f64;
    for _ in 0..10 {
        let shift = [
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
        ];
        let moved = transform_data(&resized, |p| {
            [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]
        });
        let derived = derive_all(&moved, &topo).unwrap();
        for k in 1..6 {
            let err = max_abs(&derived[k].data, &base[k].data);
            assert!(
                err <= 1e-9,
                "{} not translation invariant: {err:.3e}",
                base[k].kind
            );
            worst_t = worst_t.max(err);
        }
    }

    let mut worst_r = 0.0f64;
    for _ in 0..50 {
        let axis = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let r = rotation_matrix(axis, angle);
        let rotated = transform_data(&resized, |p| apply_rot(&r, p));
        let derived = derive_all(&rotated, &topo).unwrap();

        // Equivariance: bone, rotation axis, and angular velocity co-rotate.
        for k in [2usize, 4, 5] {
            let expected = rotate_stream(&r, &base[k]);
            let err = max_abs(&derived[k].data, &expected);
            assert!(err <= 1e-9, "{} not equivariant: {err:.3e}", base[k].kind);
            worst_r = worst_r.max(err);
        }

        // Invariance: hinge angles are untouched by the rotation.
        let bones_base = derive_bones(&resized, &topo).unwrap();
        let bones_rot = derive_bones(&rotated, &topo).unwrap();
        let theta_base = derive_joint_angles(&bones_base, &topo).unwrap();
        let theta_rot = derive_joint_angles(&bones_rot, &topo).unwrap();
        for t in 0..theta_base.frames() {
            for v in 0..theta_base.joints() {
                let err = (theta_base.get(t, v) - theta_rot.get(t, v)).abs();
                assert!(err <= 1e-9, "hinge angle drifted under rotation: {err:.3e}");
                worst_r = worst_r.max(err);
            }
        }
    }
    println!(
        "criterion 03 PASS: translation invariance (worst {worst_t:.3e}) and \
         50-rotation equivariance/invariance (worst {worst_r:.3e})"
    );
}

// --- criterion 4: time-scale law -------------------------------------------

#[test]
fn criterion_04_time_scale_law() {
    let topo = default_topology();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (orig, doubled) in [(50usize, 100usize), (40, 80)] {
        let data = random_walk(&mut rng, RESIZE_FRAMES, topo.joint_count());
        let a = SkeletonSequence::new(data.clone(), 1, orig, None).unwrap();
        let b = SkeletonSequence::new(data, 1, doubled, None).unwrap();
        let da = derive_all(&a, &topo).unwrap();
        let db = derive_all(&b, &topo).unwrap();
        for (slot, factor, name) in [(3usize, 0.25, "acceleration"), (5, 0.5, "angular_velocity")] {
            let (xa, xb) = (da[slot].data.as_slice(), db[slot].data.as_slice());
            let worst = xa
                .iter()
                .zip(xb)
                .map(|(&p, &q)| rel_err(p * factor, q))
                .fold(0.0, f64::max);
            assert!(
                worst <= 1e-12,
                "{name} at 2x time scale is not x{factor}: rel err {worst:.3e}"
            );
        }
    }
    println!("criterion 04 PASS: doubling the time scale quarters acceleration and halves angular velocity");
}

// --- criterion 5: loss oracles ---------------------------------------------

fn info_nce_oracle(anchors: &Matrix, positives: &Matrix, bank: &Matrix, tau: f64) -> f64 {
    let mut total = 0.0;
    for b in 0..anchors.rows() {
        let pos = dot(anchors.row(b), positives.row(b)) / tau;
        let mut terms = vec![pos];
        for i in 0..bank.rows() {
            terms.push(dot(anchors.row(b), bank.row(i)) / tau);
        }
        total += log_sum_exp(&terms) - pos;
    }
    total / anchors.rows() as f64
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = kinemod::linalg::norm(v);
    v.iter().map(|x| x / (n + NORM_EPS)).collect()
}

fn ekem_oracle(
    queries: &[Matrix],
    keys: &[Matrix],
    banks: &[Matrix],
    tau: f64,
    topk: usize,
) -> f64 {
    let n = queries.len();
    let batch = queries[0].rows();
    let mut total = 0.0;
    for u in 0..n {
        for v in 0..n {
            if u == v {
                continue;
            }
            let mut pair = 0.0;
            for b in 0..batch {
                let pos = dot(queries[u].row(b), keys[u].row(b)) / tau;
                let neg_u: Vec<f64> = (0..banks[u].rows())
                    .map(|i| dot(queries[u].row(b), banks[u].row(i)) / tau)
                    .collect();
                let neg_v: Vec<f64> = (0..banks[v].rows())
                    .map(|i| dot(queries[v].row(b), banks[v].row(i)) / tau)
                    .collect();
                let mut den_terms = vec![pos];
                den_terms.extend_from_slice(&neg_u);
                let den = log_sum_exp(&den_terms);
                let num = if topk == 0 {
                    pos
                } else {
                    let mut order: Vec<usize> = (0..neg_v.len()).collect();
                    order.sort_by(|&a, &c| {
                        neg_v[c]
                            .partial_cmp(&neg_v[a])
                            .unwrap()
                            .then(a.cmp(&c))
                    });
                    let lse_v = log_sum_exp(&neg_v);
                    let mut num_terms = vec![pos];
                    for &j in &order[..topk] {
                        num_terms.push(neg_u[j] + (neg_v[j] - lse_v));
                    }
                    log_sum_exp(&num_terms)
                };
                pair += den - num;
            }
            total += pair / batch as f64;
        }
    }
    total
}

fn distill_oracle(
    z_t: &Matrix,
    z_u: &[Matrix],
    bank: &Matrix,
    teacher_count: usize,
    tau: f64,
    exclude_mined: bool,
) -> f64 {
    let width = bank.cols() / teacher_count;
    let mut total = 0.0;
    for zu in z_u {
        for b in 0..z_t.rows() {
            let pos = dot(z_t.row(b), zu.row(b)) / tau;
            for v in 0..teacher_count {
                let lo = v * width;
                let hi = lo + width;
                let anchor_t = normalize(&z_t.row(b)[lo..hi]);
                let anchor_u = normalize(&zu.row(b)[lo..hi]);
                let mut sims_t = Vec::new();
                let mut products = Vec::new();
                for k in 0..bank.rows() {
                    let entry = normalize(&bank.row(k)[lo..hi]);
                    let st = dot(&anchor_t, &entry);
                    let su = dot(&anchor_u, &entry);
                    sims_t.push(st);
                    products.push(st * su / tau);
                }
                let mut j = 0;
                for (i, &s) in sims_t.iter().enumerate() {
                    if s > sims_t[j] {
                        j = i;
                    }
                }
                let num = log_sum_exp(&[pos, products[j]]);
                let mut den_terms = vec![pos];
                for (i, &p) in products.iter().enumerate() {
                    if exclude_mined && bank.rows() > 1 && i == j {
                        continue;
                    }
                    den_terms.push(p);
                }
                let den = log_sum_exp(&den_terms);
                total += (den - num) / z_t.rows() as f64;
            }
        }
    }
    total
}

#[test]
fn criterion_05_loss_oracles() {
    let tau_choices = [0.07, 0.2, 0.5];
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
        let tau = tau_choices[case as usize % tau_choices.len()];
        let batch = 4;
        let entries = 8;
        let embed = 4;
        let n = if case % 2 == 0 { 1 } else { 3 };

        // Plain InfoNCE against a full bank.
        let anchors = unit_rows(&mut rng, batch, embed);
        let positives = unit_rows(&mut rng, batch, embed);
        let bank = filled_bank(&mut rng, entries, embed);
        let lib = info_nce(&anchors, &positives, &bank, tau).unwrap();
        let ora = info_nce_oracle(&anchors, &positives, &bank.as_matrix(), tau);
        worst = worst.max(rel_err(lib, ora));
        assert!(rel_err(lib, ora) <= 1e-10, "info_nce case {case}: {lib} vs {ora}");

        // Concatenated-key exchange with n modalities.
        {
            let group = n * embed;
            let queries: Vec<Matrix> = (0..n).map(|_| unit_rows(&mut rng, batch, embed)).collect();
            let keys: Vec<Matrix> = (0..n).map(|_| unit_rows(&mut rng, batch, embed)).collect();
            let anchors_g: Vec<Matrix> =
                (0..n).map(|_| unit_rows(&mut rng, batch, group)).collect();
            let mut bank_c = filled_bank(&mut rng, entries, group);
            let bank_before = bank_c.as_matrix();

            let mut concat_key = Matrix::zeros(batch, group);
            for b in 0..batch {
                let mut row = Vec::with_capacity(group);
                for k in &keys {
                    row.extend_from_slice(k.row(b));
                }
                let row = if n == 1 { row } else { normalize(&row) };
                concat_key.row_mut(b).copy_from_slice(&row);
            }
            let mut expected = 0.0;
            for a in &anchors_g {
                expected += info_nce_oracle(a, &concat_key, &bank_before, tau);
            }

            let mut tape = Tape::new();
            let ids: Vec<u64> = (0..batch as u64).collect();
            let q_nodes = queries.iter().map(|m| tape.constant(m.clone())).collect();
            let k_nodes = keys.iter().map(|m| tape.constant(m.clone())).collect();
            let a_nodes = anchors_g.iter().map(|m| tape.constant(m.clone())).collect();
            let state = BatchState::new(&mut tape, ids, q_nodes, a_nodes, k_nodes).unwrap();
            let nodes = ikem_loss(&mut tape, &state, &mut bank_c, tau).unwrap();
            let lib = tape.value(nodes.total).item();
            worst = worst.max(rel_err(lib, expected));
            assert!(
                rel_err(lib, expected) <= 1e-10,
                "ikem case {case} (n={n}): {lib} vs {expected}"
            );
            assert_eq!(bank_c.len(), entries.min(bank_c.capacity()), "ikem must enqueue the batch");
        }

        // Explicit mining over three modalities.
        {
            let n = 3;
            let topk = 1 + (case as usize % 2);
            let queries: Vec<Matrix> = (0..n).map(|_| unit_rows(&mut rng, batch, embed)).collect();
            let keys: Vec<Matrix> = (0..n).map(|_| unit_rows(&mut rng, batch, embed)).collect();
            let banks: Vec<MemoryBank> =
                (0..n).map(|_| filled_bank(&mut rng, entries, embed)).collect();
            let bank_mats: Vec<Matrix> = banks.iter().map(|b| b.as_matrix()).collect();
            let expected = ekem_oracle(&queries, &keys, &bank_mats, tau, topk);

            let mut tape = Tape::new();
            let ids: Vec<u64> = (0..batch as u64).collect();
            let q_nodes = queries.iter().map(|m| tape.constant(m.clone())).collect();
            let k_nodes = keys.iter().map(|m| tape.constant(m.clone())).collect();
            let state = BatchState::new(&mut tape, ids, q_nodes, Vec::new(), k_nodes).unwrap();
            let nodes = ekem_loss(&mut tape, &state, &banks, tau, topk).unwrap();
            let lib = tape.value(nodes.total).item();
            worst = worst.max(rel_err(lib, expected));
            assert!(
                rel_err(lib, expected) <= 1e-10,
                "ekem case {case} (topk={topk}): {lib} vs {expected}"
            );
        }

        // Relational distillation with a six-slice teacher.
        {
            let teacher_count = 6;
            let width = teacher_count * embed;
            let students = if case % 2 == 0 { 1 } else { 3 };
            let exclude = case % 2 == 1;
            let z_t = unit_rows(&mut rng, batch, width);
            let z_u: Vec<Matrix> =
                (0..students).map(|_| unit_rows(&mut rng, batch, width)).collect();
            let bank = filled_bank(&mut rng, entries, width);
            let lib = distill_loss(&z_t, &z_u, &bank, teacher_count, tau, exclude).unwrap();
            let ora = distill_oracle(&z_t, &z_u, &bank.as_matrix(), teacher_count, tau, exclude);
            worst = worst.max(rel_err(lib, ora));
            assert!(
                rel_err(lib, ora) <= 1e-10,
                "distill case {case} (u={students}, exclude={exclude}): {lib} vs {ora}"
            );
        }
    }
    println!("criterion 05 PASS: 20 random loss configurations match loop oracles (worst rel err {worst:.3e})");
}

// --- criterion 6: gradient suite --------------------------------------------

#[test]
fn criterion_06_gradient_suite() {
    let started = Instant::now();
    let outcomes = gradient_suite(0, &Default::default()).unwrap();
    let elapsed = started.elapsed();
    let names: Vec<&str> = outcomes.iter().map(|o| o.loss).collect();
    assert_eq!(names, ["info_nce", "ikem", "ekem", "distill"]);
    for o in &outcomes {
        assert!(
            o.report.checked >= 200,
            "{}: only {} coordinates checked",
            o.loss,
            o.report.checked
        );
        assert!(
            o.report.max_rel_err < 1e-4,
            "{}: finite differences disagree at {:.3e}",
            o.loss,
            o.report.max_rel_err
        );
    }
    assert!(elapsed < Duration::from_secs(60), "gradient suite took {elapsed:?}");
    let worst = outcomes
        .iter()
        .map(|o| o.report.max_rel_err)
        .fold(0.0, f64::max);
    println!(
        "criterion 06 PASS: four objectives x >=200 coordinates through the encoder \
         (worst rel err {worst:.3e}, {elapsed:?})"
    );
}

// --- criterion 7: structural identities -------------------------------------

#[test]
fn criterion_07_structural_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tau = 0.07;
    let batch = 4;
    let embed = 4;

    // Single-modality concatenated-key exchange is plain InfoNCE, exactly.
    let queries = unit_rows(&mut rng, batch, embed);
    let keys = unit_rows(&mut rng, batch, embed);
    let anchors = unit_rows(&mut rng, batch, embed);
    let bank = filled_bank(&mut rng, 8, embed);
    let expected = info_nce(&anchors, &keys, &bank, tau).unwrap();
    let mut bank_c = bank;
    let mut tape = Tape::new();
    let ids: Vec<u64> = (0..batch as u64).collect();
    let q = tape.constant(queries);
    let k = tape.constant(keys);
    let a = tape.constant(anchors);
    let state = BatchState::new(&mut tape, ids.clone(), vec![q], vec![a], vec![k]).unwrap();
    let nodes = ikem_loss(&mut tape, &state, &mut bank_c, tau).unwrap();
    assert_eq!(tape.value(nodes.total).item(), expected);

    // With no mined positives the pair objective is per-modality InfoNCE,
    // summed once per other modality.
    let n = 3;
    let queries: Vec<Matrix> = (0..n).map(|_| unit_rows(&mut rng, batch, embed)).collect();
    let keys: Vec<Matrix> = (0..n).map(|_| unit_rows(&mut rng, batch, embed)).collect();
    let banks: Vec<MemoryBank> = (0..n).map(|_| filled_bank(&mut rng, 8, embed)).collect();
    let mut tape = Tape::new();
    let q_nodes = queries.iter().map(|m| tape.constant(m.clone())).collect();
    let k_nodes = keys.iter().map(|m| tape.constant(m.clone())).collect();
    let state = BatchState::new(&mut tape, ids, q_nodes, Vec::new(), k_nodes).unwrap();
    let nodes = ekem_loss(&mut tape, &state, &banks, tau, 0).unwrap();
    let mut expected_total = None;
    for u in 0..n {
        let l = info_nce(&queries[u], &keys[u], &banks[u], tau).unwrap();
        let mut per = l;
        for _ in 1..n - 1 {
            per += l;
        }
        assert_eq!(tape.value(nodes.per_modality[u]).item(), per);
        expected_total = Some(match expected_total {
            None => per,
            Some(t) => t + per,
        });
    }
    assert_eq!(tape.value(nodes.total).item(), expected_total.unwrap());

    // A bank of one makes the distillation numerator equal the denominator.
    let z_t = unit_rows(&mut rng, 3, 12);
    let z_u = vec![unit_rows(&mut rng, 3, 12)];
    let single = filled_bank(&mut rng, 1, 12);
    assert_eq!(distill_loss(&z_t, &z_u, &single, 3, tau, false).unwrap(), 0.0);

    println!(
        "criterion 07 PASS: single-modality exchange = InfoNCE, unmined pair objective = \
         summed InfoNCE, bank-of-one distillation = 0, all exact"
    );
}

// --- criterion 8: bank and momentum invariants ------------------------------

#[test]
fn criterion_08_bank_momentum_freeze() {
    // FIFO eviction, exact order.
    let mut bank = MemoryBank::new(4, 2).unwrap();
    for i in 0..6u64 {
        let angle = i as f64;
        bank.push(&[angle.cos(), angle.sin()], i).unwrap();
    }
    assert_eq!(bank.ids(), vec![2, 3, 4, 5]);
    let rows = bank.as_matrix();
    for (r, i) in (2u64..6).enumerate() {
        let angle = i as f64;
        assert_eq!(rows.row(r), &[angle.cos(), angle.sin()]);
    }

    // k-step momentum closed form.
    let arch = EncoderArch {
        input_width: 6,
        hidden_width: 5,
        feature_width: 4,
        embed_width: 3,
        group_width: 3,
        aux_width: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut stack = EncoderStack::init(ModalityKind::Joint, arch.clone(), &mut rng);
    let other = EncoderStack::init(ModalityKind::Joint, arch, &mut rng);
    stack.query = other.query.clone();
    let key0 = stack.key.clone();
    let m: f64 = 0.9;
    let k = 25;
    for _ in 0..k {
        stack.momentum_update(m);
    }
    let mk = m.powi(k);
    for (b_new, (b_init, b_query)) in stack
        .key
        .blocks()
        .iter()
        .zip(key0.blocks().iter().zip(stack.query.blocks()))
    {
        for (idx, &got) in b_new.value.as_slice().iter().enumerate() {
            let want = mk * b_init.value.as_slice()[idx] + (1.0 - mk) * b_query.value.as_slice()[idx];
            assert!(
                rel_err(got, want).min((got - want).abs()) <= 1e-10,
                "momentum closed form drifted: {got} vs {want}"
            );
        }
    }

    // Frozen key parameters are bit-identical across the exchange stage. The
    // learning-rate drop is pinned inside stage 1 so both runs share the
    // stage-1 trajectory exactly.
    let spec = SyntheticSpec {
        samples_per_class: 4,
        ..SyntheticSpec::default()
    };
    let data: Vec<SkeletonSequence> = generate_synthetic(&spec)
        .unwrap()
        .into_iter()
        .map(|s| s.sequence)
        .collect();
    let topo = default_topology();
    let stage1_only = TrainConfig {
        stage1_epochs: 2,
        stage2_epochs: 0,
        batch_size: 4,
        bank_capacity: 16,
        hidden_width: 8,
        feature_width: 12,
        embed_width: 6,
        key_momentum: 0.9,
        lr_drop_epoch: Some(2),
        ..TrainConfig::default()
    };
    let with_stage2 = TrainConfig {
        stage2_epochs: 2,
        ..stage1_only.clone()
    };
    let a = pretrain(&data, &topo, &stage1_only, None).unwrap();
    let b = pretrain(&data, &topo, &with_stage2, None).unwrap();
    for (sa, sb) in a.stacks.iter().zip(&b.stacks) {
        if stage1_only.freeze_high_perf.contains(&sa.kind) {
            assert_eq!(sa.key, sb.key, "{} frozen key moved during stage 2", sa.kind);
        } else {
            assert_ne!(sa.key, sb.key, "{} unfrozen key never moved", sa.kind);
        }
    }

    // A frozen teacher is bit-identical across distillation.
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let arch = EncoderArch {
        input_width: 3 * topo.joint_count(),
        hidden_width: 6,
        feature_width: 8,
        embed_width: 4,
        group_width: 24,
        aux_width: 0,
    };
    let teacher = Checkpoint {
        label: "pretrain".into(),
        epoch: 0,
        stacks: ModalityKind::ALL
            .iter()
            .map(|&kind| EncoderStack::init(kind, arch.clone(), &mut rng))
            .collect(),
    };
    let before = teacher.stacks.clone();
    let config = DistillConfig {
        epochs: 1,
        batch_size: 4,
        hidden_width: 6,
        feature_width: 8,
        embed_width: 4,
        ..DistillConfig::default()
    };
    distill_train(&teacher, &data[..8], &topo, &config, None).unwrap();
    assert_eq!(teacher.stacks, before);

    println!(
        "criterion 08 PASS: FIFO order exact, 25-step momentum matches the closed form, \
         frozen keys and frozen teacher stay bit-identical"
    );
}

// --- criteria 9 and 10: committed desk-scale end-to-end ---------------------

#[test]
fn criterion_09_toy_end_to_end() {
    let run = toy();
    assert!(
        run.teacher_fused >= 0.90,
        "six-modality fused top-1 {:.4} below 0.90",
        run.teacher_fused
    );
    assert!(
        run.baseline_fused <= run.teacher_fused,
        "three-modality baseline {:.4} beats the six-modality ensemble {:.4}",
        run.baseline_fused,
        run.teacher_fused
    );
    assert!(
        run.pretrain_elapsed < Duration::from_secs(600),
        "pretraining legs took {:?}",
        run.pretrain_elapsed
    );
    println!(
        "criterion 09 PASS: six-modality fused top-1 {:.4} >= 0.90, three-modality \
         baseline {:.4} <= it ({:?})",
        run.teacher_fused, run.baseline_fused, run.pretrain_elapsed
    );
}

#[test]
fn criterion_10_distillation_efficacy() {
    let run = toy();
    assert!(run.teacher_untouched, "teacher parameters changed during distillation");
    assert!(
        run.student_fused >= run.teacher_fused - 0.05,
        "student fused top-1 {:.4} more than 5 points under the teacher {:.4}",
        run.student_fused,
        run.teacher_fused
    );
    assert!(
        run.student_fused > run.baseline_fused,
        "student fused top-1 {:.4} does not beat the undistilled baseline {:.4}",
        run.student_fused,
        run.baseline_fused
    );
    assert!(
        run.distill_elapsed < Duration::from_secs(600),
        "distillation leg took {:?}",
        run.distill_elapsed
    );
    println!(
        "criterion 10 PASS: distilled student fused top-1 {:.4} within 5 points of the \
         teacher {:.4} and above the baseline {:.4} ({:?})",
        run.student_fused, run.teacher_fused, run.baseline_fused, run.distill_elapsed
    );
}

// --- criterion 11: determinism ----------------------------------------------

#[test]
fn criterion_11_deterministic_metrics() {
    let run = toy();
    assert!(
        !run.pretrain_csv.0.is_empty(),
        "pretraining metrics CSV is empty"
    );
    assert_eq!(
        run.pretrain_csv.0, run.pretrain_csv.1,
        "identical pretraining runs wrote different metrics CSVs"
    );
    assert!(!run.distill_csv.0.is_empty(), "distillation metrics CSV is empty");
    assert_eq!(
        run.distill_csv.0, run.distill_csv.1,
        "identical distillation runs wrote different metrics CSVs"
    );
    println!(
        "criterion 11 PASS: repeated runs with the same config and seed write \
         byte-identical metrics CSVs ({} and {} bytes)",
        run.pretrain_csv.0.len(),
        run.distill_csv.0.len()
    );
}
