//! The six pipeline commands. Each validates its prerequisites up front,
//! records the resolved config and its hash beside the artifacts, and writes
//! outputs whose bytes depend only on config and seed.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use kinemod::data::manifest::{split_dataset, DatasetManifest, ManifestRecord};
use kinemod::data::ntu::write_skeleton_file;
use kinemod::data::synthetic::generate_synthetic;
use kinemod::distill::distill_train;
use kinemod::encoder::GradCheckConfig;
use kinemod::engine::gradcheck::gradient_suite;
use kinemod::engine::train::{pretrain, Checkpoint};
use kinemod::error::{Error, Result};
use kinemod::eval::{evaluate, write_confusion_csv, write_report_json};
use kinemod::modality::{derive_all, write_modality_blob, ModalityTensor};
use kinemod::skeleton::{resize_sequence, RESIZE_FRAMES};

use crate::config::RunConfig;
use crate::dataset::{load_with_topology, parallel_map};

fn require_file(path: &Path, role: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{role} {} does not exist",
            path.display()
        )))
    }
}

/// Synthesize the configured dataset: one capture file per sample plus the
/// manifest, under the manifest's directory.
pub fn cmd_generate(config: &RunConfig) -> Result<()> {
    let samples = generate_synthetic(&config.synthetic)?;
    let manifest_path = &config.dataset.manifest;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;

    let mut records = Vec::with_capacity(samples.len());
    for sample in &samples {
        let file = format!("{}.skeleton", sample.id);
        write_skeleton_file(&dir.join(&file), &sample.sequence)?;
        let label = sample.sequence.label().ok_or_else(|| {
            Error::Data(format!("generated sample '{}' carries no label", sample.id))
        })?;
        records.push(ManifestRecord {
            id: sample.id.clone(),
            path: file,
            label,
            subject: Some(sample.subject),
            camera: Some(sample.camera),
        });
    }
    let manifest = DatasetManifest::new(records)?;
    manifest.write_csv(manifest_path)?;
    config.record(&config.out_dir())?;
    println!(
        "generated {} samples under {}",
        samples.len(),
        manifest_path.display()
    );
    Ok(())
}

fn tensor_stats(modality: &ModalityTensor) -> (f64, f64, f64, f64) {
    let slice = modality.data.as_slice();
    let n = slice.len() as f64;
    let mean = slice.iter().sum::<f64>() / n;
    let var = slice.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let min = slice.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (mean, var.sqrt(), min, max)
}

/// Derive all six modalities for every sample; write one blob per sample and
/// a per-modality statistics summary.
pub fn cmd_derive(config: &RunConfig, workers: usize) -> Result<()> {
    let topo = config.dataset.load_topology()?;
    let dataset = load_with_topology(config, workers, &topo)?;
    let out = config.out_dir().join("derive");
    fs::create_dir_all(&out)?;

    let derived = parallel_map(&dataset.sequences, workers, |seq| {
        let resized = resize_sequence(seq, RESIZE_FRAMES)?;
        let modalities = derive_all(&resized, &topo)?;
        let mut blob = Vec::new();
        write_modality_blob(&mut blob, &modalities)?;
        let stats: Vec<(String, (f64, f64, f64, f64))> = modalities
            .iter()
            .map(|m| (m.kind.name().to_string(), tensor_stats(m)))
            .collect();
        Ok((blob, stats))
    });

    let mut summary = String::from("sample_id,modality,mean,std,min,max\n");
    for (id, result) in dataset.ids.iter().zip(derived) {
        let (blob, stats) = result.map_err(|e| {
            eprintln!("sample '{id}': {e}");
            e
        })?;
        fs::write(out.join(format!("{id}.modalities.bin")), blob)?;
        for (name, (mean, std, min, max)) in stats {
            summary.push_str(&format!("{id},{name},{mean},{std},{min},{max}\n"));
        }
    }
    fs::write(out.join("summary.csv"), summary)?;
    config.record(&config.out_dir())?;
    println!(
        "derived {} samples into {}",
        dataset.ids.len(),
        out.display()
    );
    Ok(())
}

/// Two-stage self-supervised pretraining over the configured dataset.
pub fn cmd_pretrain(config: &RunConfig, workers: usize) -> Result<()> {
    let topo = config.dataset.load_topology()?;
    let dataset = load_with_topology(config, workers, &topo)?;
    let out = config.out_dir();
    config.record(&out)?;
    let output = pretrain(&dataset.sequences, &topo, &config.train, Some(&out))?;
    if let Some(last) = output.metrics.last() {
        println!(
            "pretrained {} stacks for {} epochs (final loss {:.4})",
            output.stacks.len(),
            last.epoch + 1,
            last.loss
        );
    }
    println!("checkpoint: {}", out.join("pretrain.ckpt").display());
    Ok(())
}

/// Distill the frozen teacher checkpoint into a fresh student.
pub fn cmd_distill(config: &RunConfig, workers: usize) -> Result<()> {
    let teacher_path = config.teacher_checkpoint();
    require_file(&teacher_path, "teacher checkpoint")?;
    let teacher = Checkpoint::load(&teacher_path)?;
    let topo = config.dataset.load_topology()?;
    let dataset = load_with_topology(config, workers, &topo)?;
    let out = config.out_dir();
    config.record(&out)?;
    let output = distill_train(&teacher, &dataset.sequences, &topo, &config.distill, Some(&out))?;
    if let Some(last) = output.metrics.last() {
        println!(
            "distilled {} student stacks (final loss {:.4}, teacher-student cosine {:.4})",
            output.stacks.len(),
            last.loss,
            last.mean_cos_t_s
        );
    }
    println!("checkpoint: {}", out.join("student.ckpt").display());
    Ok(())
}

/// Linear evaluation of a checkpoint over the configured split: per-stream
/// probes, score fusion, and retrieval precision.
pub fn cmd_eval(config: &RunConfig, workers: usize) -> Result<()> {
    let ckpt_path = config.eval_checkpoint();
    require_file(&ckpt_path, "evaluation checkpoint")?;
    let checkpoint = Checkpoint::load(&ckpt_path)?;
    let topo = config.dataset.load_topology()?;
    let dataset = load_with_topology(config, workers, &topo)?;

    let (train_ids, eval_ids) =
        split_dataset(&dataset.manifest, &config.dataset.split, config.eval.seed)?;
    let train_set = dataset.select(&train_ids)?;
    let eval_set = dataset.select(&eval_ids)?;
    drop(dataset);
    let knn = if config.eval.knn_k > 0 {
        Some(config.eval.knn_k)
    } else {
        None
    };
    let report = evaluate(
        &checkpoint.stacks,
        &train_set,
        &eval_set,
        &topo,
        &config.eval,
        true,
        knn,
    )?;

    let out = config.out_dir();
    config.record(&out)?;
    write_report_json(&out.join("eval_report.json"), &report)?;
    write_confusion_csv(&out.join("eval_confusion.csv"), &report.confusion)?;

    for (name, acc) in &report.per_modality_top1 {
        println!("top-1 {name}: {acc:.4}");
    }
    if let Some(fused) = report.fused_top1 {
        println!(
            "fused top-1 ({}s): {fused:.4}",
            report.per_modality_top1.len()
        );
    }
    for (name, p) in &report.precision_at_k {
        println!("precision@{} {name}: {p:.4}", config.eval.knn_k);
    }
    println!("report: {}", out.join("eval_report.json").display());
    Ok(())
}

/// Finite-difference verification of the four training objectives through a
/// live encoder. Exits nonzero when any gradient breaches the tolerance.
pub fn cmd_gradcheck(config: &RunConfig) -> Result<()> {
    let check = GradCheckConfig::default();
    let outcomes = gradient_suite(config.train.seed, &check)?;
    let mut stdout = std::io::stdout().lock();
    for o in &outcomes {
        writeln!(
            stdout,
            "gradcheck {}: {} coordinates, max rel err {:.3e}",
            o.loss, o.report.checked, o.report.max_rel_err
        )?;
    }
    writeln!(
        stdout,
        "all {} objectives verified at tolerance {:.0e}",
        outcomes.len(),
        check.tolerance
    )?;
    Ok(())
}
