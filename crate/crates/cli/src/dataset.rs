//! Manifest-driven dataset loading. File parsing is pure per file, so it
//! fans out over a worker pool; results keep manifest order regardless of
//! worker count.

use std::path::Path;

use kinemod::data::manifest::DatasetManifest;
use kinemod::data::ntu::parse_skeleton_file;
use kinemod::error::{Error, Result};
use kinemod::skeleton::{SkeletonSequence, SkeletonTopology};
use kinemod::tensor::Tensor3;

use crate::config::RunConfig;

/// Sequences in manifest order plus the manifest itself (for splits).
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub ids: Vec<String>,
    pub sequences: Vec<SkeletonSequence>,
}

impl LoadedDataset {
    /// Sequences for the given manifest ids, in the given order.
    pub fn select(&self, ids: &[String]) -> Result<Vec<SkeletonSequence>> {
        ids.iter()
            .map(|id| {
                self.ids
                    .iter()
                    .position(|have| have == id)
                    .map(|at| self.sequences[at].clone())
                    .ok_or_else(|| Error::Data(format!("split names unknown sample '{id}'")))
            })
            .collect()
    }
}

/// Apply `f` to every item on up to `workers` threads, returning results in
/// input order.
pub fn parallel_map<I, T, F>(items: &[I], workers: usize, f: F) -> Vec<Result<T>>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> Result<T> + Sync,
{
    if items.is_empty() {
        return Vec::new();
    }
    let workers = workers.max(1).min(items.len());
    let chunk = items.len().div_ceil(workers);
    let mut results: Vec<Option<Result<T>>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (w, slots) in results.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (k, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(f(&items[w * chunk + k]));
                }
            });
        }
    });
    results.into_iter().map(Option::unwrap).collect()
}

/// Zero-pad a sequence to `bodies` body slots so mixed single- and
/// multi-body files share one tensor width.
fn pad_bodies(seq: &SkeletonSequence, bodies: usize) -> Result<SkeletonSequence> {
    if seq.bodies() == bodies {
        return Ok(seq.clone());
    }
    let data = seq.data();
    let per_body = seq.joints_per_body();
    let mut padded = Tensor3::zeros(3, data.frames(), bodies * per_body);
    for t in 0..data.frames() {
        for v in 0..data.joints() {
            padded.set_vec3(t, v, data.vec3(t, v));
        }
    }
    SkeletonSequence::new(padded, bodies, seq.original_frames(), seq.label())
}

/// Read the manifest and parse every referenced file, attaching labels.
/// Parse failures are reported per file before the load fails as a whole.
pub fn load_with_topology(
    config: &RunConfig,
    workers: usize,
    topo: &SkeletonTopology,
) -> Result<LoadedDataset> {
    let manifest_path = &config.dataset.manifest;
    if !manifest_path.is_file() {
        return Err(Error::Config(format!(
            "dataset manifest {} does not exist",
            manifest_path.display()
        )));
    }
    let manifest = DatasetManifest::read_csv(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let joints = topo.joint_count();
    let max_bodies = config.dataset.max_bodies;

    let parsed = parallel_map(&manifest.records, workers, |record| {
        let path = base.join(&record.path);
        parse_skeleton_file(&path, joints, max_bodies)
            .map(|seq| seq.with_label(Some(record.label)))
    });

    let mut failures = 0;
    let mut first_error = None;
    let mut sequences = Vec::with_capacity(parsed.len());
    for (record, result) in manifest.records.iter().zip(parsed) {
        match result {
            Ok(seq) => sequences.push(seq),
            Err(e) => {
                failures += 1;
                eprintln!("sample '{}': {e}", record.id);
                if first_error.is_none() {
                    first_error = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_error {
        return if failures == 1 {
            Err(e)
        } else {
            Err(Error::Data(format!(
                "{failures} of {} samples failed to load; first failure: {e}",
                manifest.records.len()
            )))
        };
    }

    let widest = sequences.iter().map(SkeletonSequence::bodies).max().unwrap_or(1);
    let sequences = sequences
        .iter()
        .map(|seq| pad_bodies(seq, widest))
        .collect::<Result<Vec<_>>>()?;
    let ids = manifest.records.iter().map(|r| r.id.clone()).collect();
    Ok(LoadedDataset {
        manifest,
        ids,
        sequences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_input_order_for_any_worker_count() {
        let items: Vec<usize> = (0..17).collect();
        for workers in [1, 3, 8, 32] {
            let out = parallel_map(&items, workers, |&x| Ok(x * 2));
            let values: Vec<usize> = out.into_iter().map(|r| r.unwrap()).collect();
            assert_eq!(values, (0..17).map(|x| x * 2).collect::<Vec<_>>());
        }
    }

    #[test]
    fn parallel_map_surfaces_errors_at_their_index() {
        let items = vec![1usize, 2, 3];
        let out = parallel_map(&items, 2, |&x| {
            if x == 2 {
                Err(Error::Data("boom".into()))
            } else {
                Ok(x)
            }
        });
        assert!(out[0].is_ok());
        assert!(out[1].is_err());
        assert!(out[2].is_ok());
    }
}
