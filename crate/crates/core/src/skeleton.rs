//! Skeleton sequence data, bone/hinge topology, and temporal resampling.
//!
//! A sequence is a `[3][T][V]` coordinate tensor plus the frame count it had
//! before resampling. That original count is what the time scale is computed
//! from, so it travels with the sequence through every transform.

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Canonical frame count every sequence is resampled to before derivation.
pub const RESIZE_FRAMES: usize = 50;

/// A 3-D skeleton sequence.
///
/// `data` is `[3][T][bodies * joints_per_body]`: two-body samples stack the
/// second actor along the joint axis, and an absent body is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    data: Tensor3,
    bodies: usize,
    joints_per_body: usize,
    original_frames: usize,
    label: Option<u32>,
}

impl SkeletonSequence {
    pub fn new(
        data: Tensor3,
        bodies: usize,
        original_frames: usize,
        label: Option<u32>,
    ) -> Result<Self> {
        if data.channels() != 3 {
            return Err(Error::Shape(format!(
                "sequence must have 3 coordinate channels, got {}",
                data.channels()
            )));
        }
        if bodies == 0 || data.joints() % bodies != 0 {
            return Err(Error::Shape(format!(
                "joint axis {} not divisible into {} bodies",
                data.joints(),
                bodies
            )));
        }
        if data.frames() == 0 || data.joints() == 0 {
            return Err(Error::Shape("empty sequence".into()));
        }
        if original_frames < 2 {
            return Err(Error::Data(format!(
                "original_frames must be at least 2, got {original_frames}"
            )));
        }
        if !data.is_finite() {
            return Err(Error::Numeric("non-finite coordinate in sequence".into()));
        }
        let joints_per_body = data.joints() / bodies;
        Ok(SkeletonSequence {
            data,
            bodies,
            joints_per_body,
            original_frames,
            label,
        })
    }

    /// Single-body constructor with `original_frames` taken from the tensor.
    pub fn from_tensor(data: Tensor3, label: Option<u32>) -> Result<Self> {
        let frames = data.frames();
        Self::new(data, 1, frames, label)
    }

    pub fn data(&self) -> &Tensor3 {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.data.frames()
    }

    /// Total joint-axis width (`bodies * joints_per_body`).
    pub fn joints(&self) -> usize {
        self.data.joints()
    }

    pub fn bodies(&self) -> usize {
        self.bodies
    }

    pub fn joints_per_body(&self) -> usize {
        self.joints_per_body
    }

    pub fn original_frames(&self) -> usize {
        self.original_frames
    }

    pub fn label(&self) -> Option<u32> {
        self.label
    }

    pub fn with_label(mut self, label: Option<u32>) -> Self {
        self.label = label;
        self
    }

    /// Replace coordinate data, keeping bodies/original_frames bookkeeping.
    pub(crate) fn with_data(&self, data: Tensor3) -> Result<Self> {
        SkeletonSequence::new(data, self.bodies, self.original_frames, self.label)
    }
}

/// Time scale `gamma = original_frames / 50`, converting per-frame differences
/// of a resampled sequence into rates on the original time axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeScale {
    gamma: f64,
}

impl TimeScale {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::Data(format!("time scale must be positive, got {gamma}")));
        }
        Ok(TimeScale { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// gamma = original_frames / 50. Not clamped: sequences shorter than 50
/// frames yield gamma < 1.
pub fn time_scale(seq: &SkeletonSequence) -> Result<TimeScale> {
    TimeScale::new(seq.original_frames() as f64 / RESIZE_FRAMES as f64)
}

/// Resample a sequence to `target_frames` by per-coordinate linear
/// interpolation with both endpoints anchored: output frame `t` samples the
/// input at `t * (T_in - 1) / (T_out - 1)`.
///
/// `original_frames` is preserved unchanged for later time-scale computation.
pub fn resize_sequence(seq: &SkeletonSequence, target_frames: usize) -> Result<SkeletonSequence> {
    let t_in = seq.frames();
    if t_in < 2 {
        return Err(Error::Data(format!(
            "cannot resample a sequence with {t_in} frame(s); need at least 2"
        )));
    }
    if target_frames < 2 {
        return Err(Error::Data(format!(
            "resample target must be at least 2 frames, got {target_frames}"
        )));
    }
    if !seq.data().is_finite() {
        return Err(Error::Numeric("non-finite coordinate in resample input".into()));
    }

    let src = seq.data();
    let mut out = Tensor3::zeros(3, target_frames, src.joints());
    let scale = (t_in - 1) as f64 / (target_frames - 1) as f64;
    for t_out in 0..target_frames {
        let pos = t_out as f64 * scale;
        let lo = (pos.floor() as usize).min(t_in - 1);
        let hi = (lo + 1).min(t_in - 1);
        let frac = pos - lo as f64;
        for c in 0..3 {
            for v in 0..src.joints() {
                let a = src.get(c, lo, v);
                let b = src.get(c, hi, v);
                let mut val = a + frac * (b - a);
                // Interpolated values stay within their bracketing frames even
                // under rounding.
                let (min, max) = if a <= b { (a, b) } else { (b, a) };
                if val < min {
                    val = min;
                } else if val > max {
                    val = max;
                }
                out.set(c, t_out, v, val);
            }
        }
    }
    seq.with_data(out)
}

/// One hinge: a joint plus the two incident bones whose cross product gives
/// its rotation axis. Bone indices point into the topology's bone list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HingeDef {
    pub joint: usize,
    pub bone_i: usize,
    pub bone_j: usize,
}

/// Bone tree plus per-joint hinge definitions.
///
/// Bones are `(child, parent)` joint pairs forming a tree rooted at `root`.
/// The derived bone tensor stores bone `k`'s vector at the channel of its
/// child joint; the root joint's channel stays zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    joint_count: usize,
    root: usize,
    bone_pairs: Vec<(usize, usize)>,
    hinges: Vec<HingeDef>,
}

impl SkeletonTopology {
    pub fn new(
        joint_count: usize,
        root: usize,
        bone_pairs: Vec<(usize, usize)>,
        hinges: Vec<HingeDef>,
    ) -> Result<Self> {
        validate_tree(joint_count, root, &bone_pairs)?;
        if hinges.len() != joint_count {
            return Err(Error::Data(format!(
                "expected one hinge per joint ({joint_count}), got {}",
                hinges.len()
            )));
        }
        let mut seen = vec![false; joint_count];
        for h in &hinges {
            if h.joint >= joint_count {
                return Err(Error::Data(format!("hinge joint {} out of range", h.joint)));
            }
            if seen[h.joint] {
                return Err(Error::Data(format!("duplicate hinge for joint {}", h.joint)));
            }
            seen[h.joint] = true;
            if h.bone_i >= bone_pairs.len() || h.bone_j >= bone_pairs.len() {
                return Err(Error::Data(format!(
                    "hinge for joint {} references bone out of range",
                    h.joint
                )));
            }
            if h.bone_i == h.bone_j {
                return Err(Error::Data(format!(
                    "hinge for joint {} references the same bone twice",
                    h.joint
                )));
            }
        }
        Ok(SkeletonTopology {
            joint_count,
            root,
            bone_pairs,
            hinges,
        })
    }

    /// Build a topology from the bone tree alone, deriving hinges by rule:
    /// an inner joint pairs its parent bone with its first child bone, a leaf
    /// reuses its parent's bone pair, and the root pairs its first two child
    /// bones.
    pub fn from_bones(
        joint_count: usize,
        root: usize,
        bone_pairs: Vec<(usize, usize)>,
    ) -> Result<Self> {
        validate_tree(joint_count, root, &bone_pairs)?;
        let hinges = derive_hinges(joint_count, root, &bone_pairs)?;
        SkeletonTopology::new(joint_count, root, bone_pairs, hinges)
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn bone_pairs(&self) -> &[(usize, usize)] {
        &self.bone_pairs
    }

    pub fn hinges(&self) -> &[HingeDef] {
        &self.hinges
    }

    /// Child joint whose tensor channel stores bone `k`.
    pub fn bone_child(&self, k: usize) -> usize {
        self.bone_pairs[k].0
    }
}

fn validate_tree(joint_count: usize, root: usize, bone_pairs: &[(usize, usize)]) -> Result<()> {
    if joint_count == 0 {
        return Err(Error::Data("topology needs at least one joint".into()));
    }
    if root >= joint_count {
        return Err(Error::Data(format!("root joint {root} out of range")));
    }
    if bone_pairs.len() != joint_count - 1 {
        return Err(Error::Data(format!(
            "a tree over {joint_count} joints needs {} bones, got {}",
            joint_count - 1,
            bone_pairs.len()
        )));
    }
    let mut parent = vec![usize::MAX; joint_count];
    for &(child, par) in bone_pairs {
        if child >= joint_count || par >= joint_count {
            return Err(Error::Data(format!("bone ({child}, {par}) out of range")));
        }
        if child == root {
            return Err(Error::Data("root joint cannot be a bone child".into()));
        }
        if parent[child] != usize::MAX {
            return Err(Error::Data(format!("joint {child} has two parents")));
        }
        parent[child] = par;
    }
    // Every non-root joint must reach the root without cycles.
    for start in 0..joint_count {
        let mut v = start;
        let mut steps = 0;
        while v != root {
            v = parent[v];
            steps += 1;
            if v == usize::MAX || steps > joint_count {
                return Err(Error::Data(format!(
                    "joint {start} is not connected to root {root}"
                )));
            }
        }
    }
    Ok(())
}

fn derive_hinges(
    joint_count: usize,
    root: usize,
    bone_pairs: &[(usize, usize)],
) -> Result<Vec<HingeDef>> {
    let mut bone_of_child = vec![usize::MAX; joint_count];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); joint_count];
    for (k, &(child, par)) in bone_pairs.iter().enumerate() {
        bone_of_child[child] = k;
        children[par].push(child);
    }
    let mut parent = vec![usize::MAX; joint_count];
    for &(child, par) in bone_pairs {
        parent[child] = par;
    }

    let mut hinges = Vec::with_capacity(joint_count);
    for v in 0..joint_count {
        let (bone_i, bone_j) = if v == root {
            if children[v].len() < 2 {
                return Err(Error::Data(
                    "hinge rule needs at least two root child bones".into(),
                ));
            }
            (bone_of_child[children[v][0]], bone_of_child[children[v][1]])
        } else if let Some(&first_child) = children[v].first() {
            (bone_of_child[v], bone_of_child[first_child])
        } else {
            // Leaf: reuse the parent's bone together with our own.
            let p = parent[v];
            if p == root {
                return Err(Error::Data(format!(
                    "hinge rule undefined for leaf joint {v} attached to the root"
                )));
            }
            (bone_of_child[p], bone_of_child[v])
        };
        hinges.push(HingeDef {
            joint: v,
            bone_i,
            bone_j,
        });
    }
    Ok(hinges)
}

const NTU25_TOPOLOGY: &str = include_str!("../data/ntu25.topology");

/// The 25-joint NTU-RGB+D topology shipped with the crate.
pub fn default_topology() -> SkeletonTopology {
    parse_topology_str(NTU25_TOPOLOGY, "<builtin ntu25>")
        .expect("builtin 25-joint topology is valid")
}

/// A 5-joint chain rooted at the middle joint, for tests and toy runs.
pub fn toy_topology() -> SkeletonTopology {
    SkeletonTopology::from_bones(5, 2, vec![(1, 2), (0, 1), (3, 2), (4, 3)])
        .expect("builtin toy topology is valid")
}

/// Parse a topology file: `JOINTS n`, `ROOT r`, then `BONES` records
/// (`childIdx parentIdx`) and `HINGES` records (`jointIdx boneIdxI boneIdxJ`),
/// one per line, with `#` comments.
pub fn load_topology(path: &std::path::Path) -> Result<SkeletonTopology> {
    let text = std::fs::read_to_string(path)?;
    parse_topology_str(&text, &path.display().to_string())
}

pub fn parse_topology_str(text: &str, path: &str) -> Result<SkeletonTopology> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_string(),
        line,
        msg,
    };
    let mut joints: Option<usize> = None;
    let mut root: Option<usize> = None;
    let mut bones: Vec<(usize, usize)> = Vec::new();
    let mut hinges: Vec<HingeDef> = Vec::new();

    #[derive(PartialEq)]
    enum Section {
        Prelude,
        Bones,
        Hinges,
    }
    let mut section = Section::Prelude;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[0] {
            "JOINTS" => {
                let n = fields
                    .get(1)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| err(lineno, "JOINTS needs a count".into()))?;
                joints = Some(n);
            }
            "ROOT" => {
                let r = fields
                    .get(1)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| err(lineno, "ROOT needs a joint index".into()))?;
                root = Some(r);
            }
            "BONES" => section = Section::Bones,
            "HINGES" => section = Section::Hinges,
            _ => {
                let nums: Vec<usize> = fields
                    .iter()
                    .map(|f| f.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| err(lineno, format!("non-numeric field in '{line}'")))?;
                match section {
                    Section::Bones if nums.len() == 2 => bones.push((nums[0], nums[1])),
                    Section::Hinges if nums.len() == 3 => hinges.push(HingeDef {
                        joint: nums[0],
                        bone_i: nums[1],
                        bone_j: nums[2],
                    }),
                    Section::Prelude => {
                        return Err(err(lineno, "record before BONES/HINGES section".into()))
                    }
                    _ => return Err(err(lineno, format!("malformed record '{line}'"))),
                }
            }
        }
    }

    let joints = joints.ok_or_else(|| err(0, "missing JOINTS line".into()))?;
    let root = root.ok_or_else(|| err(0, "missing ROOT line".into()))?;
    if hinges.is_empty() {
        SkeletonTopology::from_bones(joints, root, bones)
    } else {
        SkeletonTopology::new(joints, root, bones, hinges)
    }
}
