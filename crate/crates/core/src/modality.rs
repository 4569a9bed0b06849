//! The six modality derivations over a resampled skeleton sequence.
//!
//! Temporal-difference modalities zero-pad the frames where the difference is
//! undefined (motion frame 0, acceleration frames 0 and T-1, angular velocity
//! frame T-1) so every tensor keeps the `[3][T][V]` shape of its source.
//! Degenerate geometry (zero or parallel bones) maps to zero axes and zero
//! angles instead of NaN.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::skeleton::{SkeletonSequence, SkeletonTopology, TimeScale};
use crate::tensor::{cross3, dot3, norm3, Tensor3};

/// Norm threshold below which bones count as degenerate.
pub const DEGENERATE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    Joint,
    Motion,
    Bone,
    Acceleration,
    RotationAxis,
    AngularVelocity,
}

impl ModalityKind {
    /// Fixed derivation (and serialization) order.
    pub const ALL: [ModalityKind; 6] = [
        ModalityKind::Joint,
        ModalityKind::Motion,
        ModalityKind::Bone,
        ModalityKind::Acceleration,
        ModalityKind::RotationAxis,
        ModalityKind::AngularVelocity,
    ];

    /// The three fundamental modalities used by the student model.
    pub const FUNDAMENTAL: [ModalityKind; 3] =
        [ModalityKind::Joint, ModalityKind::Motion, ModalityKind::Bone];

    pub fn name(&self) -> &'static str {
        match self {
            ModalityKind::Joint => "joint",
            ModalityKind::Motion => "motion",
            ModalityKind::Bone => "bone",
            ModalityKind::Acceleration => "acceleration",
            ModalityKind::RotationAxis => "rotation_axis",
            ModalityKind::AngularVelocity => "angular_velocity",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        ModalityKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown modality '{name}'")))
    }
}

impl std::fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One derived representation stream, same `[3][T][V]` shape as its source.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityTensor {
    pub kind: ModalityKind,
    pub data: Tensor3,
}

/// Per-hinge joint angles in radians, `[T][V]`, each in `[0, pi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointAngleTrack {
    frames: usize,
    joints: usize,
    theta: Vec<f64>,
}

impl JointAngleTrack {
    fn zeros(frames: usize, joints: usize) -> Self {
        JointAngleTrack {
            frames,
            joints,
            theta: vec![0.0; frames * joints],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn get(&self, t: usize, v: usize) -> f64 {
        self.theta[t * self.joints + v]
    }

    fn set(&mut self, t: usize, v: usize, value: f64) {
        self.theta[t * self.joints + v] = value;
    }
}

/// Identity copy of the joint positions.
pub fn derive_joint(seq: &SkeletonSequence) -> ModalityTensor {
    ModalityTensor {
        kind: ModalityKind::Joint,
        data: seq.data().clone(),
    }
}

/// Temporal displacement: `m[:,t+1,:] = x[:,t+1,:] - x[:,t,:]`, frame 0 zero.
pub fn derive_motion(seq: &SkeletonSequence) -> Result<ModalityTensor> {
    let x = seq.data();
    let (frames, joints) = (x.frames(), x.joints());
    if frames < 2 {
        return Err(Error::Data(format!(
            "motion needs at least 2 frames, got {frames}"
        )));
    }
    let mut m = Tensor3::zeros(3, frames, joints);
    for c in 0..3 {
        for t in 0..frames - 1 {
            for v in 0..joints {
                m.set(c, t + 1, v, x.get(c, t + 1, v) - x.get(c, t, v));
            }
        }
    }
    Ok(ModalityTensor {
        kind: ModalityKind::Motion,
        data: m,
    })
}

/// Acceleration `a[:,t,:] = (m[:,t+1,:]/gamma - m[:,t,:]/gamma) / gamma` on
/// the interior frames; frames 0 and T-1 stay zero.
pub fn derive_acceleration(seq: &SkeletonSequence, gamma: TimeScale) -> Result<ModalityTensor> {
    let frames = seq.frames();
    if frames < 3 {
        return Err(Error::Data(format!(
            "acceleration needs at least 3 frames, got {frames}"
        )));
    }
    let g = gamma.gamma();
    let m = derive_motion(seq)?;
    let joints = seq.joints();
    let mut a = Tensor3::zeros(3, frames, joints);
    for c in 0..3 {
        for t in 1..frames - 1 {
            for v in 0..joints {
                let dv = m.data.get(c, t + 1, v) / g - m.data.get(c, t, v) / g;
                a.set(c, t, v, dv / g);
            }
        }
    }
    Ok(ModalityTensor {
        kind: ModalityKind::Acceleration,
        data: a,
    })
}

/// Bone vectors: for each bone pair `(child, parent)`,
/// `b[:,:,child] = x[:,:,child] - x[:,:,parent]`; the root channel stays zero.
/// Multi-body sequences apply the topology to each body block.
pub fn derive_bones(seq: &SkeletonSequence, topo: &SkeletonTopology) -> Result<ModalityTensor> {
    check_topology(seq, topo)?;
    let x = seq.data();
    let mut b = Tensor3::zeros(3, x.frames(), x.joints());
    for body in 0..seq.bodies() {
        let off = body * topo.joint_count();
        for &(child, parent) in topo.bone_pairs() {
            for c in 0..3 {
                for t in 0..x.frames() {
                    b.set(
                        c,
                        t,
                        off + child,
                        x.get(c, t, off + child) - x.get(c, t, off + parent),
                    );
                }
            }
        }
    }
    Ok(ModalityTensor {
        kind: ModalityKind::Bone,
        data: b,
    })
}

/// Unit rotation-axis directions `r = (b_i x b_j) / ||b_i x b_j||` per hinge,
/// stored at the hinge's joint channel; degenerate cross products map to zero.
pub fn derive_rotation_axes(
    bones: &ModalityTensor,
    topo: &SkeletonTopology,
) -> Result<ModalityTensor> {
    let (bodies, frames) = check_bones(bones, topo)?;
    let b = &bones.data;
    let mut r = Tensor3::zeros(3, frames, b.joints());
    for body in 0..bodies {
        let off = body * topo.joint_count();
        for h in topo.hinges() {
            let vi = off + topo.bone_child(h.bone_i);
            let vj = off + topo.bone_child(h.bone_j);
            for t in 0..frames {
                let cross = cross3(b.vec3(t, vi), b.vec3(t, vj));
                let n = norm3(cross);
                if n >= DEGENERATE_EPS {
                    r.set_vec3(t, off + h.joint, [cross[0] / n, cross[1] / n, cross[2] / n]);
                }
            }
        }
    }
    Ok(ModalityTensor {
        kind: ModalityKind::RotationAxis,
        data: r,
    })
}

/// Hinge angles `theta = arccos(b_i . b_j / (||b_i|| ||b_j||))`, argument
/// clamped to `[-1, 1]`; zero when either bone is degenerate.
pub fn derive_joint_angles(
    bones: &ModalityTensor,
    topo: &SkeletonTopology,
) -> Result<JointAngleTrack> {
    let (bodies, frames) = check_bones(bones, topo)?;
    let b = &bones.data;
    let mut track = JointAngleTrack::zeros(frames, b.joints());
    for body in 0..bodies {
        let off = body * topo.joint_count();
        for h in topo.hinges() {
            let vi = off + topo.bone_child(h.bone_i);
            let vj = off + topo.bone_child(h.bone_j);
            for t in 0..frames {
                let bi = b.vec3(t, vi);
                let bj = b.vec3(t, vj);
                let (ni, nj) = (norm3(bi), norm3(bj));
                if ni < DEGENERATE_EPS || nj < DEGENERATE_EPS {
                    continue;
                }
                let cos = (dot3(bi, bj) / (ni * nj)).clamp(-1.0, 1.0);
                track.set(t, off + h.joint, cos.acos());
            }
        }
    }
    Ok(track)
}

/// Angular velocity `w[:,t,v] = r[:,t,v] * (theta[t+1,v] - theta[t,v]) / gamma`
/// for `t` in `[0, T-2]`; the last frame stays zero.
pub fn derive_angular_velocity(
    axes: &ModalityTensor,
    angles: &JointAngleTrack,
    gamma: TimeScale,
) -> Result<ModalityTensor> {
    if axes.kind != ModalityKind::RotationAxis {
        return Err(Error::Shape(format!(
            "expected rotation-axis tensor, got {}",
            axes.kind
        )));
    }
    let r = &axes.data;
    if r.frames() != angles.frames() || r.joints() != angles.joints() {
        return Err(Error::Shape(format!(
            "axes [{}x{}] and angles [{}x{}] disagree",
            r.frames(),
            r.joints(),
            angles.frames(),
            angles.joints()
        )));
    }
    let g = gamma.gamma();
    let mut w = Tensor3::zeros(3, r.frames(), r.joints());
    for t in 0..r.frames().saturating_sub(1) {
        for v in 0..r.joints() {
            let rate = (angles.get(t + 1, v) - angles.get(t, v)) / g;
            let axis = r.vec3(t, v);
            w.set_vec3(t, v, [axis[0] * rate, axis[1] * rate, axis[2] * rate]);
        }
    }
    Ok(ModalityTensor {
        kind: ModalityKind::AngularVelocity,
        data: w,
    })
}

/// All six modalities of a resampled sequence, internally consistent:
/// acceleration reuses this motion, angular velocity reuses these axes and
/// angles. Returned in `ModalityKind::ALL` order.
pub fn derive_all(
    seq: &SkeletonSequence,
    topo: &SkeletonTopology,
) -> Result<[ModalityTensor; 6]> {
    let gamma = crate::skeleton::time_scale(seq)?;
    let joint = derive_joint(seq);
    let motion = derive_motion(seq)?;
    let bones = derive_bones(seq, topo)?;
    let accel = derive_acceleration(seq, gamma)?;
    let axes = derive_rotation_axes(&bones, topo)?;
    let angles = derive_joint_angles(&bones, topo)?;
    let omega = derive_angular_velocity(&axes, &angles, gamma)?;
    Ok([joint, motion, bones, accel, axes, omega])
}

fn check_topology(seq: &SkeletonSequence, topo: &SkeletonTopology) -> Result<()> {
    if seq.joints_per_body() != topo.joint_count() {
        return Err(Error::Shape(format!(
            "sequence has {} joints per body but topology expects {}",
            seq.joints_per_body(),
            topo.joint_count()
        )));
    }
    Ok(())
}

fn check_bones(bones: &ModalityTensor, topo: &SkeletonTopology) -> Result<(usize, usize)> {
    if bones.kind != ModalityKind::Bone {
        return Err(Error::Shape(format!(
            "expected bone tensor, got {}",
            bones.kind
        )));
    }
    let joints = bones.data.joints();
    if joints % topo.joint_count() != 0 {
        return Err(Error::Shape(format!(
            "bone tensor width {} is not a multiple of topology joint count {}",
            joints,
            topo.joint_count()
        )));
    }
    Ok((joints / topo.joint_count(), bones.data.frames()))
}

const BLOB_MAGIC: &[u8; 4] = b"KMOD";
const BLOB_VERSION: u32 = 1;

/// Write a six-modality sample blob: 16-byte header (magic, version, T, V)
/// followed by little-endian f32 values in `[C][T][V]` order per modality,
/// modalities in `ModalityKind::ALL` order.
pub fn write_modality_blob<W: Write>(out: &mut W, modalities: &[ModalityTensor; 6]) -> Result<()> {
    let frames = modalities[0].data.frames() as u32;
    let joints = modalities[0].data.joints() as u32;
    for (m, kind) in modalities.iter().zip(ModalityKind::ALL) {
        if m.kind != kind {
            return Err(Error::Shape(format!(
                "modalities out of order: expected {kind}, got {}",
                m.kind
            )));
        }
        if m.data.frames() as u32 != frames || m.data.joints() as u32 != joints {
            return Err(Error::Shape("modalities disagree on shape".into()));
        }
    }
    out.write_all(BLOB_MAGIC)?;
    out.write_all(&BLOB_VERSION.to_le_bytes())?;
    out.write_all(&frames.to_le_bytes())?;
    out.write_all(&joints.to_le_bytes())?;
    for m in modalities {
        for &x in m.data.as_slice() {
            out.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a blob written by [`write_modality_blob`]. Values come back as the
/// exact f32 bits that were stored.
pub fn read_modality_blob<R: Read>(input: &mut R) -> Result<[ModalityTensor; 6]> {
    let mut header = [0u8; 16];
    input.read_exact(&mut header).map_err(|_| {
        Error::Data("modality blob truncated before header".into())
    })?;
    if &header[0..4] != BLOB_MAGIC {
        return Err(Error::Data("bad modality blob magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != BLOB_VERSION {
        return Err(Error::Data(format!("unsupported blob version {version}")));
    }
    let frames = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let joints = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let per_modality = 3 * frames * joints;
    let mut body = vec![0u8; per_modality * 6 * 4];
    input
        .read_exact(&mut body)
        .map_err(|_| Error::Data("modality blob truncated".into()))?;

    let mut out = Vec::with_capacity(6);
    for (i, kind) in ModalityKind::ALL.into_iter().enumerate() {
        let mut data = Vec::with_capacity(per_modality);
        for k in 0..per_modality {
            let o = (i * per_modality + k) * 4;
            data.push(f32::from_le_bytes(body[o..o + 4].try_into().unwrap()) as f64);
        }
        out.push(ModalityTensor {
            kind,
            data: Tensor3::from_vec(3, frames, joints, data)?,
        });
    }
    Ok(out.try_into().expect("six modalities"))
}

/// Debug CSV dump: one row per (modality, frame, joint).
pub fn write_modality_csv<W: Write>(out: &mut W, modalities: &[ModalityTensor; 6]) -> Result<()> {
    writeln!(out, "modality,frame,joint,x,y,z")?;
    for m in modalities {
        for t in 0..m.data.frames() {
            for v in 0..m.data.joints() {
                let p = m.data.vec3(t, v);
                writeln!(out, "{},{},{},{},{},{}", m.kind, t, v, p[0], p[1], p[2])?;
            }
        }
    }
    Ok(())
}
