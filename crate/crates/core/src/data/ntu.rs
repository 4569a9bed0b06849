//! Text skeleton-capture ingestion.
//!
//! Layout: a frame-count line; per frame a body-count line; per body one
//! tracking-metadata line (ignored), a joint-count line, then one line per
//! joint whose first three fields are the x y z coordinates (any further
//! fields are ignored). Bodies beyond the cap are parsed and dropped, frames
//! with fewer bodies than the sequence's maximum are zero-padded, and body
//! file order is kept.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::skeleton::SkeletonSequence;
use crate::tensor::Tensor3;

struct Cursor<'a> {
    lines: std::str::Lines<'a>,
    path: &'a str,
    line_no: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str, path: &'a str) -> Cursor<'a> {
        Cursor {
            lines: text.lines(),
            path,
            line_no: 0,
        }
    }

    fn error(&self, msg: String) -> Error {
        Error::Parse {
            path: self.path.to_string(),
            line: self.line_no,
            msg,
        }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        self.line_no += 1;
        self.lines
            .next()
            .ok_or_else(|| self.error("unexpected end of file".into()))
    }

    fn next_count(&mut self, what: &str) -> Result<usize> {
        let line = self.next_line()?;
        line.trim()
            .parse()
            .map_err(|_| self.error(format!("bad {what} {:?}", line.trim())))
    }

    fn rest_is_blank(&mut self) -> Result<()> {
        for line in self.lines.by_ref() {
            self.line_no += 1;
            if !line.trim().is_empty() {
                return Err(self.error(format!("trailing content {:?}", line.trim())));
            }
        }
        Ok(())
    }
}

/// Parse one capture file. `expected_joints` is the topology's joint count;
/// at most `max_bodies` bodies are kept per frame.
pub fn parse_skeleton_file(
    path: &Path,
    expected_joints: usize,
    max_bodies: usize,
) -> Result<SkeletonSequence> {
    if expected_joints == 0 || max_bodies == 0 {
        return Err(Error::Config(
            "need at least one joint and one body slot".into(),
        ));
    }
    let text = fs::read_to_string(path)?;
    let shown = path.display().to_string();
    let mut cursor = Cursor::new(&text, &shown);

    let frames = cursor.next_count("frame count")?;
    if frames == 0 {
        return Err(cursor.error("frame count must be positive".into()));
    }
    let mut per_frame: Vec<Vec<Vec<[f64; 3]>>> = Vec::with_capacity(frames);
    for _ in 0..frames {
        let body_count = cursor.next_count("body count")?;
        let mut bodies = Vec::with_capacity(body_count.min(max_bodies));
        for body in 0..body_count {
            cursor.next_line()?;
            let joint_count = cursor.next_count("joint count")?;
            if joint_count != expected_joints {
                return Err(cursor.error(format!(
                    "body has {joint_count} joints, topology expects {expected_joints}"
                )));
            }
            let mut joints = Vec::with_capacity(joint_count);
            for _ in 0..joint_count {
                let line = cursor.next_line()?;
                let mut fields = line.split_whitespace();
                let mut p = [0.0f64; 3];
                for (c, slot) in p.iter_mut().enumerate() {
                    let field = fields
                        .next()
                        .ok_or_else(|| cursor.error(format!(
                            "joint line holds fewer than 3 coordinates: {:?}",
                            line.trim()
                        )))?;
                    *slot = field.parse().map_err(|_| {
                        cursor.error(format!("bad coordinate {field:?} (field {})", c + 1))
                    })?;
                }
                joints.push(p);
            }
            if body < max_bodies {
                bodies.push(joints);
            }
        }
        per_frame.push(bodies);
    }
    cursor.rest_is_blank()?;

    let body_slots = per_frame.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut data = Tensor3::zeros(3, frames, body_slots * expected_joints);
    for (t, bodies) in per_frame.iter().enumerate() {
        for (b, joints) in bodies.iter().enumerate() {
            for (v, p) in joints.iter().enumerate() {
                data.set_vec3(t, b * expected_joints + v, *p);
            }
        }
    }
    SkeletonSequence::new(data, body_slots, frames, None)
}

/// Write a sequence in the same layout, one body block per body slot. Floats
/// are shortest-roundtrip, so a parse of the output restores them exactly.
pub fn write_skeleton_file(path: &Path, seq: &SkeletonSequence) -> Result<()> {
    let data = seq.data();
    let joints = seq.joints_per_body();
    let mut text = String::new();
    text.push_str(&format!("{}\n", data.frames()));
    for t in 0..data.frames() {
        text.push_str(&format!("{}\n", seq.bodies()));
        for b in 0..seq.bodies() {
            text.push_str(&format!("{b} 0 0 0 0 0 0 0 0 0\n"));
            text.push_str(&format!("{joints}\n"));
            for v in 0..joints {
                let p = data.vec3(t, b * joints + v);
                text.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
            }
        }
    }
    fs::write(path, text)?;
    Ok(())
}
