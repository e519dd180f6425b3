//! BODY-18 pose data model, the JSON pose-sequence format and skeleton
//! rasterization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Rgb, RgbImage};

pub const NUM_KEYPOINTS: usize = 18;

pub const NOSE: usize = 0;
pub const NECK: usize = 1;
pub const R_SHOULDER: usize = 2;
pub const R_ELBOW: usize = 3;
pub const R_WRIST: usize = 4;
pub const L_SHOULDER: usize = 5;
pub const L_ELBOW: usize = 6;
pub const L_WRIST: usize = 7;
pub const R_HIP: usize = 8;
pub const R_KNEE: usize = 9;
pub const R_ANKLE: usize = 10;
pub const L_HIP: usize = 11;
pub const L_KNEE: usize = 12;
pub const L_ANKLE: usize = 13;
pub const R_EYE: usize = 14;
pub const L_EYE: usize = 15;
pub const R_EAR: usize = 16;
pub const L_EAR: usize = 17;

pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "nose",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_eye",
    "left_eye",
    "right_ear",
    "left_ear",
];

/// Bones as (parent, child) in OpenPose drawing order, with the conventional
/// OpenPose limb palette.
pub const BONES: [(usize, usize, Rgb); NUM_KEYPOINTS - 1] = [
    (NECK, R_SHOULDER, [255, 0, 0]),
    (NECK, L_SHOULDER, [255, 85, 0]),
    (R_SHOULDER, R_ELBOW, [255, 170, 0]),
    (R_ELBOW, R_WRIST, [255, 255, 0]),
    (L_SHOULDER, L_ELBOW, [170, 255, 0]),
    (L_ELBOW, L_WRIST, [85, 255, 0]),
    (NECK, R_HIP, [0, 255, 0]),
    (R_HIP, R_KNEE, [0, 255, 85]),
    (R_KNEE, R_ANKLE, [0, 255, 170]),
    (NECK, L_HIP, [0, 255, 255]),
    (L_HIP, L_KNEE, [0, 170, 255]),
    (L_KNEE, L_ANKLE, [0, 85, 255]),
    (NECK, NOSE, [0, 0, 255]),
    (NOSE, R_EYE, [85, 0, 255]),
    (R_EYE, R_EAR, [170, 0, 255]),
    (NOSE, L_EYE, [255, 0, 255]),
    (L_EYE, L_EAR, [255, 0, 85]),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Keypoint {
    pub const MISSING: Keypoint = Keypoint {
        x: 0.0,
        y: 0.0,
        confidence: 0.0,
    };

    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        Self { x, y, confidence }
    }

    pub fn visible(x: f64, y: f64) -> Self {
        Self::new(x, y, 1.0)
    }

    pub fn is_present(&self) -> bool {
        self.confidence > 0.0
    }

    pub fn distance(&self, other: &Keypoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseFrame {
    pub keypoints: [Keypoint; NUM_KEYPOINTS],
}

impl PoseFrame {
    pub fn missing() -> Self {
        Self {
            keypoints: [Keypoint::MISSING; NUM_KEYPOINTS],
        }
    }

    pub fn get(&self, index: usize) -> &Keypoint {
        &self.keypoints[index]
    }

    pub fn present(&self, index: usize) -> bool {
        self.keypoints[index].is_present()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let mut out = *self;
        for kp in &mut out.keypoints {
            kp.x += dx;
            kp.y += dy;
        }
        out
    }
}

impl Default for PoseFrame {
    fn default() -> Self {
        Self::missing()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub width: usize,
    pub height: usize,
    pub frames: Vec<PoseFrame>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSequence {
    width: i64,
    height: i64,
    frames: Vec<RawFrame>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrame {
    keypoints: Vec<[f64; 3]>,
}

impl PoseSequence {
    pub fn new(width: usize, height: usize, frames: Vec<PoseFrame>) -> Result<Self> {
        let seq = Self {
            width,
            height,
            frames,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Checks every invariant of the data model.
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::PoseFormat(format!(
                "canvas dimensions must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        if self.frames.is_empty() {
            return Err(Error::PoseFormat("sequence has no frames".into()));
        }
        for (fi, frame) in self.frames.iter().enumerate() {
            for (ki, kp) in frame.keypoints.iter().enumerate() {
                if !(0.0..=1.0).contains(&kp.confidence) {
                    return Err(Error::Keypoint {
                        frame: fi,
                        keypoint: ki,
                        message: format!("confidence {} outside [0, 1]", kp.confidence),
                    });
                }
                if !kp.x.is_finite() || !kp.y.is_finite() {
                    return Err(Error::Keypoint {
                        frame: fi,
                        keypoint: ki,
                        message: "non-finite coordinate".into(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Frames `[start, end)` as a new sequence on the same canvas.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames.len() {
            return Err(Error::invalid(format!(
                "frame range {start}..{end} out of bounds for {} frames",
                self.frames.len()
            )));
        }
        Ok(Self {
            width: self.width,
            height: self.height,
            frames: self.frames[start..end].to_vec(),
        })
    }

    pub fn to_json(&self) -> String {
        let raw = RawSequence {
            width: self.width as i64,
            height: self.height as i64,
            frames: self
                .frames
                .iter()
                .map(|f| RawFrame {
                    keypoints: f
                        .keypoints
                        .iter()
                        .map(|k| [k.x, k.y, k.confidence])
                        .collect(),
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&raw).expect("pose sequence serializes");
        text.push('\n');
        text
    }
}

/// Parses and validates a pose-sequence document.
pub fn parse_pose_sequence(text: &str) -> Result<PoseSequence> {
    let raw: RawSequence =
        serde_json::from_str(text).map_err(|e| Error::PoseFormat(e.to_string()))?;
    if raw.width <= 0 || raw.height <= 0 {
        return Err(Error::PoseFormat(format!(
            "canvas dimensions must be positive, got {}x{}",
            raw.width, raw.height
        )));
    }
    let mut frames = Vec::with_capacity(raw.frames.len());
    for (fi, rf) in raw.frames.iter().enumerate() {
        if rf.keypoints.len() != NUM_KEYPOINTS {
            return Err(Error::Frame {
                frame: fi,
                message: format!(
                    "expected {NUM_KEYPOINTS} keypoints, found {}",
                    rf.keypoints.len()
                ),
            });
        }
        let mut frame = PoseFrame::missing();
        for (ki, &[x, y, c]) in rf.keypoints.iter().enumerate() {
            frame.keypoints[ki] = Keypoint::new(x, y, c);
        }
        frames.push(frame);
    }
    PoseSequence::new(raw.width as usize, raw.height as usize, frames)
}

/// Skeleton tree over the BODY-18 keypoints, rooted at the neck.
#[derive(Debug, Clone)]
pub struct SkeletonTopology {
    parent: [Option<usize>; NUM_KEYPOINTS],
    bones: Vec<(usize, usize)>,
    colors: Vec<Rgb>,
    children: Vec<Vec<usize>>,
    subtree: Vec<Vec<usize>>,
    bfs: Vec<usize>,
}

impl SkeletonTopology {
    pub fn body18() -> Self {
        let mut parent = [None; NUM_KEYPOINTS];
        let mut children = vec![Vec::new(); NUM_KEYPOINTS];
        for &(p, c, _) in &BONES {
            parent[c] = Some(p);
            children[p].push(c);
        }

        let mut bfs = Vec::with_capacity(NUM_KEYPOINTS);
        let mut queue = std::collections::VecDeque::from([NECK]);
        while let Some(k) = queue.pop_front() {
            bfs.push(k);
            // Nose first so the head is finalized before the limbs.
            let mut kids = children[k].clone();
            kids.sort_by_key(|&c| (c != NOSE, c));
            queue.extend(kids);
        }

        let mut subtree = vec![Vec::new(); NUM_KEYPOINTS];
        for &k in bfs.iter().rev() {
            let mut desc = vec![k];
            for &c in &children[k] {
                desc.extend_from_slice(&subtree[c]);
            }
            desc.sort_unstable();
            subtree[k] = desc;
        }

        Self {
            parent,
            bones: BONES.iter().map(|&(p, c, _)| (p, c)).collect(),
            colors: BONES.iter().map(|b| b.2).collect(),
            children,
            subtree,
            bfs,
        }
    }

    pub fn root(&self) -> usize {
        NECK
    }

    pub fn parent(&self, k: usize) -> Option<usize> {
        self.parent[k]
    }

    pub fn children(&self, k: usize) -> &[usize] {
        &self.children[k]
    }

    pub fn bones(&self) -> &[(usize, usize)] {
        &self.bones
    }

    pub fn bone_color(&self, bone: usize) -> Rgb {
        self.colors[bone]
    }

    pub fn colors(&self) -> &[Rgb] {
        &self.colors
    }

    /// Keypoint `k` and all of its descendants, ascending.
    pub fn subtree(&self, k: usize) -> &[usize] {
        &self.subtree[k]
    }

    /// Keypoints in breadth-first order from the neck.
    pub fn bfs_order(&self) -> &[usize] {
        &self.bfs
    }

    /// Index into [`bones`](Self::bones) of the bone ending at `child`.
    pub fn bone_of_child(&self, child: usize) -> Option<usize> {
        self.bones.iter().position(|&(_, c)| c == child)
    }

    /// Colour used for a keypoint disc: the bone ending at the keypoint, or
    /// the first bone leaving the root.
    pub fn keypoint_color(&self, k: usize) -> Rgb {
        let bone = self
            .bone_of_child(k)
            .or_else(|| self.bones.iter().position(|&(p, _)| p == k))
            .expect("every keypoint touches a bone");
        self.colors[bone]
    }
}

impl Default for SkeletonTopology {
    fn default() -> Self {
        Self::body18()
    }
}

/// Stroke width that scales with the canvas: `max(1, round(min(H, W) / 64))`.
pub fn default_stroke(width: usize, height: usize) -> usize {
    ((width.min(height) as f64 / 64.0).round() as usize).max(1)
}

pub fn point_segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (px - (a.0 + t * dx)).hypot(py - (a.1 + t * dy))
}

/// Renders a frame as an OpenPose-style skeleton on black.
///
/// A pixel belongs to a bone when its center lies within `stroke / 2` of the
/// segment, and to a keypoint disc when its center is strictly closer than
/// `stroke` to the keypoint. Bones are drawn in topology order and discs
/// last; later draws overwrite earlier ones.
pub fn rasterize_pose(
    frame: &PoseFrame,
    width: usize,
    height: usize,
    topology: &SkeletonTopology,
    stroke: usize,
) -> RgbImage {
    let mut img = RgbImage::black(width, height);
    let stroke = stroke.max(1) as f64;
    let half = stroke / 2.0;

    for (bi, &(p, c)) in topology.bones().iter().enumerate() {
        let (kp, kc) = (frame.get(p), frame.get(c));
        if !kp.is_present() || !kc.is_present() {
            continue;
        }
        let (a, b) = ((kp.x, kp.y), (kc.x, kc.y));
        let color = topology.bone_color(bi);
        fill_where(&mut img, bounds(a, b, half), color, |x, y| {
            point_segment_distance(x, y, a, b) <= half
        });
    }

    for k in 0..NUM_KEYPOINTS {
        let kp = frame.get(k);
        if !kp.is_present() {
            continue;
        }
        let color = topology.keypoint_color(k);
        let centre = (kp.x, kp.y);
        fill_where(&mut img, bounds(centre, centre, stroke), color, |x, y| {
            (x - kp.x).hypot(y - kp.y) < stroke
        });
    }
    img
}

type PixelBox = (i64, i64, i64, i64);

fn bounds(a: (f64, f64), b: (f64, f64), pad: f64) -> PixelBox {
    (
        (a.0.min(b.0) - pad).floor() as i64,
        (a.1.min(b.1) - pad).floor() as i64,
        (a.0.max(b.0) + pad).ceil() as i64,
        (a.1.max(b.1) + pad).ceil() as i64,
    )
}

fn fill_where(img: &mut RgbImage, bbox: PixelBox, color: Rgb, inside: impl Fn(f64, f64) -> bool) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x0, y0) = (bbox.0.max(0), bbox.1.max(0));
    let (x1, y1) = (bbox.2.min(w - 1), bbox.3.min(h - 1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            if inside(x as f64, y as f64) {
                img.set(x as usize, y as usize, color);
            }
        }
    }
}
