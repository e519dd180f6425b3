//! Transfers source-image body proportions onto a driving pose sequence.
//!
//! Every bone `(p, c)` measurable in the current, initial and source frames is
//! rescaled to `src_len * cur_len / init_len` along its current direction,
//! visiting bones breadth-first from the neck. Moving a child carries its
//! whole subtree by the same displacement, so bones finalized earlier keep
//! their lengths.

use crate::error::{Error, Result};
use crate::pose::{PoseFrame, PoseSequence, SkeletonTopology, NECK, NUM_KEYPOINTS};

/// What to do with a bone that cannot be measured in all three frames.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum MissingPolicy {
    /// Leave the child where it is; its subtree only follows ancestor moves.
    #[default]
    SkipSubtree,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetargetConfig {
    pub epsilon_len: f64,
    pub missing_policy: MissingPolicy,
}

impl Default for RetargetConfig {
    fn default() -> Self {
        Self {
            epsilon_len: 1e-6,
            missing_policy: MissingPolicy::SkipSubtree,
        }
    }
}

impl RetargetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_len > 0.0) {
            return Err(Error::invalid(format!(
                "epsilon_len must be positive, got {}",
                self.epsilon_len
            )));
        }
        Ok(())
    }
}

/// Bone lengths indexed like [`SkeletonTopology::bones`].
#[derive(Debug, Clone, PartialEq)]
pub struct BoneLengths(pub Vec<Option<f64>>);

impl BoneLengths {
    pub fn get(&self, bone: usize) -> Option<f64> {
        self.0[bone]
    }
}

/// Per-bone `cur_len / init_len`. `None` marks an undefined ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct BoneRatios(pub Vec<Option<f64>>);

pub fn bone_lengths(frame: &PoseFrame, topology: &SkeletonTopology) -> BoneLengths {
    BoneLengths(
        topology
            .bones()
            .iter()
            .map(|&(p, c)| {
                let (a, b) = (frame.get(p), frame.get(c));
                (a.is_present() && b.is_present()).then(|| a.distance(b))
            })
            .collect(),
    )
}

pub fn bone_ratios(
    cur: &PoseFrame,
    init: &PoseFrame,
    topology: &SkeletonTopology,
    epsilon_len: f64,
) -> BoneRatios {
    let cur = bone_lengths(cur, topology);
    let init = bone_lengths(init, topology);
    BoneRatios(
        cur.0
            .iter()
            .zip(&init.0)
            .map(|(c, i)| match (c, i) {
                (Some(c), Some(i)) if *c >= epsilon_len && *i >= epsilon_len => Some(c / i),
                _ => None,
            })
            .collect(),
    )
}

pub fn retarget_frame(
    cur: &PoseFrame,
    init: &PoseFrame,
    src: &PoseFrame,
    topology: &SkeletonTopology,
    cfg: &RetargetConfig,
) -> Result<PoseFrame> {
    cfg.validate()?;
    if !cur.present(NECK) {
        return Err(Error::Unretargetable { frame: None });
    }
    let ratios = bone_ratios(cur, init, topology, cfg.epsilon_len);
    let cur_len = bone_lengths(cur, topology);
    let init_len = bone_lengths(init, topology);
    let src_len = bone_lengths(src, topology);
    let mut out = *cur;

    for &child in &topology.bfs_order()[1..] {
        let parent = topology.parent(child).expect("non-root has a parent");
        let bone = topology.bone_of_child(child).expect("non-root ends a bone");
        let (Some(_), Some(src_len)) = (ratios.0[bone], src_len.get(bone)) else {
            continue;
        };
        // Scaling by src/init keeps the length exact when src equals init.
        let (cur_len, init_len) = (cur_len.0[bone].unwrap(), init_len.0[bone].unwrap());
        let target = cur_len * (src_len / init_len);

        // Both endpoints have moved by the same ancestor displacements, so
        // this is still cur's bone direction.
        let (p, c) = (out.keypoints[parent], out.keypoints[child]);
        let (vx, vy) = (c.x - p.x, c.y - p.y);
        let len = vx.hypot(vy);
        let scale = target / len;
        if scale == 1.0 {
            continue;
        }
        let (dx, dy) = (p.x + vx * scale - c.x, p.y + vy * scale - c.y);

        for &k in topology.subtree(child) {
            let kp = &mut out.keypoints[k];
            if kp.is_present() {
                kp.x += dx;
                kp.y += dy;
            }
        }
        // Land the child exactly on the target point.
        out.keypoints[child].x = p.x + vx * scale;
        out.keypoints[child].y = p.y + vy * scale;
    }
    debug_assert_eq!(out.keypoints.len(), NUM_KEYPOINTS);
    Ok(out)
}

/// Re-targets every frame, using frame 0 of `driving` as the initial frame.
pub fn retarget_sequence(
    driving: &PoseSequence,
    src: &PoseFrame,
    topology: &SkeletonTopology,
    cfg: &RetargetConfig,
) -> Result<PoseSequence> {
    let init = driving
        .frames
        .first()
        .ok_or_else(|| Error::PoseFormat("driving sequence has no frames".into()))?;
    let frames = driving
        .frames
        .iter()
        .enumerate()
        .map(|(i, cur)| {
            retarget_frame(cur, init, src, topology, cfg).map_err(|e| match e {
                Error::Unretargetable { .. } => Error::Unretargetable { frame: Some(i) },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PoseSequence {
        width: driving.width,
        height: driving.height,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{Keypoint, L_HIP, NOSE, R_ELBOW, R_SHOULDER, R_WRIST};

    fn topo() -> SkeletonTopology {
        SkeletonTopology::body18()
    }

    /// A plausible upright skeleton around (50, 40).
    fn reference_pose() -> PoseFrame {
        let coords = [
            (50.0, 20.0),
            (50.0, 30.0),
            (42.0, 31.0),
            (38.0, 42.0),
            (36.0, 52.0),
            (58.0, 31.0),
            (62.0, 42.0),
            (64.0, 52.0),
            (45.0, 55.0),
            (44.0, 68.0),
            (44.0, 80.0),
            (55.0, 55.0),
            (56.0, 68.0),
            (56.0, 80.0),
            (48.0, 18.0),
            (52.0, 18.0),
            (45.0, 19.0),
            (55.0, 19.0),
        ];
        let mut f = PoseFrame::missing();
        for (k, (x, y)) in coords.into_iter().enumerate() {
            f.keypoints[k] = Keypoint::visible(x, y);
        }
        f
    }

    #[test]
    fn lengths_of_simple_bone() {
        let mut f = PoseFrame::missing();
        f.keypoints[NECK] = Keypoint::visible(0.0, 0.0);
        f.keypoints[NOSE] = Keypoint::visible(0.0, 10.0);
        let t = topo();
        let lens = bone_lengths(&f, &t);
        let nose_bone = t.bone_of_child(NOSE).unwrap();
        assert_eq!(lens.get(nose_bone), Some(10.0));
        let shoulder_bone = t.bone_of_child(R_SHOULDER).unwrap();
        assert_eq!(lens.get(shoulder_bone), None);
    }

    #[test]
    fn lengths_are_isometry_invariant() {
        let f = reference_pose();
        let t = topo();
        let base = bone_lengths(&f, &t);
        let shifted = bone_lengths(&f.translated(5.0, 7.0), &t);
        for (a, b) in base.0.iter().zip(&shifted.0) {
            assert!((a.unwrap() - b.unwrap()).abs() < 1e-12);
        }
        let mut mirrored = f;
        for kp in &mut mirrored.keypoints {
            kp.x = -kp.x;
        }
        for (a, b) in base.0.iter().zip(&bone_lengths(&mirrored, &t).0) {
            assert!((a.unwrap() - b.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_when_all_frames_agree() {
        let f = reference_pose();
        let out = retarget_frame(&f, &f, &f, &topo(), &RetargetConfig::default()).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn doubled_source_doubles_every_bone() {
        let t = topo();
        let init = reference_pose();
        // Scale the skeleton about the neck by 2.
        let neck = *init.get(NECK);
        let mut src = init;
        for kp in &mut src.keypoints {
            kp.x = neck.x + 2.0 * (kp.x - neck.x);
            kp.y = neck.y + 2.0 * (kp.y - neck.y);
        }
        let out = retarget_frame(&init, &init, &src, &t, &RetargetConfig::default()).unwrap();
        assert_eq!(out.get(NECK), init.get(NECK));
        // Doubling every bone along its own direction is the scaling about the
        // neck, applied bone by bone down the tree.
        for k in 0..NUM_KEYPOINTS {
            assert!((out.get(k).x - src.get(k).x).abs() < 1e-9, "kp {k}");
            assert!((out.get(k).y - src.get(k).y).abs() < 1e-9, "kp {k}");
        }
    }

    #[test]
    fn missing_wrist_is_left_alone() {
        let t = topo();
        let init = reference_pose();
        let mut src = init;
        src.keypoints[R_ELBOW].x -= 6.0;
        let mut cur = init.translated(1.0, 2.0);
        cur.keypoints[R_WRIST] = Keypoint::new(123.0, 456.0, 0.0);

        let out = retarget_frame(&cur, &init, &src, &t, &RetargetConfig::default()).unwrap();
        assert_eq!(out.keypoints[R_WRIST], cur.keypoints[R_WRIST]);

        let elbow_bone = t.bone_of_child(R_ELBOW).unwrap();
        let want = bone_lengths(&src, &t).get(elbow_bone).unwrap();
        let got = out.get(R_SHOULDER).distance(out.get(R_ELBOW));
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn missing_neck_is_an_error() {
        let f = reference_pose();
        let mut cur = f;
        cur.keypoints[NECK].confidence = 0.0;
        let err = retarget_frame(&cur, &f, &f, &topo(), &RetargetConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Unretargetable { frame: None }));

        let seq = PoseSequence::new(100, 100, vec![f, cur]).unwrap();
        let err = retarget_sequence(&seq, &f, &topo(), &RetargetConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Unretargetable { frame: Some(1) }));
    }

    #[test]
    fn degenerate_init_bone_is_skipped() {
        let t = topo();
        let mut init = reference_pose();
        init.keypoints[R_ELBOW] = init.keypoints[R_SHOULDER];
        let cur = reference_pose();
        let mut src = reference_pose();
        src.keypoints[R_ELBOW].y += 5.0;
        let out = retarget_frame(&cur, &init, &src, &t, &RetargetConfig::default()).unwrap();
        assert_eq!(out.keypoints[R_ELBOW], cur.keypoints[R_ELBOW]);
    }

    #[test]
    fn single_frame_sequence_takes_source_lengths() {
        let t = topo();
        let driving = reference_pose();
        let mut src = reference_pose();
        src.keypoints[NOSE].y -= 4.0;
        src.keypoints[R_WRIST].x -= 3.0;
        src.keypoints[L_HIP].y += 2.0;
        let seq = PoseSequence::new(100, 100, vec![driving]).unwrap();
        let out = retarget_sequence(&seq, &src, &t, &RetargetConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        let got = bone_lengths(&out.frames[0], &t);
        let want = bone_lengths(&src, &t);
        for (g, w) in got.0.iter().zip(&want.0) {
            assert!((g.unwrap() - w.unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn source_equal_to_first_driving_frame_changes_nothing() {
        let t = topo();
        let frames: Vec<PoseFrame> = (0..6)
            .map(|i| {
                let mut f = reference_pose();
                for (k, kp) in f.keypoints.iter_mut().enumerate() {
                    let a = 0.37 * (i * 18 + k) as f64;
                    kp.x += 3.1 * a.sin();
                    kp.y += 2.3 * (1.7 * a).cos();
                }
                f
            })
            .collect();
        let seq = PoseSequence::new(100, 100, frames).unwrap();
        let out = retarget_sequence(&seq, &seq.frames[0], &t, &RetargetConfig::default()).unwrap();
        assert_eq!(out, seq);
    }

    #[test]
    fn rejects_nonpositive_epsilon() {
        let f = reference_pose();
        let cfg = RetargetConfig {
            epsilon_len: 0.0,
            ..Default::default()
        };
        assert!(retarget_frame(&f, &f, &f, &topo(), &cfg).is_err());
    }
}
