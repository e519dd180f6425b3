//! Long clips from overlapping fixed-length windows.
//!
//! Every denoising step predicts noise for each window separately and
//! averages the predictions uniformly on frames that several windows cover.
//! One initial noise tensor spans the whole clip; windows read slices of it.

use crate::attention::LatentVideo;
use crate::diffusion::model::{eps_predict, Conditioning};
use crate::diffusion::params::DenoiserParams;
use crate::diffusion::sample::{ddpm_step, window_conditioning, NoiseTape};
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::pose::PoseSequence;
use crate::ptm::TemperatureMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub total: usize,
    pub window: usize,
    pub stride: usize,
    /// Half-open `[start, end)` frame intervals in order.
    pub windows: Vec<(usize, usize)>,
    pub coverage: Vec<usize>,
}

/// Windows start at `0, s, 2s, …` while they fit; if the last one stops
/// short of `F`, `[F − f, F)` is appended.
pub fn plan_windows(total: usize, window: usize, stride: usize) -> Result<WindowPlan> {
    if window == 0 || window > total {
        return Err(Error::invalid(format!(
            "window {window} must be in 1..={total}"
        )));
    }
    if stride == 0 || stride > window {
        return Err(Error::invalid(format!(
            "stride {stride} must be in 1..={window}"
        )));
    }
    let mut windows: Vec<(usize, usize)> = (0..)
        .map(|i| i * stride)
        .take_while(|s| s + window <= total)
        .map(|s| (s, s + window))
        .collect();
    if windows.last().map(|w| w.1) != Some(total) {
        windows.push((total - window, total));
    }
    windows.dedup();
    let mut coverage = vec![0; total];
    for &(s, e) in &windows {
        for c in &mut coverage[s..e] {
            *c += 1;
        }
    }
    Ok(WindowPlan {
        total,
        window,
        stride,
        windows,
        coverage,
    })
}

/// Averages per-window noise predictions over the clip. `predictor` gets
/// the window index and that window's slice of `z_t`, and must answer with
/// a tensor of the same shape.
pub fn fused_eps<P>(z_t: &LatentVideo, plan: &WindowPlan, mut predictor: P) -> Result<LatentVideo>
where
    P: FnMut(usize, &LatentVideo) -> Result<LatentVideo>,
{
    if z_t.frames() != plan.total {
        return Err(Error::shape(format!(
            "latent has {} frames, plan covers {}",
            z_t.frames(),
            plan.total
        )));
    }
    let mut out = z_t.data.clone();
    let mut written = vec![false; plan.total];
    for (k, &(s, e)) in plan.windows.iter().enumerate() {
        let window = z_t.slice_frames(s, e);
        let pred = predictor(k, &window)?;
        if pred.dims() != window.dims() {
            return Err(Error::shape(format!(
                "predictor returned {:?} for window {k} of shape {:?}",
                pred.dims(),
                window.dims()
            )));
        }
        for fi in 0..(e - s) {
            let src = pred.data.index_axis(ndarray::Axis(2), fi);
            let mut dst = out.index_axis_mut(ndarray::Axis(2), s + fi);
            if written[s + fi] {
                dst += &src;
            } else {
                dst.assign(&src);
                written[s + fi] = true;
            }
        }
    }
    for (i, &c) in plan.coverage.iter().enumerate() {
        if c > 1 {
            out.index_axis_mut(ndarray::Axis(2), i)
                .mapv_inplace(|v| v / c as f64);
        }
    }
    Ok(LatentVideo { data: out })
}

/// Samples `F = poses.len()` frames. Each window is conditioned on its own
/// pose slice and, when `tau` is given, its own temperature map.
pub fn sample_long(
    params: &DenoiserParams,
    source: &RgbImage,
    poses: &PoseSequence,
    sched: &NoiseSchedule,
    plan: &WindowPlan,
    tau: Option<f64>,
    seed: u64,
) -> Result<LatentVideo> {
    if poses.len() != plan.total {
        return Err(Error::invalid(format!(
            "{} pose frames, plan covers {}",
            poses.len(),
            plan.total
        )));
    }
    let windows: Vec<(Conditioning, Option<TemperatureMap>)> = plan
        .windows
        .iter()
        .map(|&(s, e)| window_conditioning(params, source, &poses.slice(s, e)?, tau))
        .collect::<Result<_>>()?;
    let d = params.dims;
    let tape = NoiseTape::draw(
        (1, d.channels, plan.total, d.grid_h, d.grid_w),
        sched.steps(),
        seed,
    );
    let mut x = tape.initial.clone();
    for t in (1..=sched.steps()).rev() {
        let eps = fused_eps(&x, plan, |k, z| {
            let (cond, tmap) = &windows[k];
            eps_predict(params, z, t, cond, tmap.as_ref())
        })?;
        x = ddpm_step(&x, &eps, t, sched, tape.step_noise(t));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_sequence_window() {
        let p = plan_windows(8, 8, 4).unwrap();
        assert_eq!(p.windows, vec![(0, 8)]);
        assert_eq!(p.coverage, vec![1; 8]);
    }

    #[test]
    fn half_overlap() {
        let p = plan_windows(12, 8, 4).unwrap();
        assert_eq!(p.windows, vec![(0, 8), (4, 12)]);
        assert_eq!(p.coverage, vec![1, 1, 1, 1, 2, 2, 2, 2, 1, 1, 1, 1]);
    }

    #[test]
    fn clamped_last_window() {
        let p = plan_windows(10, 8, 4).unwrap();
        assert_eq!(p.windows, vec![(0, 8), (2, 10)]);
        assert_eq!(p.coverage, vec![1, 1, 2, 2, 2, 2, 2, 2, 1, 1]);
    }

    #[test]
    fn invalid_plans() {
        assert!(plan_windows(8, 0, 1).is_err());
        assert!(plan_windows(8, 9, 1).is_err());
        assert!(plan_windows(8, 4, 0).is_err());
        assert!(plan_windows(8, 4, 5).is_err());
    }

    #[test]
    fn per_window_constants_average() {
        let plan = plan_windows(12, 8, 4).unwrap();
        let z = LatentVideo::zeros(1, 2, 12, 2, 2);
        let fused = fused_eps(&z, &plan, |k, w| {
            let mut out = w.clone();
            out.data.fill(if k == 0 { 1.0 } else { 3.0 });
            Ok(out)
        })
        .unwrap();
        for f in 0..12 {
            let want = match f {
                0..=3 => 1.0,
                4..=7 => 2.0,
                _ => 3.0,
            };
            assert!(fused
                .data
                .index_axis(ndarray::Axis(2), f)
                .iter()
                .all(|v| *v == want));
        }
    }

    #[test]
    fn predictor_shape_is_checked() {
        let plan = plan_windows(4, 2, 2).unwrap();
        let z = LatentVideo::zeros(1, 2, 4, 2, 2);
        assert!(fused_eps(&z, &plan, |_, _| Ok(LatentVideo::zeros(1, 2, 1, 2, 2))).is_err());
        let short = LatentVideo::zeros(1, 2, 3, 2, 2);
        assert!(fused_eps(&short, &plan, |_, w| Ok(w.clone())).is_err());
    }
}
