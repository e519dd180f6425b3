//! Plain SGD over the current stage's trainable groups.

use ndarray::s;

use super::config::TrainConfig;
use super::dataset::SyntheticSample;
use super::model::{loss_and_grad, TrainBatch};
use super::params::{DenoiserParams, Stage, CELL_FEATURES};
use super::schedule::{q_sample_with, NoiseSchedule};
use crate::attention::{FrameLayout, LatentVideo, Matrix};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DenoiserParams,
    /// Loss before each update.
    pub losses: Vec<f64>,
}

/// Draws `batch` random windows of `frames` frames with random steps and
/// noise.
pub fn sample_batch(
    data: &[SyntheticSample],
    batch: usize,
    frames: usize,
    sched: &NoiseSchedule,
    rng: &mut SplitMix64,
) -> Result<TrainBatch> {
    let first = data
        .first()
        .ok_or_else(|| Error::invalid("empty dataset"))?;
    let (_, c, total, h, w) = first.target.dims();
    if frames > total {
        return Err(Error::invalid(format!(
            "clips have {total} frames, window needs {frames}"
        )));
    }
    let n = h * w;
    let layout = FrameLayout {
        batch,
        frames,
        locations: n,
    };
    let rows = frames * n;
    let mut x_t = Matrix::zeros((layout.rows(), c));
    let mut eps = Matrix::zeros((layout.rows(), c));
    let mut pose_cells = Matrix::zeros((layout.rows(), CELL_FEATURES));
    let mut source_cells = Matrix::zeros((batch * n, CELL_FEATURES));
    let mut timesteps = Vec::with_capacity(batch);
    for b in 0..batch {
        let sample = &data[rng.below(data.len())];
        let start = rng.below(total - frames + 1);
        let t = 1 + rng.below(sched.steps());
        let x0 = sample.target.slice_frames(start, start + frames);
        let noise = LatentVideo::from_fn(x0.dims(), || rng.normal());
        let noisy = q_sample_with(&x0, &noise, sched.alpha_bar(t))?;
        x_t.slice_mut(s![b * rows..(b + 1) * rows, ..])
            .assign(&noisy.to_tokens());
        eps.slice_mut(s![b * rows..(b + 1) * rows, ..])
            .assign(&noise.to_tokens());
        pose_cells
            .slice_mut(s![b * rows..(b + 1) * rows, ..])
            .assign(
                &sample
                    .pose_cells
                    .slice(s![start * n..(start + frames) * n, ..]),
            );
        source_cells
            .slice_mut(s![b * n..(b + 1) * n, ..])
            .assign(&sample.source_cells);
        timesteps.push(t);
    }
    Ok(TrainBatch {
        layout,
        x_t,
        timesteps,
        eps,
        pose_cells,
        source_cells,
    })
}

/// Runs `cfg.steps` SGD updates of the stage's groups. Stage 2 requires
/// parameters that completed stage 1. A non-finite loss or gradient aborts
/// with the step number.
pub fn train(
    mut params: DenoiserParams,
    data: &[SyntheticSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if params.dims != cfg.dims() {
        return Err(Error::invalid(format!(
            "checkpoint dims {:?} differ from config {:?}",
            params.dims,
            cfg.dims()
        )));
    }
    if cfg.stage == Stage::Two && params.trained_stage < 1 {
        return Err(Error::invalid(
            "stage 2 needs parameters trained by stage 1",
        ));
    }
    if let Some(first) = data.first() {
        let (_, c, _, h, w) = first.target.dims();
        if (c, h, w) != (cfg.c, cfg.h, cfg.w) {
            return Err(Error::invalid(format!(
                "dataset latents are c={c} {h}x{w}, config wants c={} {}x{}",
                cfg.c, cfg.h, cfg.w
            )));
        }
    } else if cfg.steps > 0 {
        return Err(Error::invalid("empty dataset"));
    }

    let sched = cfg.schedule()?;
    let frames = cfg.train_frames();
    let mut rng = SplitMix64::fork(cfg.seed, 0x7a11 + cfg.stage.number() as u64);
    params.set_stage(cfg.stage);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_batch(data, cfg.batch, frames, &sched, &mut rng)?;
        let (loss, grads) = loss_and_grad(&params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} at step {step}")));
        }
        params.sgd_step(&grads, cfg.lr);
        if !params.is_finite() {
            return Err(Error::NonFinite(format!(
                "parameters after step {step} (loss {loss})"
            )));
        }
        losses.push(loss);
    }
    if cfg.steps > 0 {
        params.trained_stage = params.trained_stage.max(cfg.stage.number());
    }
    Ok(TrainOutcome { params, losses })
}
