//! Forward and backward passes of the two-block toy denoiser.
//!
//! Per block: add the pose-branch residual, spatial attention with appearance
//! tokens concatenated into K/V (LoRA-adapted projections), temporal
//! attention across frames, then a feed-forward layer; every stage is a
//! residual update. A final linear map produces the noise estimate. The pose
//! branch and appearance encoder run once per call and feed every block.
//!
//! Temporal layers only run on clips with more than one frame, so a
//! single-frame call is exactly the image-level model.

use ndarray::{s, Axis};

use super::params::{DenoiserParams, Group, CELL_FEATURES};
use crate::attention::gradcheck::{flatten, unflatten, Differentiable};
use crate::attention::{
    spatial_backward, spatial_forward, temporal_backward, temporal_forward, FrameLayout,
    LatentVideo, LoraDelta, Matrix, SpatialCache, TemporalCache,
};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::ptm::TemperatureMap;

/// Sinusoidal timestep embedding of width `c`.
pub fn timestep_embedding(t: usize, c: usize) -> Vec<f64> {
    let half = c / 2;
    let mut e = vec![0.0; c];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        e[i] = (t as f64 * freq).sin();
        e[half + i] = (t as f64 * freq).cos();
    }
    e
}

/// Area-averaged RGB on the `h × w` grid, gathered over each cell's 3×3
/// neighbourhood (zero padded): one row of 27 features per cell.
pub fn cell_features(image: &RgbImage, h: usize, w: usize) -> Matrix {
    let cells = image.area_cells(h, w);
    let mut out = Matrix::zeros((h * w, CELL_FEATURES));
    for y in 0..h {
        for x in 0..w {
            let mut k = 0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (sy, sx) = (y as i64 + dy, x as i64 + dx);
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        let rgb = cells[sy as usize * w + sx as usize];
                        for ch in 0..3 {
                            out[[y * w + x, k * 3 + ch]] = rgb[ch];
                        }
                    }
                    k += 1;
                }
            }
        }
    }
    out
}

/// Cell features of consecutive frames stacked frame-major.
pub fn frames_cell_features(images: &[RgbImage], h: usize, w: usize) -> Matrix {
    let mut out = Matrix::zeros((images.len() * h * w, CELL_FEATURES));
    for (i, img) in images.iter().enumerate() {
        out.slice_mut(s![i * h * w..(i + 1) * h * w, ..])
            .assign(&cell_features(img, h, w));
    }
    out
}

/// Per-block pose residuals and appearance tokens for one call.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub layout: FrameLayout,
    /// Per block: one row per latent token.
    pub pose: Vec<Matrix>,
    /// Per block: `locations` rows per batch element.
    pub appearance: Vec<Matrix>,
}

struct PoseCache {
    hidden: Matrix,
    temporal: Vec<Option<(TemporalCache, Matrix)>>,
}

struct AppearanceCache {
    cells: Matrix,
    hidden: Matrix,
    projected: Vec<Matrix>,
}

struct BlockCache {
    spatial: Vec<SpatialCache>,
    temporal: Option<(TemporalCache, Matrix)>,
    ff_act: Matrix,
}

struct DenoiseCache {
    blocks: Vec<BlockCache>,
    hidden: Matrix,
}

fn tanh_layer(x: &Matrix, w: &Matrix, bias: &Matrix) -> Matrix {
    let mut y = x.dot(w);
    y += bias;
    y.mapv_inplace(f64::tanh);
    y
}

fn check_layout(p: &DenoiserParams, layout: FrameLayout) -> Result<()> {
    if layout.locations != p.dims.locations() {
        return Err(Error::shape(format!(
            "{} latent locations, model grid is {}x{}",
            layout.locations, p.dims.grid_h, p.dims.grid_w
        )));
    }
    if layout.batch == 0 || layout.frames == 0 {
        return Err(Error::shape("empty batch or clip"));
    }
    Ok(())
}

fn pose_forward(
    p: &DenoiserParams,
    cells: &Matrix,
    layout: FrameLayout,
    temporal_on: bool,
) -> Result<(Vec<Matrix>, PoseCache)> {
    if cells.dim() != (layout.rows(), CELL_FEATURES) {
        return Err(Error::shape(format!(
            "pose features {:?}, expected {} rows of {CELL_FEATURES} (frame count mismatch?)",
            cells.dim(),
            layout.rows()
        )));
    }
    let pb = &p.pose_branch;
    let hidden = tanh_layer(cells, &pb.conv, &pb.conv_bias);
    let run_temporal = temporal_on && layout.frames > 1;
    let mut residuals = Vec::with_capacity(p.dims.blocks);
    let mut temporal = Vec::with_capacity(p.dims.blocks);
    for k in 0..p.dims.blocks {
        let mut r = hidden.dot(&pb.heads[k]);
        r += &pb.head_bias[k];
        if run_temporal {
            let layer = &p.pose_temporal[k];
            let (t, cache) = temporal_forward(&r, layout, &layer.attn, None)?;
            r += &t.dot(&layer.out);
            temporal.push(Some((cache, t)));
        } else {
            temporal.push(None);
        }
        residuals.push(r);
    }
    Ok((residuals, PoseCache { hidden, temporal }))
}

fn pose_backward(
    p: &DenoiserParams,
    cache: &PoseCache,
    d_res: &[Matrix],
    grads: &mut DenoiserParams,
) {
    let _ = &cache.hidden;
    for (k, entry) in cache.temporal.iter().enumerate() {
        let Some((tc, t)) = entry else { continue };
        let layer = &p.pose_temporal[k];
        let g = &mut grads.pose_temporal[k];
        g.out += &t.t().dot(&d_res[k]);
        let d_t = d_res[k].dot(&layer.out.t());
        let tg = temporal_backward(tc, &layer.attn, &d_t);
        g.attn.wq += &tg.dw.wq;
        g.attn.wk += &tg.dw.wk;
        g.attn.wv += &tg.dw.wv;
    }
}

fn appearance_forward(
    p: &DenoiserParams,
    cells: &Matrix,
) -> Result<(Vec<Matrix>, AppearanceCache)> {
    if cells.ncols() != CELL_FEATURES {
        return Err(Error::shape(format!(
            "source features have {} columns, expected {CELL_FEATURES}",
            cells.ncols()
        )));
    }
    let ae = &p.appearance;
    let hidden = tanh_layer(cells, &ae.conv, &ae.conv_bias);
    let projected: Vec<Matrix> = ae.proj.iter().map(|w| hidden.dot(w)).collect();
    let tokens = projected
        .iter()
        .zip(&ae.gate)
        .map(|(x, g)| x * g[[0, 0]])
        .collect();
    Ok((
        tokens,
        AppearanceCache {
            cells: cells.clone(),
            hidden,
            projected,
        },
    ))
}

fn appearance_backward(
    p: &DenoiserParams,
    cache: &AppearanceCache,
    d_tokens: &[Matrix],
    grads: &mut DenoiserParams,
) {
    let ae = &p.appearance;
    let g = &mut grads.appearance;
    let mut d_hidden = Matrix::zeros(cache.hidden.raw_dim());
    for k in 0..ae.proj.len() {
        let gate = ae.gate[k][[0, 0]];
        g.gate[k][[0, 0]] += (&cache.projected[k] * &d_tokens[k]).sum();
        let d_proj = &d_tokens[k] * gate;
        g.proj[k] += &cache.hidden.t().dot(&d_proj);
        d_hidden += &d_proj.dot(&ae.proj[k].t());
    }
    let d_pre = d_hidden * &cache.hidden.mapv(|a| 1.0 - a * a);
    g.conv += &cache.cells.t().dot(&d_pre);
    g.conv_bias += &d_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
}

fn denoise_forward(
    p: &DenoiserParams,
    x: &Matrix,
    timesteps: &[usize],
    cond: &Conditioning,
    temps: Option<&[f64]>,
) -> Result<(Matrix, DenoiseCache)> {
    let layout = cond.layout;
    let c = p.dims.channels;
    let n = layout.locations;
    if x.dim() != (layout.rows(), c) {
        return Err(Error::shape(format!(
            "latent tokens {:?}, expected ({}, {c})",
            x.dim(),
            layout.rows()
        )));
    }
    if timesteps.len() != layout.batch {
        return Err(Error::shape("one timestep per batch element required"));
    }
    let mut h = x.clone();
    for (b, &t) in timesteps.iter().enumerate() {
        let emb = ndarray::Array1::from(timestep_embedding(t, c));
        let rows = s![
            layout.row(b, 0, 0)..layout.row(b, 0, 0) + layout.frames * n,
            ..
        ];
        h.slice_mut(rows)
            .zip_mut_with(&emb.insert_axis(Axis(0)), |a, e| *a += e);
    }

    let mut blocks = Vec::with_capacity(p.dims.blocks);
    for k in 0..p.dims.blocks {
        let blk = &p.base.blocks[k];
        let u = &h + &cond.pose[k];

        let mut attn = Matrix::zeros(u.raw_dim());
        let mut spatial = Vec::with_capacity(layout.batch * layout.frames);
        for b in 0..layout.batch {
            let z_a = cond.appearance[k]
                .slice(s![b * n..(b + 1) * n, ..])
                .to_owned();
            for f in 0..layout.frames {
                let r0 = layout.row(b, f, 0);
                let z = u.slice(s![r0..r0 + n, ..]).to_owned();
                let (o, cache) = spatial_forward(&z, &z_a, &blk.attn, Some(&p.lora[k]))?;
                attn.slice_mut(s![r0..r0 + n, ..]).assign(&o);
                spatial.push(cache);
            }
        }
        let mut h1 = u;
        h1 += &attn.dot(&blk.attn_out);

        let temporal = if layout.frames > 1 {
            let layer = &p.temporal[k];
            let (t, cache) = temporal_forward(&h1, layout, &layer.attn, temps)?;
            h1 += &t.dot(&layer.out);
            Some((cache, t))
        } else {
            None
        };

        let ff_act = tanh_layer(&h1, &blk.ff_in, &blk.ff_bias);
        h1 += &ff_act.dot(&blk.ff_out);
        h = h1;
        blocks.push(BlockCache {
            spatial,
            temporal,
            ff_act,
        });
    }
    let mut eps = h.dot(&p.base.out);
    eps += &p.base.out_bias;
    Ok((eps, DenoiseCache { blocks, hidden: h }))
}

fn add_lora(acc: &mut LoraDelta, g: &LoraDelta) {
    acc.b_q += &g.b_q;
    acc.b_k += &g.b_k;
    acc.b_v += &g.b_v;
    acc.a_q += &g.a_q;
    acc.a_k += &g.a_k;
    acc.a_v += &g.a_v;
}

/// Returns the gradients reaching the pose residuals and appearance tokens.
fn denoise_backward(
    p: &DenoiserParams,
    cache: &DenoiseCache,
    layout: FrameLayout,
    d_eps: &Matrix,
    grads: &mut DenoiserParams,
) -> (Vec<Matrix>, Vec<Matrix>) {
    let _ = &cache.hidden;
    let n = layout.locations;
    let blocks = p.dims.blocks;
    let mut d_pose = vec![Matrix::zeros((0, 0)); blocks];
    let mut d_app = vec![Matrix::zeros((0, 0)); blocks];
    let mut dh = d_eps.dot(&p.base.out.t());

    for k in (0..blocks).rev() {
        let blk = &p.base.blocks[k];
        let bc = &cache.blocks[k];

        let d_act = dh.dot(&blk.ff_out.t()) * &bc.ff_act.mapv(|a| 1.0 - a * a);
        dh += &d_act.dot(&blk.ff_in.t());

        if let Some((tc, t)) = &bc.temporal {
            let layer = &p.temporal[k];
            grads.temporal[k].out += &t.t().dot(&dh);
            let d_t = dh.dot(&layer.out.t());
            let tg = temporal_backward(tc, &layer.attn, &d_t);
            let ga = &mut grads.temporal[k].attn;
            ga.wq += &tg.dw.wq;
            ga.wk += &tg.dw.wk;
            ga.wv += &tg.dw.wv;
            dh += &tg.dx;
        }

        let d_attn = dh.dot(&blk.attn_out.t());
        let mut d_za = Matrix::zeros((layout.batch * n, p.dims.channels));
        for b in 0..layout.batch {
            for f in 0..layout.frames {
                let r0 = layout.row(b, f, 0);
                let sc = &bc.spatial[b * layout.frames + f];
                let dout = d_attn.slice(s![r0..r0 + n, ..]).to_owned();
                let g = spatial_backward(sc, &blk.attn, Some(&p.lora[k]), &dout);
                dh.slice_mut(s![r0..r0 + n, ..])
                    .zip_mut_with(&g.dz, |a, d| *a += d);
                d_za.slice_mut(s![b * n..(b + 1) * n, ..])
                    .zip_mut_with(&g.dz_a, |a, d| *a += d);
                add_lora(&mut grads.lora[k], g.dlora.as_ref().expect("lora grads"));
            }
        }
        d_pose[k] = dh.clone();
        d_app[k] = d_za;
    }
    (d_pose, d_app)
}

/// Pose residuals and appearance tokens for a batch.
///
/// `pose_cells` has one row per latent token (see [`frames_cell_features`]),
/// `source_cells` one row per location per batch element.
pub fn condition(
    p: &DenoiserParams,
    pose_cells: &Matrix,
    source_cells: &Matrix,
    layout: FrameLayout,
    temporal_on: bool,
) -> Result<Conditioning> {
    check_layout(p, layout)?;
    if source_cells.nrows() != layout.batch * layout.locations {
        return Err(Error::shape(format!(
            "source features have {} rows, expected {}",
            source_cells.nrows(),
            layout.batch * layout.locations
        )));
    }
    let (pose, _) = pose_forward(p, pose_cells, layout, temporal_on)?;
    let (appearance, _) = appearance_forward(p, source_cells)?;
    Ok(Conditioning {
        layout,
        pose,
        appearance,
    })
}

/// Conditioning for a single clip from rendered pose frames and a source
/// image, at the model's latent grid.
pub fn condition_clip(
    p: &DenoiserParams,
    pose_images: &[RgbImage],
    source: &RgbImage,
) -> Result<Conditioning> {
    let (h, w) = (p.dims.grid_h, p.dims.grid_w);
    let layout = FrameLayout {
        batch: 1,
        frames: pose_images.len(),
        locations: h * w,
    };
    condition(
        p,
        &frames_cell_features(pose_images, h, w),
        &cell_features(source, h, w),
        layout,
        true,
    )
}

/// Per-block pose residuals for rendered pose frames of one clip. With
/// `temporal_on`, each residual also passes through the pose branch's
/// temporal layer.
pub fn pose_encode(
    p: &DenoiserParams,
    pose_images: &[RgbImage],
    temporal_on: bool,
) -> Result<Vec<Matrix>> {
    let (h, w) = (p.dims.grid_h, p.dims.grid_w);
    let layout = FrameLayout {
        batch: 1,
        frames: pose_images.len(),
        locations: h * w,
    };
    check_layout(p, layout)?;
    let (res, _) = pose_forward(
        p,
        &frames_cell_features(pose_images, h, w),
        layout,
        temporal_on,
    )?;
    Ok(res)
}

fn check_latent(p: &DenoiserParams, z: &LatentVideo, cond: &Conditioning) -> Result<()> {
    let (b, c, f, h, w) = z.dims();
    let l = cond.layout;
    if c != p.dims.channels
        || (h, w) != (p.dims.grid_h, p.dims.grid_w)
        || b != l.batch
        || f != l.frames
    {
        return Err(Error::shape(format!(
            "latent {:?} does not match model c={} grid {}x{} / conditioning {:?}",
            z.dims(),
            p.dims.channels,
            p.dims.grid_h,
            p.dims.grid_w,
            l
        )));
    }
    Ok(())
}

fn tmap_values<'a>(
    p: &DenoiserParams,
    tmap: Option<&'a TemperatureMap>,
) -> Result<Option<&'a [f64]>> {
    match tmap {
        Some(t) if (t.height, t.width) != (p.dims.grid_h, p.dims.grid_w) => {
            Err(Error::shape(format!(
                "temperature map is {}x{}, latent grid is {}x{}",
                t.height, t.width, p.dims.grid_h, p.dims.grid_w
            )))
        }
        Some(t) => Ok(Some(&t.values)),
        None => Ok(None),
    }
}

/// Predicted noise for `z_t` at step `t` (shared by the whole batch).
pub fn eps_predict(
    p: &DenoiserParams,
    z_t: &LatentVideo,
    t: usize,
    cond: &Conditioning,
    tmap: Option<&TemperatureMap>,
) -> Result<LatentVideo> {
    check_latent(p, z_t, cond)?;
    let temps = tmap_values(p, tmap)?;
    let l = cond.layout;
    let (eps, _) = denoise_forward(p, &z_t.to_tokens(), &vec![t; l.batch], cond, temps)?;
    LatentVideo::from_tokens(&eps, l.batch, l.frames, p.dims.grid_h, p.dims.grid_w)
}

/// Frame-by-frame attention probabilities of every denoiser temporal layer,
/// averaged over heads: `maps[block][location]` is an `f × f` matrix.
pub fn temporal_attention_maps(
    p: &DenoiserParams,
    z_t: &LatentVideo,
    t: usize,
    cond: &Conditioning,
    tmap: Option<&TemperatureMap>,
) -> Result<Vec<Vec<Matrix>>> {
    check_latent(p, z_t, cond)?;
    let l = cond.layout;
    if l.frames < 2 || l.batch != 1 {
        return Err(Error::invalid(
            "attention maps need one clip of at least 2 frames",
        ));
    }
    let temps = tmap_values(p, tmap)?;
    let (_, cache) = denoise_forward(p, &z_t.to_tokens(), &[t], cond, temps)?;
    Ok(cache
        .blocks
        .iter()
        .map(|bc| {
            let (tc, _) = bc.temporal.as_ref().expect("multi-frame clip");
            (0..l.locations)
                .map(|loc| {
                    let heads = p.dims.heads;
                    let mut mean = Matrix::zeros((l.frames, l.frames));
                    for hd in 0..heads {
                        mean += tc.probs(0, loc, hd);
                    }
                    mean / heads as f64
                })
                .collect()
        })
        .collect())
}

/// One optimization batch: noisy latents with their noise and conditioning
/// features.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub layout: FrameLayout,
    pub x_t: Matrix,
    pub timesteps: Vec<usize>,
    pub eps: Matrix,
    pub pose_cells: Matrix,
    pub source_cells: Matrix,
}

struct FullForward {
    eps_hat: Matrix,
    pose: PoseCache,
    app: AppearanceCache,
    denoise: DenoiseCache,
}

fn full_forward(p: &DenoiserParams, batch: &TrainBatch) -> Result<FullForward> {
    let layout = batch.layout;
    check_layout(p, layout)?;
    if batch.eps.dim() != batch.x_t.dim() {
        return Err(Error::shape("noise and latent shapes differ"));
    }
    let (pose_res, pose) = pose_forward(p, &batch.pose_cells, layout, true)?;
    let (app_tokens, app) = appearance_forward(p, &batch.source_cells)?;
    let cond = Conditioning {
        layout,
        pose: pose_res,
        appearance: app_tokens,
    };
    let (eps_hat, denoise) = denoise_forward(p, &batch.x_t, &batch.timesteps, &cond, None)?;
    Ok(FullForward {
        eps_hat,
        pose,
        app,
        denoise,
    })
}

/// Squared error summed over channels, averaged over tokens.
pub fn loss(p: &DenoiserParams, batch: &TrainBatch) -> Result<f64> {
    let fwd = full_forward(p, batch)?;
    let diff = &fwd.eps_hat - &batch.eps;
    Ok(diff.mapv(|d| d * d).sum() / batch.layout.rows() as f64)
}

/// Loss and its gradient with respect to every group that can be trained
/// (frozen-always groups get zero gradients).
pub fn loss_and_grad(p: &DenoiserParams, batch: &TrainBatch) -> Result<(f64, DenoiserParams)> {
    let fwd = full_forward(p, batch)?;
    let rows = batch.layout.rows() as f64;
    let diff = &fwd.eps_hat - &batch.eps;
    let loss = diff.mapv(|d| d * d).sum() / rows;
    let d_eps = diff * (2.0 / rows);

    let mut grads = p.zeros_like();
    let (d_pose, d_app) = denoise_backward(p, &fwd.denoise, batch.layout, &d_eps, &mut grads);
    pose_backward(p, &fwd.pose, &d_pose, &mut grads);
    appearance_backward(p, &fwd.app, &d_app, &mut grads);
    Ok((loss, grads))
}

/// Groups that receive gradients: everything ever trained in either stage.
pub const LEARNABLE: [Group; 4] = [
    Group::AppearanceEncoder,
    Group::Lora,
    Group::PoseTemporal,
    Group::DenoiserTemporal,
];

/// Full-model loss as a function of all learnable parameters.
pub struct ModelProbe {
    pub params: DenoiserParams,
    pub batch: TrainBatch,
}

impl Differentiable for ModelProbe {
    fn params(&self) -> Vec<f64> {
        flatten(
            LEARNABLE
                .iter()
                .flat_map(|&g| self.params.tensors(g).into_iter().map(|(_, t)| t)),
        )
    }

    fn set_params(&mut self, params: &[f64]) {
        let mut rest = params;
        for &g in &LEARNABLE {
            let tensors: Vec<&mut Matrix> = self
                .params
                .tensors_mut(g)
                .into_iter()
                .map(|(_, t)| t)
                .collect();
            let n: usize = tensors.iter().map(|t| t.len()).sum();
            unflatten(tensors, &rest[..n]);
            rest = &rest[n..];
        }
    }

    fn loss(&self) -> f64 {
        loss(&self.params, &self.batch).expect("probe batch is consistent")
    }

    fn gradient(&self) -> Vec<f64> {
        let (_, g) = loss_and_grad(&self.params, &self.batch).expect("probe batch is consistent");
        flatten(
            LEARNABLE
                .iter()
                .flat_map(|&grp| g.tensors(grp).into_iter().map(|(_, t)| t)),
        )
    }
}
