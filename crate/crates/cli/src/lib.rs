//! `tcan` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 unreadable or malformed input,
//! 3 numerical failure (a non-finite loss, gradient or output).

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use tcan_core::diffusion::checkpoint;
use tcan_core::diffusion::codec::LatentCodec;
use tcan_core::diffusion::config::TrainConfig;
use tcan_core::diffusion::dataset::{make_synthetic_dataset, DatasetSpec};
use tcan_core::diffusion::model::temporal_attention_maps;
use tcan_core::diffusion::params::{DenoiserParams, Stage};
use tcan_core::diffusion::sample::window_conditioning;
use tcan_core::diffusion::train::train;
use tcan_core::image::{pgm16, quantize_u16};
use tcan_core::longvideo::{plan_windows, sample_long};
use tcan_core::pose::{default_stroke, parse_pose_sequence, rasterize_pose, PoseSequence};
use tcan_core::ptm::{pose_temperature_map, DEFAULT_TAU};
use tcan_core::retarget::{retarget_sequence, RetargetConfig};
use tcan_core::{Error, LatentVideo, RgbImage, SkeletonTopology, SplitMix64};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "tcan",
    version,
    about = "Pose-driven animation toolkit: re-targeting, temperature maps, toy diffusion training and sampling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a pose-sequence file and check its invariants.
    Validate {
        /// Pose-sequence JSON file.
        path: PathBuf,
    },
    /// Render every pose frame as an OpenPose-style skeleton (PPM).
    Rasterize {
        /// Pose-sequence JSON file.
        #[arg(long = "in")]
        input: PathBuf,
        /// Receives frame_0000.ppm, frame_0001.ppm, ...
        #[arg(long)]
        out_dir: PathBuf,
        /// Stroke width in pixels [default: max(1, round(min(W, H) / 64))].
        #[arg(long)]
        stroke: Option<usize>,
    },
    /// Transfer the source body's bone proportions onto a driving sequence.
    Retarget {
        /// Pose file whose first frame gives the source proportions.
        #[arg(long)]
        source: PathBuf,
        /// Driving pose sequence; its first frame is the reference frame.
        #[arg(long)]
        driving: PathBuf,
        /// Retargeted sequence (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Pose-driven temperature map of a pose window (TMAP file).
    Ptm {
        /// Pose window; every frame contributes to the mask.
        #[arg(long)]
        poses: PathBuf,
        /// Temperature gain: T = 1 + tau * D.
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also write a 16-bit PGM preview spanning [1, 2*tau + 1].
        #[arg(long)]
        preview: Option<PathBuf>,
        /// Stroke width in pixels [default: max(1, round(min(W, H) / 64))].
        #[arg(long)]
        stroke: Option<usize>,
    },
    /// Write the synthetic blob dataset (source image, poses, target frames).
    Dataset {
        /// Number of clips.
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// One sample_NNN directory per clip is created here.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run one training stage on the synthetic dataset.
    Train {
        /// `key = value` training config.
        #[arg(long)]
        config: PathBuf,
        /// Starting checkpoint; required for stage 2 [default: fresh parameters].
        #[arg(long)]
        in_ckpt: Option<PathBuf>,
        /// Checkpoint written after the last step.
        #[arg(long)]
        out_ckpt: PathBuf,
        /// Synthetic clips to generate (seeded by the config seed).
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Write the per-step loss trace, one value per line.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Sample a long clip with window fusion and decode it to PPM frames.
    Animate {
        /// Checkpoint from `train` (normally stage 2).
        #[arg(long)]
        ckpt: PathBuf,
        /// Source image (PPM); output frames share its size.
        #[arg(long)]
        source: PathBuf,
        /// Driving pose sequence, usually the output of `retarget`.
        #[arg(long)]
        poses: PathBuf,
        /// Frames to generate [default: every pose frame].
        #[arg(long)]
        frames: Option<usize>,
        /// Frames per denoising window; must match the checkpoint's training clips.
        #[arg(long, default_value_t = 8)]
        window: usize,
        /// Window stride [default: window / 2].
        #[arg(long)]
        stride: Option<usize>,
        /// Temperature gain of the pose-driven map.
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        /// Seed of the sampling noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Config supplying the noise schedule (T, beta1, betaT) [default: built-in defaults].
        #[arg(long)]
        config: Option<PathBuf>,
        /// Receives frame_0000.ppm, frame_0001.ppm, ...
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Dump per-location temporal attention blocks of every denoiser block as PGM.
    InspectAttn {
        #[arg(long)]
        ckpt: PathBuf,
        /// Pose window; only its first `window` frames are used.
        #[arg(long)]
        poses: PathBuf,
        /// Receives block{k}_ptm.pgm and block{k}_plain.pgm.
        #[arg(long)]
        out_dir: PathBuf,
        /// Source image (PPM) [default: black canvas].
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        window: usize,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        /// Seed of the noisy latent that is inspected.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Diffusion step fed to the timestep embedding.
        #[arg(long, default_value_t = 100)]
        step: usize,
    },
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: msg.into(),
        }
    }

    /// Classifies a core error raised while processing `context`.
    fn from_core(context: &str, err: Error) -> Self {
        let code = match err {
            Error::NonFinite(_) => EXIT_NUMERIC,
            Error::InvalidArgument(_) => EXIT_USAGE,
            _ => EXIT_INPUT,
        };
        Self {
            code,
            message: format!("{context}: {err}"),
        }
    }

    /// A core error caused by the contents of `path`.
    fn input(path: &Path, err: Error) -> Self {
        let code = if err.is_numerical() {
            EXIT_NUMERIC
        } else {
            EXIT_INPUT
        };
        Self {
            code,
            message: format!("{}: {err}", path.display()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| Failure {
        code: EXIT_INPUT,
        message: format!("{}: {e}", path.display()),
    })
}

fn read_poses(path: &Path) -> CliResult<PoseSequence> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Failure {
        code: EXIT_INPUT,
        message: format!("{}: not UTF-8", path.display()),
    })?;
    parse_pose_sequence(&text).map_err(|e| Failure::input(path, e))
}

fn read_image(path: &Path) -> CliResult<RgbImage> {
    RgbImage::from_ppm(&read(path)?).map_err(|e| Failure::input(path, e))
}

fn read_config(path: &Path) -> CliResult<TrainConfig> {
    let text = String::from_utf8(read(path)?).map_err(|_| Failure {
        code: EXIT_INPUT,
        message: format!("{}: not UTF-8", path.display()),
    })?;
    TrainConfig::parse(&text).map_err(|e| Failure {
        code: EXIT_INPUT,
        message: format!("{}: {e}", path.display()),
    })
}

fn read_checkpoint(path: &Path) -> CliResult<DenoiserParams> {
    checkpoint::from_bytes(&read(path)?).map_err(|e| Failure::input(path, e))
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_INPUT,
        message: format!("{}: {e}", path.display()),
    }
}

/// Writes through a temporary file in the destination directory, then
/// renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_failure(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_failure(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_failure(path, e))?;
    tmp.persist(path).map_err(|e| io_failure(path, e.error))?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn frame_name(i: usize) -> String {
    format!("frame_{i:04}.ppm")
}

fn validate(path: &Path) -> CliResult {
    let seq = read_poses(path)?;
    let present: usize = seq
        .frames
        .iter()
        .map(|f| f.keypoints.iter().filter(|k| k.is_present()).count())
        .sum();
    println!(
        "{}: ok, {} frames, {}x{} canvas, {} of {} keypoints present",
        path.display(),
        seq.len(),
        seq.width,
        seq.height,
        present,
        seq.len() * tcan_core::pose::NUM_KEYPOINTS
    );
    Ok(())
}

fn check_stroke(stroke: Option<usize>, seq: &PoseSequence) -> CliResult<usize> {
    match stroke {
        Some(0) => Err(Failure::usage("--stroke must be at least 1")),
        Some(s) => Ok(s),
        None => Ok(default_stroke(seq.width, seq.height)),
    }
}

fn rasterize(input: &Path, out_dir: &Path, stroke: Option<usize>) -> CliResult {
    let seq = read_poses(input)?;
    let stroke = check_stroke(stroke, &seq)?;
    ensure_dir(out_dir)?;
    let topo = SkeletonTopology::body18();
    for (i, frame) in seq.frames.iter().enumerate() {
        let img = rasterize_pose(frame, seq.width, seq.height, &topo, stroke);
        write_atomic(&out_dir.join(frame_name(i)), &img.to_ppm())?;
    }
    println!("wrote {} frames to {}", seq.len(), out_dir.display());
    Ok(())
}

fn retarget(source: &Path, driving: &Path, out: &Path) -> CliResult {
    let src = read_poses(source)?;
    let drv = read_poses(driving)?;
    let result = retarget_sequence(
        &drv,
        &src.frames[0],
        &SkeletonTopology::body18(),
        &RetargetConfig::default(),
    )
    .map_err(|e| Failure::input(driving, e))?;
    write_atomic(out, result.to_json().as_bytes())?;
    println!(
        "wrote {} re-targeted frames to {}",
        result.len(),
        out.display()
    );
    Ok(())
}

fn check_tau(tau: f64) -> CliResult {
    if tau.is_finite() && tau >= 0.0 {
        Ok(())
    } else {
        Err(Failure::usage(format!(
            "--tau must be a finite non-negative number, got {tau}"
        )))
    }
}

fn ptm(
    poses: &Path,
    tau: f64,
    out: &Path,
    preview: Option<&Path>,
    stroke: Option<usize>,
) -> CliResult {
    check_tau(tau)?;
    let seq = read_poses(poses)?;
    let stroke = check_stroke(stroke, &seq)?;
    let map = pose_temperature_map(&seq, &SkeletonTopology::body18(), stroke, tau)
        .map_err(|e| Failure::input(poses, e))?;
    write_atomic(out, &map.to_tmap_bytes())?;
    if let Some(p) = preview {
        write_atomic(p, &map.to_pgm_preview())?;
    }
    let max = map.values.iter().cloned().fold(f64::MIN, f64::max);
    println!(
        "wrote {}x{} temperature map to {} (max {max})",
        map.width,
        map.height,
        out.display()
    );
    Ok(())
}

fn dataset(n: usize, seed: u64, out_dir: &Path) -> CliResult {
    if n == 0 {
        return Err(Failure::usage("--n must be at least 1"));
    }
    let cfg = TrainConfig::default();
    let data = make_synthetic_dataset(n, seed, &DatasetSpec::new(cfg.c, cfg.h, cfg.w))
        .map_err(|e| Failure::from_core("dataset", e))?;
    for (i, s) in data.iter().enumerate() {
        let dir = out_dir.join(format!("sample_{i:03}"));
        ensure_dir(&dir)?;
        write_atomic(&dir.join("source.ppm"), &s.source.to_ppm())?;
        write_atomic(&dir.join("poses.json"), s.poses.to_json().as_bytes())?;
        for (j, f) in s.frames.iter().enumerate() {
            write_atomic(&dir.join(frame_name(j)), &f.to_ppm())?;
        }
    }
    println!("wrote {n} samples to {}", out_dir.display());
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn run_train(
    config: &Path,
    in_ckpt: Option<&Path>,
    out_ckpt: &Path,
    n: usize,
    trace: Option<&Path>,
) -> CliResult {
    let cfg = read_config(config)?;
    if n == 0 {
        return Err(Failure::usage("--n must be at least 1"));
    }
    let params = match in_ckpt {
        Some(p) => read_checkpoint(p)?,
        None if cfg.stage == Stage::Two => {
            return Err(Failure::usage(
                "stage 2 needs --in-ckpt with stage-1 parameters",
            ))
        }
        None => {
            DenoiserParams::init(cfg.dims(), cfg.seed).map_err(|e| Failure::input(config, e))?
        }
    };
    let data = make_synthetic_dataset(n, cfg.seed, &DatasetSpec::new(cfg.c, cfg.h, cfg.w))
        .map_err(|e| Failure::from_core("dataset", e))?;
    let outcome = train(params, &data, &cfg).map_err(|e| Failure::from_core("train", e))?;
    if let Some(p) = trace {
        let text: String = outcome.losses.iter().map(|l| format!("{l:e}\n")).collect();
        write_atomic(p, text.as_bytes())?;
    }
    write_atomic(out_ckpt, &checkpoint::to_bytes(&outcome.params))?;
    let l = &outcome.losses;
    if l.is_empty() {
        println!(
            "stage {}: 0 steps, parameters unchanged",
            cfg.stage.number()
        );
    } else {
        let k = l.len().min(50);
        println!(
            "stage {}: {} steps, first-{k} mean loss {:.4}, last-{k} mean loss {:.4}",
            cfg.stage.number(),
            l.len(),
            mean(&l[..k]),
            mean(&l[l.len() - k..])
        );
    }
    println!("wrote {}", out_ckpt.display());
    Ok(())
}

struct AnimateArgs<'a> {
    ckpt: &'a Path,
    source: &'a Path,
    poses: &'a Path,
    frames: Option<usize>,
    window: usize,
    stride: Option<usize>,
    tau: f64,
    seed: u64,
    config: Option<&'a Path>,
    out_dir: &'a Path,
}

fn animate(a: AnimateArgs<'_>) -> CliResult {
    check_tau(a.tau)?;
    let params = read_checkpoint(a.ckpt)?;
    let source = read_image(a.source)?;
    let seq = read_poses(a.poses)?;
    let cfg = match a.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    let total = a.frames.unwrap_or(seq.len());
    if total == 0 || total > seq.len() {
        return Err(Failure::usage(format!(
            "--frames {total} outside 1..={} (pose frames available)",
            seq.len()
        )));
    }
    let stride = a.stride.unwrap_or((a.window / 2).max(1));
    let plan =
        plan_windows(total, a.window, stride).map_err(|e| Failure::from_core("window plan", e))?;
    let poses = seq
        .slice(0, total)
        .map_err(|e| Failure::input(a.poses, e))?;
    let sched = cfg
        .schedule()
        .map_err(|e| Failure::from_core("schedule", e))?;
    let z = sample_long(&params, &source, &poses, &sched, &plan, Some(a.tau), a.seed)
        .map_err(|e| Failure::from_core("animate", e))?;
    if !z.is_finite() {
        return Err(Failure {
            code: EXIT_NUMERIC,
            message: "animate: sampled latent is not finite".into(),
        });
    }
    let codec = LatentCodec::new(params.dims.channels).map_err(|e| Failure::input(a.ckpt, e))?;
    ensure_dir(a.out_dir)?;
    for i in 0..total {
        let img = codec
            .decode_frame(&z, 0, i, source.width(), source.height())
            .map_err(|e| Failure::from_core("decode", e))?;
        write_atomic(&a.out_dir.join(frame_name(i)), &img.to_ppm())?;
    }
    println!(
        "wrote {total} frames ({} windows of {}, stride {stride}) to {}",
        plan.windows.len(),
        a.window,
        a.out_dir.display()
    );
    Ok(())
}

/// Tiles `maps[location]` (each `f × f`) into an `(h·f) × (w·f)` image.
fn tile_attention(maps: &[tcan_core::Matrix], h: usize, w: usize, f: usize) -> Vec<u8> {
    let (width, height) = (w * f, h * f);
    let mut values = vec![0.0; width * height];
    for y in 0..h {
        for x in 0..w {
            let m = &maps[y * w + x];
            for i in 0..f {
                for j in 0..f {
                    values[(y * f + i) * width + x * f + j] = m[[i, j]];
                }
            }
        }
    }
    pgm16(width, height, &quantize_u16(&values, 0.0, 1.0))
}

struct InspectArgs<'a> {
    ckpt: &'a Path,
    poses: &'a Path,
    out_dir: &'a Path,
    source: Option<&'a Path>,
    window: usize,
    tau: f64,
    seed: u64,
    step: usize,
}

fn inspect_attn(a: InspectArgs<'_>) -> CliResult {
    check_tau(a.tau)?;
    if a.step == 0 {
        return Err(Failure::usage("--step must be at least 1"));
    }
    let params = read_checkpoint(a.ckpt)?;
    let seq = read_poses(a.poses)?;
    let f = a.window.min(seq.len());
    if f < 2 {
        return Err(Failure::usage(
            "temporal attention needs a window of at least 2 frames",
        ));
    }
    let source = match a.source {
        Some(p) => read_image(p)?,
        None => RgbImage::black(seq.width, seq.height),
    };
    let poses = seq.slice(0, f).map_err(|e| Failure::input(a.poses, e))?;
    let (cond, tmap) = window_conditioning(&params, &source, &poses, Some(a.tau))
        .map_err(|e| Failure::from_core("conditioning", e))?;
    let d = params.dims;
    let mut rng = SplitMix64::new(a.seed);
    let z = LatentVideo::from_fn((1, d.channels, f, d.grid_h, d.grid_w), || rng.normal());
    let tempered = temporal_attention_maps(&params, &z, a.step, &cond, tmap.as_ref())
        .map_err(|e| Failure::from_core("attention", e))?;
    let plain = temporal_attention_maps(&params, &z, a.step, &cond, None)
        .map_err(|e| Failure::from_core("attention", e))?;
    ensure_dir(a.out_dir)?;
    for (k, (t, p)) in tempered.iter().zip(&plain).enumerate() {
        write_atomic(
            &a.out_dir.join(format!("block{k}_ptm.pgm")),
            &tile_attention(t, d.grid_h, d.grid_w, f),
        )?;
        write_atomic(
            &a.out_dir.join(format!("block{k}_plain.pgm")),
            &tile_attention(p, d.grid_h, d.grid_w, f),
        )?;
    }
    println!(
        "wrote {} blocks of {}x{} tiled {f}x{f} attention maps to {}",
        tempered.len(),
        d.grid_h,
        d.grid_w,
        a.out_dir.display()
    );
    Ok(())
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Validate { path } => validate(&path),
        Command::Rasterize {
            input,
            out_dir,
            stroke,
        } => rasterize(&input, &out_dir, stroke),
        Command::Retarget {
            source,
            driving,
            out,
        } => retarget(&source, &driving, &out),
        Command::Ptm {
            poses,
            tau,
            out,
            preview,
            stroke,
        } => ptm(&poses, tau, &out, preview.as_deref(), stroke),
        Command::Dataset { n, seed, out_dir } => dataset(n, seed, &out_dir),
        Command::Train {
            config,
            in_ckpt,
            out_ckpt,
            n,
            trace,
        } => run_train(&config, in_ckpt.as_deref(), &out_ckpt, n, trace.as_deref()),
        Command::Animate {
            ckpt,
            source,
            poses,
            frames,
            window,
            stride,
            tau,
            seed,
            config,
            out_dir,
        } => animate(AnimateArgs {
            ckpt: &ckpt,
            source: &source,
            poses: &poses,
            frames,
            window,
            stride,
            tau,
            seed,
            config: config.as_deref(),
            out_dir: &out_dir,
        }),
        Command::InspectAttn {
            ckpt,
            poses,
            out_dir,
            source,
            window,
            tau,
            seed,
            step,
        } => inspect_attn(InspectArgs {
            ckpt: &ckpt,
            poses: &poses,
            out_dir: &out_dir,
            source: source.as_deref(),
            window,
            tau,
            seed,
            step,
        }),
    }
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<S: AsRef<str>>(argv: &[S]) -> i32 {
    let cli = match Cli::try_parse_from(argv.iter().map(|s| s.as_ref())) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}

/// Names of every subcommand, in help order.
pub fn command_names() -> Vec<String> {
    use clap::CommandFactory;
    Cli::command()
        .get_subcommands()
        .map(|c| c.get_name().to_string())
        .collect()
}
