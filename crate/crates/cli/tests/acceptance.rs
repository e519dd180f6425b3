//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use tcan_core::attention::gradcheck::{grad_check, SpatialProbe, TemporalProbe};
use tcan_core::attention::{
    appa_attention, base_attention, softmax_entropy, temporal_attention, AttentionWeights,
    FrameLayout, LatentVideo, LoraDelta, Matrix,
};
use tcan_core::diffusion::checkpoint;
use tcan_core::diffusion::config::TrainConfig;
use tcan_core::diffusion::dataset::{make_synthetic_dataset, DatasetSpec};
use tcan_core::diffusion::model::{ModelProbe, TrainBatch};
use tcan_core::diffusion::params::{DenoiserParams, Group, ModelDims, Stage, CELL_FEATURES};
use tcan_core::diffusion::sample::sample;
use tcan_core::diffusion::train::train;
use tcan_core::longvideo::{fused_eps, plan_windows, sample_long};
use tcan_core::pose::{parse_pose_sequence, Keypoint, PoseFrame, PoseSequence, R_WRIST};
use tcan_core::ptm::{distance_map, presence_mask, temperature_map, BinaryMask, TemperatureMap};
use tcan_core::retarget::{bone_lengths, retarget_frame, RetargetConfig};
use tcan_core::{RgbImage, SkeletonTopology, SplitMix64};

type Outcome = Result<String, String>;

const DISTANCE_TOL: f64 = 1e-9;
const TEMPERATURE_TOL: f64 = 1e-12;
const GRAD_REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const RETARGET_TOL: f64 = 1e-9;
const FUSION_TOL: f64 = 1e-12;
/// Last-50 mean loss must fall below this fraction of the first-50 mean.
const LOSS_RATIO: f64 = 0.5;
const ENERGY_BAND: f64 = 3.0;
const DISTANCE_BUDGET: Duration = Duration::from_secs(30);
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const SMOKE_BUDGET: Duration = Duration::from_secs(600);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || {
        format!("took {elapsed:.1?}, limit {limit:?}")
    })
}

// -- criterion 1 -----------------------------------------------------------

fn brute_distance(mask: &BinaryMask) -> Vec<f64> {
    let (w, h) = (mask.width, mask.height);
    let on: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| mask.get(x, y))
        .collect();
    if on.is_empty() {
        return vec![1.0; w * h];
    }
    let norm = ((h as f64 / 2.0).powi(2) + (w as f64 / 2.0).powi(2)).sqrt();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let best = on
                .iter()
                .map(|&(u, v)| (x as f64 - u as f64).hypot(y as f64 - v as f64))
                .fold(f64::INFINITY, f64::min);
            out.push(best / norm);
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let sizes = [4, 8, 16, 32, 64];
    let mut rng = SplitMix64::new(1);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let (h, w) = (sizes[i % 5], sizes[(i / 5) % 5]);
        let density = if i == 0 {
            0.0
        } else {
            rng.uniform_range(0.001, 0.2)
        };
        let mut mask = BinaryMask::empty(w, h);
        for y in 0..h {
            for x in 0..w {
                mask.set(x, y, rng.uniform() < density);
            }
        }
        if i > 0 && mask.count() == 0 {
            mask.set(rng.below(w), rng.below(h), true);
        }
        let got = distance_map(&mask);
        for (a, b) in got.values.iter().zip(brute_distance(&mask)) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= DISTANCE_TOL, || format!("max deviation {worst:e}"))?;
    within(start.elapsed(), DISTANCE_BUDGET)?;
    Ok(format!(
        "50 masks, max deviation {worst:e}, {:.1?}",
        start.elapsed()
    ))
}

// -- criterion 2 -----------------------------------------------------------

fn criterion_2() -> Outcome {
    let mut img = RgbImage::black(4, 4);
    img.set(0, 0, [255, 255, 255]);
    let d = distance_map(&presence_mask(&[img]).map_err(|e| e.to_string())?);
    let t = temperature_map(&d, 3.0).map_err(|e| e.to_string())?;
    ensure(t.get(0, 0) == 1.0, || {
        format!("pose pixel has T = {}", t.get(0, 0))
    })?;
    let far = t.get(3, 3);
    ensure((far - 5.5).abs() <= TEMPERATURE_TOL, || {
        format!("far corner T = {far}")
    })?;

    let mut rng = SplitMix64::new(2);
    for _ in 0..20 {
        let mut mask = BinaryMask::empty(9, 7);
        for y in 0..7 {
            for x in 0..9 {
                mask.set(x, y, rng.uniform() < 0.2);
            }
        }
        let d = distance_map(&mask);
        let tau = rng.uniform_range(0.0, 10.0);
        let t = temperature_map(&d, tau).map_err(|e| e.to_string())?;
        for (dv, tv) in d.values.iter().zip(&t.values) {
            ensure(*dv != 0.0 || *tv == 1.0, || format!("D = 0 but T = {tv}"))?;
        }
    }
    Ok(format!("D = 0 gives T = 1 exactly; far corner T = {far}"))
}

// -- criterion 3 -----------------------------------------------------------

fn criterion_3() -> Outcome {
    let mut rng = SplitMix64::new(3);
    for i in 0..100 {
        let heads = 1 + rng.below(3);
        let c = heads * (1 + rng.below(4));
        let (n, n_a) = (1 + rng.below(10), rng.below(10));
        let rank = 1 + rng.below(c);
        let w = AttentionWeights::random(c, heads, 0.8, &mut rng);
        let delta = LoraDelta::init(c, rank, &mut rng);
        let z = Matrix::from_shape_fn((n, c), |_| rng.normal());
        let z_a = Matrix::from_shape_fn((n_a, c), |_| rng.normal());
        let base = base_attention(&z, &z_a, &w).map_err(|e| e.to_string())?;
        let appa = appa_attention(&z, &z_a, &w, &delta).map_err(|e| e.to_string())?;
        ensure(base == appa, || format!("instance {i} differs"))?;
    }
    Ok("100 random instances bit-identical".into())
}

// -- criterion 4 -----------------------------------------------------------

fn criterion_4() -> Outcome {
    let mut rng = SplitMix64::new(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (f, h, w) = (2 + rng.below(4), 1 + rng.below(3), 1 + rng.below(3));
        let heads = 1 + rng.below(2);
        let c = heads * (1 + rng.below(3));
        let weights = AttentionWeights::random(c, heads, 0.8, &mut rng);
        let z = LatentVideo::from_fn((1 + rng.below(2), c, f, h, w), || rng.normal());
        let plain = temporal_attention(&z, &weights, None).map_err(|e| e.to_string())?;
        let ones = temporal_attention(&z, &weights, Some(&TemperatureMap::identity(w, h)))
            .map_err(|e| e.to_string())?;
        for (a, b) in plain.data.iter().zip(ones.data.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= TEMPERATURE_TOL, || {
        format!("identity map deviates by {worst:e}")
    })?;

    for row in 0..100 {
        let len = 2 + rng.below(15);
        let logits: Vec<f64> = (0..len).map(|_| rng.uniform_range(-8.0, 8.0)).collect();
        let d = rng.uniform_range(0.05, 1.0);
        let entropies: Vec<f64> = [0.0, 1.0, 3.0, 10.0]
            .iter()
            .map(|tau| softmax_entropy(&logits, tau * d + 1.0))
            .collect();
        ensure(entropies.windows(2).all(|p| p[1] >= p[0]), || {
            format!("row {row}: entropies {entropies:?}")
        })?;
    }
    Ok(format!(
        "identity deviation {worst:e}; entropy monotone on 100 rows"
    ))
}

// -- criterion 5 -----------------------------------------------------------

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut rng = SplitMix64::new(5);
    let h = FD_STEP;
    let (c, f, side, heads) = (4, 2, 2, 2);
    let n = side * side;

    let mut base = SpatialProbe::random(n, n, c, heads, None, &mut rng);
    let e_base = grad_check(&mut base, h).map_err(|e| e.to_string())?;
    let mut appa = SpatialProbe::random(n, n, c, heads, Some(2), &mut rng);
    let e_appa = grad_check(&mut appa, h).map_err(|e| e.to_string())?;
    let layout = FrameLayout {
        batch: 1,
        frames: f,
        locations: n,
    };
    let mut temporal = TemporalProbe::random(layout, c, heads, true, &mut rng);
    let e_temp = grad_check(&mut temporal, h).map_err(|e| e.to_string())?;

    let dims = ModelDims::new(c, heads, 2, side, side);
    let mut params = DenoiserParams::init(dims, 5).map_err(|e| e.to_string())?;
    for g in [
        Group::AppearanceEncoder,
        Group::Lora,
        Group::PoseTemporal,
        Group::DenoiserTemporal,
    ] {
        for (_, t) in params.tensors_mut(g) {
            t.mapv_inplace(|v| v + 0.3 * rng.normal());
        }
    }
    let batch = TrainBatch {
        layout,
        x_t: Matrix::from_shape_fn((layout.rows(), c), |_| rng.normal()),
        timesteps: vec![7],
        eps: Matrix::from_shape_fn((layout.rows(), c), |_| rng.normal()),
        pose_cells: Matrix::from_shape_fn((layout.rows(), CELL_FEATURES), |_| rng.uniform()),
        source_cells: Matrix::from_shape_fn((n, CELL_FEATURES), |_| rng.uniform()),
    };
    let mut model = ModelProbe { params, batch };
    let e_model = grad_check(&mut model, h).map_err(|e| e.to_string())?;

    let worst = e_base.max(e_appa).max(e_temp).max(e_model);
    let detail = format!(
        "base {e_base:.1e}, appa {e_appa:.1e}, temporal {e_temp:.1e}, denoiser {e_model:.1e}, {:.1?}",
        start.elapsed()
    );
    ensure(worst <= GRAD_REL_TOL, || detail.clone())?;
    within(start.elapsed(), GRADCHECK_BUDGET)?;
    Ok(detail)
}

// -- criterion 6 -----------------------------------------------------------

fn criterion_6() -> Outcome {
    let cfg1 = TrainConfig {
        steps: 100,
        ..TrainConfig::default()
    };
    let data = make_synthetic_dataset(64, cfg1.seed, &DatasetSpec::new(cfg1.c, cfg1.h, cfg1.w))
        .map_err(|e| e.to_string())?;
    let p0 = DenoiserParams::init(cfg1.dims(), cfg1.seed).map_err(|e| e.to_string())?;
    let one = train(p0.clone(), &data, &cfg1).map_err(|e| e.to_string())?;
    for g in [
        Group::PoseBranch,
        Group::PoseTemporal,
        Group::DenoiserBase,
        Group::DenoiserTemporal,
    ] {
        ensure(one.params.digest(g) == p0.digest(g), || {
            format!("stage 1 changed {g}")
        })?;
    }
    for g in [Group::AppearanceEncoder, Group::Lora] {
        ensure(one.params.digest(g) != p0.digest(g), || {
            format!("stage 1 left {g} untouched")
        })?;
    }
    let cfg2 = TrainConfig {
        stage: Stage::Two,
        ..cfg1
    };
    let two = train(one.params.clone(), &data, &cfg2).map_err(|e| e.to_string())?;
    for g in [
        Group::AppearanceEncoder,
        Group::Lora,
        Group::PoseBranch,
        Group::DenoiserBase,
    ] {
        ensure(two.params.digest(g) == one.params.digest(g), || {
            format!("stage 2 changed {g}")
        })?;
    }
    for g in [Group::PoseTemporal, Group::DenoiserTemporal] {
        ensure(two.params.digest(g) != one.params.digest(g), || {
            format!("stage 2 left {g} untouched")
        })?;
    }
    Ok("frozen digests unchanged after 100 steps of each stage".into())
}

// -- criterion 7 -----------------------------------------------------------

fn random_frame(rng: &mut SplitMix64) -> PoseFrame {
    let mut f = PoseFrame::missing();
    for k in f.keypoints.iter_mut() {
        *k = Keypoint::new(
            rng.uniform_range(0.0, 200.0),
            rng.uniform_range(0.0, 200.0),
            1.0,
        );
    }
    f
}

fn criterion_7() -> Outcome {
    let topo = SkeletonTopology::body18();
    let cfg = RetargetConfig::default();
    let mut rng = SplitMix64::new(7);
    let mut worst_len = 0.0f64;
    let mut worst_dir = 0.0f64;
    let mut done = 0;
    while done < 100 {
        let (cur, init, src) = (
            random_frame(&mut rng),
            random_frame(&mut rng),
            random_frame(&mut rng),
        );
        let (lc, li, ls) = (
            bone_lengths(&cur, &topo),
            bone_lengths(&init, &topo),
            bone_lengths(&src, &topo),
        );
        if [&lc, &li, &ls]
            .iter()
            .any(|l| l.0.iter().any(|b| b.unwrap() < 1.0))
        {
            continue;
        }
        done += 1;
        let out = retarget_frame(&cur, &init, &src, &topo, &cfg).map_err(|e| e.to_string())?;
        for (b, &(p, c)) in topo.bones().iter().enumerate() {
            let want = ls.0[b].unwrap() * lc.0[b].unwrap() / li.0[b].unwrap();
            let v = (out.get(c).x - out.get(p).x, out.get(c).y - out.get(p).y);
            let u = (cur.get(c).x - cur.get(p).x, cur.get(c).y - cur.get(p).y);
            let (lv, lu) = (v.0.hypot(v.1), u.0.hypot(u.1));
            worst_len = worst_len.max((lv - want).abs());
            let (ex, ey) = (v.0 / lv - u.0 / lu, v.1 / lv - u.1 / lu);
            worst_dir = worst_dir.max(ex.hypot(ey));
        }
    }
    ensure(
        worst_len <= RETARGET_TOL && worst_dir <= RETARGET_TOL,
        || format!("length error {worst_len:e}, direction error {worst_dir:e}"),
    )?;

    let cur = random_frame(&mut rng);
    let same = retarget_frame(&cur, &cur, &cur, &topo, &cfg).map_err(|e| e.to_string())?;
    ensure(same == cur, || "identity case moved keypoints".into())?;

    let (mut cur, init, src) = (
        random_frame(&mut rng),
        random_frame(&mut rng),
        random_frame(&mut rng),
    );
    cur.keypoints[R_WRIST] = Keypoint::MISSING;
    let out = retarget_frame(&cur, &init, &src, &topo, &cfg).map_err(|e| e.to_string())?;
    ensure(out.keypoints[R_WRIST] == Keypoint::MISSING, || {
        "missing wrist was moved".into()
    })?;

    Ok(format!("100 triples: length error {worst_len:.1e}, direction error {worst_dir:.1e}; identity exact; missing wrist untouched"))
}

// -- criterion 8 -----------------------------------------------------------

fn criterion_8() -> Outcome {
    let plan = plan_windows(12, 8, 4).map_err(|e| e.to_string())?;
    ensure(
        plan.coverage == [1, 1, 1, 1, 2, 2, 2, 2, 1, 1, 1, 1],
        || format!("coverage {:?}", plan.coverage),
    )?;

    let mut rng = SplitMix64::new(8);
    let z = LatentVideo::from_fn((1, 3, 12, 2, 2), || rng.normal());
    let constant = 0.7310585786300049;
    let fused = fused_eps(&z, &plan, |_, w| {
        let mut out = w.clone();
        out.data.fill(constant);
        Ok(out)
    })
    .map_err(|e| e.to_string())?;
    let worst = fused
        .data
        .iter()
        .map(|v| (v - constant).abs())
        .fold(0.0, f64::max);
    ensure(worst <= FUSION_TOL, || {
        format!("constant predictor deviates by {worst:e}")
    })?;

    let cfg = TrainConfig::default();
    let params = DenoiserParams::init(cfg.dims(), 8).map_err(|e| e.to_string())?;
    let data = make_synthetic_dataset(1, 8, &DatasetSpec::new(cfg.c, cfg.h, cfg.w))
        .map_err(|e| e.to_string())?;
    let poses = data[0].poses.slice(0, cfg.f).map_err(|e| e.to_string())?;
    let sched = cfg.schedule().map_err(|e| e.to_string())?;
    let direct = sample(&params, &data[0].source, &poses, &sched, Some(cfg.tau), 123)
        .map_err(|e| e.to_string())?;
    let single = plan_windows(cfg.f, cfg.f, cfg.f / 2).map_err(|e| e.to_string())?;
    let long = sample_long(
        &params,
        &data[0].source,
        &poses,
        &sched,
        &single,
        Some(cfg.tau),
        123,
    )
    .map_err(|e| e.to_string())?;
    ensure(direct == long, || {
        "F = f sampling differs from direct sampling".into()
    })?;
    Ok(format!(
        "coverage {:?}; constant deviation {worst:e}; F = f bit-identical",
        plan.coverage
    ))
}

// -- criterion 9 -----------------------------------------------------------

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["tcan"];
    argv.extend_from_slice(args);
    tcan_cli::run(&argv)
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Mean energy of a sampled latent and of the training targets.
static SAMPLE_ENERGY: OnceLock<(f64, f64)> = OnceLock::new();

fn trace_ratio(trace: &Path) -> Result<(f64, f64), String> {
    let text = std::fs::read_to_string(trace).map_err(|e| e.to_string())?;
    let losses: Vec<f64> = text.lines().map(|l| l.parse().unwrap()).collect();
    ensure(losses.len() == 500, || {
        format!("{} losses recorded", losses.len())
    })?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((mean(&losses[..50]), mean(&losses[450..])))
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    std::fs::write(d.join("stage1.cfg"), "stage = 1\nseed = 7\nsteps = 500\n").unwrap();
    std::fs::write(d.join("stage2.cfg"), "stage = 2\nseed = 7\nsteps = 500\n").unwrap();
    let (s1, s2, t1, t2) = (
        d.join("s1.tckpt"),
        d.join("s2.tckpt"),
        d.join("t1.txt"),
        d.join("t2.txt"),
    );

    let code = cli(&[
        "train",
        "--config",
        path(&d.join("stage1.cfg")),
        "--out-ckpt",
        path(&s1),
        "--n",
        "64",
        "--trace",
        path(&t1),
    ]);
    ensure(code == 0, || format!("stage-1 train exited {code}"))?;
    let code = cli(&[
        "train",
        "--config",
        path(&d.join("stage2.cfg")),
        "--in-ckpt",
        path(&s1),
        "--out-ckpt",
        path(&s2),
        "--n",
        "64",
        "--trace",
        path(&t2),
    ]);
    ensure(code == 0, || format!("stage-2 train exited {code}"))?;
    let (a1, b1) = trace_ratio(&t1)?;
    let (a2, b2) = trace_ratio(&t2)?;
    let losses = format!(
        "stage 1 {a1:.2} -> {b1:.2} (x{:.3}), stage 2 {a2:.2} -> {b2:.2} (x{:.3})",
        b1 / a1,
        b2 / a2
    );
    ensure(b1 < LOSS_RATIO * a1 && b2 < LOSS_RATIO * a2, || {
        losses.clone()
    })?;

    let code = cli(&[
        "dataset",
        "--n",
        "64",
        "--seed",
        "7",
        "--out-dir",
        path(&d.join("data")),
    ]);
    ensure(code == 0, || format!("dataset exited {code}"))?;
    let sample_dir = d.join("data").join("sample_000");
    let frames_dir = d.join("frames");
    let code = cli(&[
        "animate",
        "--ckpt",
        path(&s2),
        "--source",
        path(&sample_dir.join("source.ppm")),
        "--poses",
        path(&sample_dir.join("poses.json")),
        "--frames",
        "16",
        "--window",
        "8",
        "--stride",
        "4",
        "--seed",
        "7",
        "--out-dir",
        path(&frames_dir),
    ]);
    ensure(code == 0, || format!("animate exited {code}"))?;
    let mut count = 0;
    for i in 0..16 {
        let bytes = std::fs::read(frames_dir.join(format!("frame_{i:04}.ppm")))
            .map_err(|e| e.to_string())?;
        RgbImage::from_ppm(&bytes).map_err(|e| e.to_string())?;
        count += 1;
    }
    ensure(
        std::fs::read_dir(&frames_dir).unwrap().count() == 16,
        || "unexpected extra files".into(),
    )?;

    // Not part of the criterion; reported after the summary.
    let params = checkpoint::from_bytes(&std::fs::read(&s2).unwrap()).map_err(|e| e.to_string())?;
    let cfg = TrainConfig::default();
    let data = make_synthetic_dataset(64, 7, &DatasetSpec::new(cfg.c, cfg.h, cfg.w))
        .map_err(|e| e.to_string())?;
    let target = data.iter().map(|s| s.target.energy()).sum::<f64>() / data.len() as f64;
    let poses = data[0].poses.slice(0, cfg.f).map_err(|e| e.to_string())?;
    let sched = cfg.schedule().map_err(|e| e.to_string())?;
    let z = sample(&params, &data[0].source, &poses, &sched, Some(cfg.tau), 7)
        .map_err(|e| e.to_string())?;
    let _ = SAMPLE_ENERGY.set((z.energy(), target));
    within(start.elapsed(), SMOKE_BUDGET)?;
    Ok(format!(
        "{losses}; {count} finite PPM frames; {:.1?}",
        start.elapsed()
    ))
}

// -- criterion 10 ----------------------------------------------------------

fn write_poses(path: &Path, seq: &PoseSequence) {
    std::fs::write(path, seq.to_json()).unwrap();
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();

    ensure(cli(&["--help"]) == 0, || "top-level --help failed".into())?;
    let names = tcan_cli::command_names();
    for name in &names {
        let code = cli(&[name, "--help"]);
        ensure(code == 0, || format!("{name} --help exited {code}"))?;
    }
    ensure(cli(&["validate", "--no-such-flag"]) == 1, || {
        "unknown flag accepted".into()
    })?;

    let data =
        make_synthetic_dataset(2, 10, &DatasetSpec::new(16, 8, 8)).map_err(|e| e.to_string())?;
    let driving = d.join("driving.json");
    write_poses(&driving, &data[0].poses);
    let source = d.join("source.json");
    write_poses(
        &source,
        &PoseSequence::new(64, 64, vec![data[0].poses.frames[0]]).unwrap(),
    );
    let other = d.join("other.json");
    write_poses(&other, &data[1].poses);

    ensure(cli(&["validate", path(&driving)]) == 0, || {
        "validate failed".into()
    })?;
    std::fs::write(d.join("broken.json"), "{\"width\": 4").unwrap();
    ensure(
        cli(&["validate", path(&d.join("broken.json"))]) == 2,
        || "broken file not exit 2".into(),
    )?;

    // Retarget identity: source equals driving frame 0.
    let (r1, r2) = (d.join("r1.json"), d.join("r2.json"));
    ensure(
        cli(&[
            "retarget",
            "--source",
            path(&source),
            "--driving",
            path(&driving),
            "--out",
            path(&r1),
        ]) == 0,
        || "retarget failed".into(),
    )?;
    let out = std::fs::read(&r1).unwrap();
    ensure(out == std::fs::read(&driving).unwrap(), || {
        "identity retarget changed bytes".into()
    })?;
    let parsed =
        parse_pose_sequence(std::str::from_utf8(&out).unwrap()).map_err(|e| e.to_string())?;
    ensure(parsed == data[0].poses, || {
        "identity retarget changed values".into()
    })?;
    let (o1, o2) = (d.join("o1.json"), d.join("o2.json"));
    for o in [&o1, &o2] {
        ensure(
            cli(&[
                "retarget",
                "--source",
                path(&other),
                "--driving",
                path(&driving),
                "--out",
                path(o),
            ]) == 0,
            || "retarget failed".into(),
        )?;
    }
    ensure(
        std::fs::read(&o1).unwrap() == std::fs::read(&o2).unwrap(),
        || "retarget not deterministic".into(),
    )?;
    ensure(
        cli(&[
            "retarget",
            "--source",
            path(&o1),
            "--driving",
            path(&o1),
            "--out",
            path(&r2),
        ]) == 0,
        || "retarget of output failed".into(),
    )?;
    ensure(
        std::fs::read(&r2).unwrap() == std::fs::read(&o1).unwrap(),
        || "output does not round-trip".into(),
    )?;

    // PTM: one pose pixel in a 4x4 canvas corner.
    let mut frame = PoseFrame::missing();
    frame.keypoints[1] = Keypoint::visible(0.0, 0.0);
    let corner = d.join("corner.json");
    write_poses(&corner, &PoseSequence::new(4, 4, vec![frame]).unwrap());
    let (m1, m2, pv) = (d.join("m1.tmap"), d.join("m2.tmap"), d.join("m.pgm"));
    for m in [&m1, &m2] {
        ensure(
            cli(&[
                "ptm",
                "--poses",
                path(&corner),
                "--tau",
                "3",
                "--out",
                path(m),
                "--preview",
                path(&pv),
            ]) == 0,
            || "ptm failed".into(),
        )?;
    }
    let bytes = std::fs::read(&m1).unwrap();
    ensure(bytes == std::fs::read(&m2).unwrap(), || {
        "ptm not deterministic".into()
    })?;
    let map = TemperatureMap::from_tmap_bytes(&bytes).map_err(|e| e.to_string())?;
    ensure(map.to_tmap_bytes() == bytes, || {
        "TMAP does not round-trip".into()
    })?;
    let far = map.get(3, 3);
    ensure(
        (far - 5.5).abs() <= TEMPERATURE_TOL && map.get(0, 0) == 1.0,
        || format!("far corner {far}"),
    )?;

    Ok(format!(
        "{} commands answer --help; validate/retarget/ptm deterministic; far corner {far}",
        names.len()
    ))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "distance map equals brute-force oracle", criterion_1),
        (2, "temperature map algebra", criterion_2),
        (
            3,
            "zero-B LoRA attention equals base attention",
            criterion_3,
        ),
        (
            4,
            "temperature identity and entropy monotonicity",
            criterion_4,
        ),
        (
            5,
            "analytic gradients match finite differences",
            criterion_5,
        ),
        (6, "freeze protocol digests", criterion_6),
        (7, "re-targeting laws", criterion_7),
        (8, "temporal window fusion", criterion_8),
        (
            9,
            "end-to-end two-stage training and animation",
            criterion_9,
        ),
        (10, "CLI contract", criterion_10),
    ];
    let mut failed = 0;
    let mut lines = Vec::new();
    for (id, name, run) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(format!(
                "panicked: {:?}",
                p.downcast_ref::<String>()
                    .map(|s| s.as_str())
                    .or(p.downcast_ref::<&str>().copied())
            ))
        });
        let line = match &outcome {
            Ok(detail) => format!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                format!("criterion {id:>2} FAIL  {name}: {why}")
            }
        };
        println!("{line}");
        lines.push(line);
    }
    println!("\nacceptance summary");
    for l in &lines {
        println!("{l}");
    }
    println!(
        "{} of {} criteria passed",
        lines.len() - failed,
        lines.len()
    );
    // Reported for information only: the frozen base is random, so sampling
    // from the toy model is not expected to reproduce target statistics.
    if let Some((sampled, target)) = SAMPLE_ENERGY.get() {
        let ratio = sampled / target;
        let verdict = if (1.0 / ENERGY_BAND..=ENERGY_BAND).contains(&ratio) {
            "within"
        } else {
            "outside"
        };
        println!("supplementary: sampled latent energy {sampled:.3e} vs target {target:.3}, ratio {ratio:.3e}, {verdict} the 3x band (not gating)");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
