//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line to stdout
//! (uncaptured) and then asserts.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use deeppbm::diffnet::{GradCheckConfig, Tensor};
use deeppbm::evaluation::{evaluate_pairs, evaluate_sequence, MetricReport};
use deeppbm::pipeline::{estimate_background, extract_masks, run_deeppbm, run_long_video, run_rpca_bs, MaskSequence, SubtractConfig};
use deeppbm::rpca::{rpca_decompose, RpcaParams, RpcaResult};
use deeppbm::training::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, train, TrainConfig, TrainHistory};
use deeppbm::vae::{check_loss_gradients, kl_divergence, Architecture, LatentGaussian, VaeModel};
use deeppbm::video_io::{generate_synthetic_scene, load_frame_sequence, load_mask_dir, write_frame_png, SyntheticScene, SyntheticSceneSpec};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Serializes the heavy criteria so timings are not skewed by sibling tests.
fn exclusive() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let line = format!("{status} criterion {criterion} ({name}): {detail}\n");
    // bypasses the test harness capture so the line always shows
    let _ = std::io::stdout().write_all(line.as_bytes());
}

fn skip(criterion: u32, name: &str, detail: &str) {
    let line = format!("SKIP criterion {criterion} ({name}): {detail}\n");
    let _ = std::io::stdout().write_all(line.as_bytes());
}

fn scene_train_config() -> TrainConfig {
    TrainConfig {
        latent_dim: 4,
        batch_size: 10,
        epochs: 50,
        learning_rate: 1e-3,
        seed: 0,
        ..TrainConfig::default()
    }
}

fn moving_scene() -> SyntheticScene {
    generate_synthetic_scene(&SyntheticSceneSpec::default()).unwrap()
}

const PARK_FRAMES: usize = 20;

fn parked_scene() -> SyntheticScene {
    generate_synthetic_scene(&SyntheticSceneSpec {
        park_frames: PARK_FRAMES,
        ..SyntheticSceneSpec::default()
    })
    .unwrap()
}

/// Planted rank-1 plus 1%-sparse 200x100 instance.
fn planted_rpca_instance(seed: u64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, n) = (200, 100);
    let u: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let low_rank = DMatrix::from_fn(p, n, |i, j| u[i] * v[j]);
    let support = rand::seq::index::sample(&mut rng, p * n, p * n / 100);
    let mut sparse = DMatrix::zeros(p, n);
    for k in support {
        sparse[(k % p, k / p)] = if rng.random::<bool>() { 1.0 } else { -1.0 };
    }
    let m = &low_rank + &sparse;
    (m, low_rank, sparse)
}

struct RpcaRun {
    result: RpcaResult,
    seconds: f64,
}

fn run_planted_rpca() -> RpcaRun {
    let (m, _, _) = planted_rpca_instance(11);
    let t = Instant::now();
    let result = rpca_decompose(&m, &RpcaParams::default()).unwrap();
    RpcaRun {
        result,
        seconds: t.elapsed().as_secs_f64(),
    }
}

struct DeepPbmRun {
    model: VaeModel<f32>,
    history: TrainHistory,
    masks: MaskSequence,
    report: MetricReport,
    train_seconds: f64,
}

fn run_scene_deeppbm() -> DeepPbmRun {
    let scene = moving_scene();
    let t = Instant::now();
    let (model, history) = train::<f32>(&scene.frames, &scene_train_config()).unwrap();
    let train_seconds = t.elapsed().as_secs_f64();
    let masks = run_deeppbm(&scene.frames, &model, &SubtractConfig::default()).unwrap();
    let report = evaluate_sequence(&masks, &scene.truth).unwrap();
    DeepPbmRun {
        model,
        history,
        masks,
        report,
        train_seconds,
    }
}

fn scene_deeppbm() -> &'static DeepPbmRun {
    static RUN: OnceLock<DeepPbmRun> = OnceLock::new();
    RUN.get_or_init(run_scene_deeppbm)
}

fn run_scene_rpca() -> (MaskSequence, RpcaResult) {
    run_rpca_bs(&moving_scene().frames, &RpcaParams::default(), &SubtractConfig::default()).unwrap()
}

struct LongRun {
    masks: MaskSequence,
    training_frames: usize,
    report: MetricReport,
}

fn run_parked_long_video() -> LongRun {
    let scene = parked_scene();
    let run = run_long_video::<f32>(&scene.frames, &scene_train_config(), &SubtractConfig::default()).unwrap();
    let pairs = (PARK_FRAMES..scene.frames.len()).map(|i| (i, &run.masks.masks[i], &scene.truth.masks()[i]));
    let report = evaluate_pairs(pairs).unwrap();
    LongRun {
        masks: run.masks,
        training_frames: run.training_frames,
        report,
    }
}

#[test]
fn criterion_1_gradient_correctness() {
    let _guard = exclusive();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let frames = Tensor::from_vec(&[3, 1, 8, 8], (0..192).map(|_| rng.random::<f64>()).collect()).unwrap();
    let noise = Tensor::from_vec(&[3, 2], (0..6).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();

    // every coordinate of a narrow model, unscreened; then a seeded
    // subsample of the default architecture where coordinates sitting within
    // eps of a ReLU/L1 kink are screened out and counted
    let narrow = Architecture {
        widths: vec![4, 8],
        ..Architecture::default()
    };
    let model = VaeModel::<f64>::init(&narrow, [1, 8, 8], 2, &mut rng).unwrap();
    let full = check_loss_gradients(&model, &frames, &noise, &GradCheckConfig::default()).unwrap();
    let model = VaeModel::<f64>::init(&Architecture::default(), [1, 8, 8], 2, &mut rng).unwrap();
    let sampled = check_loss_gradients(
        &model,
        &frames,
        &noise,
        &GradCheckConfig {
            max_coordinates: Some(3000),
            seed: 5,
            kink_tolerance: Some(1e-2),
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    let seconds = t.elapsed().as_secs_f64();
    let worst = full.max_relative_error.max(sampled.max_relative_error);
    let few_kinks = sampled.kinks_skipped * 100 <= 3000;
    let pass = worst < 1e-4 && full.kinks_skipped == 0 && few_kinks && seconds < 60.0;
    report(
        1,
        "gradient correctness",
        pass,
        &format!(
            "max rel err {worst:.2e} (< 1e-4) over all {} coordinates of a narrow model and {} sampled default-architecture coordinates ({} kink-straddling skipped), {seconds:.1}s (< 60s)",
            full.coordinates_checked, sampled.coordinates_checked, sampled.kinks_skipped
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_kl_closed_form() {
    let _guard = exclusive();
    let t = Instant::now();
    let lg = |mu: &[f64], lv: &[f64]| LatentGaussian {
        mu: mu.to_vec(),
        log_var: lv.to_vec(),
    };
    let exact = kl_divergence(&lg(&[0.0], &[0.0])) == 0.0
        && kl_divergence(&lg(&[1.0], &[0.0])) == 0.5
        && (kl_divergence(&lg(&[0.0], &[1.0])) - (std::f64::consts::E - 2.0) / 2.0).abs() < 1e-15;

    // Monte Carlo oracle: E_q[log q(z) - log p(z)]
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let samples = 1_000_000;
    let mut worst_z = 0.0f64;
    for _ in 0..10 {
        let d = 3;
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let lv: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..samples {
            let mut log_ratio = 0.0;
            for k in 0..d {
                let eps: f64 = StandardNormal.sample(&mut rng);
                let z = mu[k] + (0.5 * lv[k]).exp() * eps;
                // log N(z; mu, s^2) - log N(z; 0, 1), constants cancel
                log_ratio += -0.5 * lv[k] - 0.5 * eps * eps + 0.5 * z * z;
            }
            sum += log_ratio;
            sum_sq += log_ratio * log_ratio;
        }
        let n = samples as f64;
        let mean = sum / n;
        let se = ((sum_sq / n - mean * mean) / (n - 1.0)).sqrt();
        let closed = kl_divergence(&lg(&mu, &lv));
        worst_z = worst_z.max((closed - mean).abs() / se);
    }
    let seconds = t.elapsed().as_secs_f64();
    let pass = exact && worst_z <= 3.0 && seconds < 60.0;
    report(
        2,
        "KL closed form",
        pass,
        &format!("exact cases {exact}, worst MC deviation {worst_z:.2} SE (<= 3), {seconds:.1}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_rpca_exact_recovery() {
    let _guard = exclusive();
    let (_, low_rank, sparse) = planted_rpca_instance(11);
    let run = run_planted_rpca();
    let l_err = (&run.result.low_rank - &low_rank).norm() / low_rank.norm();
    let s_err = (&run.result.sparse - &sparse).norm() / sparse.norm();
    let pass = l_err <= 1e-4 && run.result.residual <= 1e-7 && run.seconds < 30.0;
    report(
        3,
        "RPCA exact recovery",
        pass,
        &format!(
            "rel L err {l_err:.2e} (<= 1e-4), rel S err {s_err:.2e}, residual {:.2e} (<= 1e-7), {} iterations, {:.2}s (< 30s)",
            run.result.residual, run.result.iterations, run.seconds
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_end_to_end_deeppbm() {
    let _guard = exclusive();
    let t = Instant::now();
    let run = scene_deeppbm();
    let seconds = t.elapsed().as_secs_f64();
    let epochs = run.history.len();
    let pass = run.report.f_measure >= 0.90 && epochs <= 50 && seconds < 15.0 * 60.0;
    report(
        4,
        "end-to-end DeepPBM",
        pass,
        &format!(
            "F {:.4} (>= 0.90), P {:.4}, R {:.4}, d=4, {epochs} epochs, training {:.1}s, total {seconds:.1}s (< 900s)",
            run.report.f_measure, run.report.precision, run.report.recall, run.train_seconds
        ),
    );
    assert!(pass);
}

fn best_of<F: FnMut()>(reps: usize, mut f: F) -> Duration {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed()
        })
        .min()
        .unwrap()
}

#[test]
fn criterion_5_rpca_baseline_and_speed() {
    let _guard = exclusive();
    let scene = moving_scene();
    let (masks, result) = run_scene_rpca();
    let f = evaluate_sequence(&masks, &scene.truth).unwrap().f_measure;

    let run = scene_deeppbm();
    let n = scene.frames.len() as f64;
    let cfg = SubtractConfig::default();
    let deeppbm = best_of(3, || {
        let bg = estimate_background(&run.model, &scene.frames).unwrap();
        extract_masks(&scene.frames, &bg, &cfg).unwrap();
    });
    let obs = deeppbm::rpca::ObservationMatrix::from_frames(&scene.frames);
    let rpca = best_of(3, || {
        rpca_decompose(&obs.matrix, &RpcaParams::default()).unwrap();
    });
    let per_frame_dpbm = deeppbm.as_secs_f64() / n;
    let per_frame_rpca = rpca.as_secs_f64() / n;
    let pass = f >= 0.80 && per_frame_dpbm < per_frame_rpca;
    report(
        5,
        "RPCA baseline",
        pass,
        &format!(
            "RPCA F {f:.4} (>= 0.80) after {} iterations; per frame DeepPBM {:.3} ms < RPCA {:.3} ms (ratio {:.1}x)",
            result.iterations,
            per_frame_dpbm * 1e3,
            per_frame_rpca * 1e3,
            per_frame_rpca / per_frame_dpbm
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_long_video_adaptation() {
    let _guard = exclusive();
    let run = run_parked_long_video();
    let pass = run.report.f_measure >= 0.80 && run.training_frames == 20;
    report(
        6,
        "long-video adaptation",
        pass,
        &format!(
            "trained on first {} frames, F over {} post-movement frames {:.4} (>= 0.80), P {:.4}, R {:.4}",
            run.training_frames, run.report.frames, run.report.f_measure, run.report.precision, run.report.recall
        ),
    );
    assert!(pass);
}

fn bits(m: &DMatrix<f64>) -> Vec<u64> {
    m.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn criterion_7_determinism() {
    let _guard = exclusive();
    let a = run_planted_rpca();
    let b = run_planted_rpca();
    let rpca_same = bits(&a.result.low_rank) == bits(&b.result.low_rank)
        && bits(&a.result.sparse) == bits(&b.result.sparse)
        && a.result.iterations == b.result.iterations;

    let first = scene_deeppbm();
    let second = run_scene_deeppbm();
    let deeppbm_same = first.model == second.model
        && first.masks == second.masks
        && first.history.epochs.iter().zip(&second.history.epochs).all(|(x, y)| x.loss == y.loss);

    let (m1, r1) = run_scene_rpca();
    let (m2, r2) = run_scene_rpca();
    let baseline_same = m1 == m2 && bits(&r1.low_rank) == bits(&r2.low_rank);

    let l1 = run_parked_long_video();
    let l2 = run_parked_long_video();
    let long_same = l1.masks == l2.masks;

    let pass = rpca_same && deeppbm_same && baseline_same && long_same;
    report(
        7,
        "determinism",
        pass,
        &format!(
            "identical reruns: criterion 3 {rpca_same}, criterion 4 {deeppbm_same}, criterion 5 {baseline_same}, criterion 6 {long_same}"
        ),
    );
    assert!(pass);
}

fn files_equal(a: &Path, b: &Path) -> bool {
    std::fs::read(a).unwrap() == std::fs::read(b).unwrap()
}

#[test]
fn criterion_8_checkpoint_round_trip() {
    let _guard = exclusive();
    let run = scene_deeppbm();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.dpbm");
    let cfg = scene_train_config();
    save_checkpoint(&ckpt, &run.model, &run.history, Some(&cfg)).unwrap();

    let loaded = load_checkpoint::<f32>(&ckpt).unwrap();
    let bit_identical = loaded
        .model
        .joint_params()
        .iter()
        .zip(run.model.joint_params().iter())
        .all(|(a, b)| {
            a.name == b.name
                && a.tensor.shape() == b.tensor.shape()
                && a.tensor.data().iter().map(|v| v.to_bits()).eq(b.tensor.data().iter().map(|v| v.to_bits()))
        });
    let bytes = std::fs::read(&ckpt).unwrap();
    let reencoded = encode_checkpoint(&loaded.model, &loaded.history, loaded.config.as_ref()).unwrap() == bytes
        && decode_checkpoint::<f32>(&bytes)
            .unwrap()
            .history
            .epochs
            .iter()
            .zip(&run.history.epochs)
            .all(|(a, b)| a.epoch == b.epoch && a.loss == b.loss);

    // a fresh process loads the checkpoint and estimates backgrounds; they
    // must match the in-memory model's byte for byte
    let scene = moving_scene();
    let frames_dir = dir.path().join("frames");
    std::fs::create_dir_all(&frames_dir).unwrap();
    for i in 0..scene.frames.len() {
        write_frame_png(&scene.frames, i, &frames_dir.join(format!("frame_{i:06}.png"))).unwrap();
    }
    let status = Command::new(env!("CARGO_BIN_EXE_deeppbm"))
        .args(["subtract", "--model"])
        .arg(&ckpt)
        .arg("--input")
        .arg(&frames_dir)
        .arg("--out-masks")
        .arg(dir.path().join("masks"))
        .arg("--out-backgrounds")
        .arg(dir.path().join("bg"))
        .output()
        .unwrap();
    let reloaded = load_frame_sequence(&frames_dir, None, false).unwrap();
    let here = run_deeppbm(&reloaded, &run.model, &SubtractConfig::default()).unwrap();
    let bg_here = dir.path().join("bg_here");
    std::fs::create_dir_all(&bg_here).unwrap();
    let backgrounds = here.backgrounds.as_ref().unwrap();
    for i in 0..backgrounds.len() {
        write_frame_png(backgrounds, i, &bg_here.join(format!("bg_{i:06}.png"))).unwrap();
    }
    let restart_same = status.status.success()
        && (0..backgrounds.len()).all(|i| {
            let name = format!("bg_{i:06}.png");
            files_equal(&dir.path().join("bg").join(&name), &bg_here.join(&name))
        })
        && load_mask_dir(&dir.path().join("masks")).unwrap().into_values().collect::<Vec<_>>() == here.masks;

    let pass = bit_identical && reencoded && restart_same;
    report(
        8,
        "checkpoint round trip",
        pass,
        &format!(
            "tensors bit-identical {bit_identical}, re-encoded bytes identical {reencoded}, separate-process backgrounds identical {restart_same}"
        ),
    );
    if !status.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&status.stderr));
    }
    assert!(pass);
}

/// Runs when `DEEPPBM_DATASET_DIR` points at a directory with `frames/` and
/// plain-image ground truth in `gt/`. `DEEPPBM_DATASET_TARGET_F` sets the
/// reference F-measure to compare against.
#[test]
fn criterion_9_dataset_short_video() {
    let Some(root) = std::env::var_os("DEEPPBM_DATASET_DIR") else {
        skip(9, "dataset short video", "DEEPPBM_DATASET_DIR not set");
        return;
    };
    let _guard = exclusive();
    let root = Path::new(&root);
    let frames = load_frame_sequence(&root.join("frames"), None, false).unwrap();
    let cfg = TrainConfig {
        latent_dim: std::env::var("DEEPPBM_DATASET_LATENT_DIM")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(TrainConfig::default().latent_dim),
        ..TrainConfig::default()
    };
    let (model, _) = train::<f32>(&frames, &cfg).unwrap();
    let masks = run_deeppbm(&frames, &model, &SubtractConfig::default()).unwrap();
    let truth = load_mask_dir(&root.join("gt")).unwrap();
    let offset = frames.frame_index_offset();
    let pairs = truth
        .iter()
        .filter(|(&i, _)| i >= offset && i - offset < masks.len())
        .map(|(&i, t)| (i, &masks.masks[i - offset], t));
    let r = evaluate_pairs(pairs).unwrap();
    let target: Option<f64> = std::env::var("DEEPPBM_DATASET_TARGET_F").ok().and_then(|v| v.parse().ok());
    let pass = target.is_none_or(|t| (r.f_measure - t).abs() <= 0.15);
    report(
        9,
        "dataset short video",
        pass,
        &format!("F {:.4} over {} labeled frames, target {target:?} (within 0.15)", r.f_measure, r.frames),
    );
    assert!(pass);
}
