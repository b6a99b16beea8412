//! Acceptance runner: one line per criterion, nonzero exit if any fails.
//!
//! The end-to-end criteria train real models on the toy dataset and take
//! well over an hour on one CPU core. Set `BALANCEGEN_ACCEPTANCE_QUICK=1` to
//! run only the fast checks (1–7 and the loss oracle of 10).

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use balancegen::classifier::{
    choose_mixup_source, epochs_to_threshold, mix_with, sigma_schedule, Batch, Direction,
    EvalReport, MixupSource, Strategy, TrainingSchedule,
};
use balancegen::datasets::{load_manifest, NUM_KEYPOINTS};
use balancegen::experiments::{
    load_eval_reports, run_limited_data_sweep, run_pipeline, ExperimentConfig, ResultTable,
    ToySpec,
};
use balancegen::gan::{d2dce_loss, read_losses, D2dceParams, GanMode};
use balancegen::metrics::{density_coverage, fid, inception_score, FeatureMatrix};
use balancegen::pose::{render_bones, render_joints, HandPose, HandSkeleton, PoseMode};
use balancegen::synthesis::{filter_topk, ConditionRef, SyntheticDataset};
use rand::Rng;
use tch::{Kind, Tensor};

use common::*;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within_budget(started: Instant, limit_s: f64) -> Result<f64, String> {
    let t = started.elapsed().as_secs_f64();
    ensure(t <= limit_s, format!("took {t:.1}s, budget {limit_s}s"))?;
    Ok(t)
}

// 1
fn schedule_exactness() -> Check {
    let t = Instant::now();
    let down = TrainingSchedule::new(Direction::Decreasing, 0.5, 0.1).unwrap();
    let up = TrainingSchedule::new(Direction::Increasing, 0.5, 0.1).unwrap();
    let constant = TrainingSchedule::constant(0.3).unwrap();
    let cases = [
        (sigma_schedule(10.0, &down), 0.5 * (-1.0f64).exp()),
        (sigma_schedule(10.0, &up), 0.5 + 0.5 * (1.0 - (-1.0f64).exp())),
        (sigma_schedule(0.0, &down), 0.5),
        (sigma_schedule(20.0, &down), 0.5 * (-2.0f64).exp()),
        (sigma_schedule(7.0, &constant), 0.3),
    ];
    for (got, want) in cases {
        ensure((got - want).abs() <= 1e-9, format!("sigma {got} != {want}"))?;
    }
    ensure((sigma_schedule(10.0, &down) - 0.183940).abs() < 1e-6, "0.5·e^-1 example")?;
    let mut r = rng(1);
    for _ in 0..1000 {
        let (alpha, beta) = (r.gen_range(0.0..=1.0), r.gen_range(0.0..=1.0));
        let up = TrainingSchedule::new(Direction::Increasing, alpha, beta).unwrap();
        let down = TrainingSchedule::new(Direction::Decreasing, alpha, beta).unwrap();
        for e in 0..50 {
            let (a, b) = (e as f64, (e + 1) as f64);
            ensure(sigma_schedule(b, &up) >= sigma_schedule(a, &up), "increasing schedule fell")?;
            ensure(sigma_schedule(b, &down) <= sigma_schedule(a, &down), "decreasing schedule rose")?;
        }
    }
    let secs = within_budget(t, 1.0)?;
    Ok(format!("5 closed-form values, 1000 monotone draws, {secs:.2}s"))
}

// 2
fn mixup_exactness() -> Check {
    let t = Instant::now();
    let opts = (Kind::Float, tch::Device::Cpu);
    let a = Batch::one_hot(Tensor::rand([3, 3, 4, 4], opts), &[0, 1, 2], 3);
    let b = Batch::one_hot(Tensor::rand([3, 3, 4, 4], opts), &[2, 2, 0], 3);
    let m = mix_with(&a, &b, &[1.0, 0.0, 0.5]).unwrap();
    ensure(m.images.get(0).equal(&a.images.get(0)), "λ=1 must return the first batch")?;
    ensure(m.images.get(1).equal(&b.images.get(1)), "λ=0 must return the second batch")?;
    let mid = (a.images.get(2) * 0.5) + (b.images.get(2) * 0.5);
    ensure(m.images.get(2).equal(&mid), "λ=0.5 must be the midpoint")?;
    let mid_t = Vec::<f32>::try_from(m.targets.get(2)).unwrap();
    ensure(mid_t == vec![0.5, 0.0, 0.5], format!("λ=0.5 targets {mid_t:?}"))?;

    let mut r = rng(2);
    for _ in 0..1000 {
        let n = r.gen_range(1..32);
        let c = r.gen_range(2..12);
        let la: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let lb: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let lambdas: Vec<f64> = (0..n).map(|_| r.gen()).collect();
        let x = Tensor::zeros([n as i64, 1, 1, 1], opts);
        let mixed = mix_with(
            &Batch::one_hot(x.shallow_clone(), &la, c),
            &Batch::one_hot(x, &lb, c),
            &lambdas,
        )
        .unwrap();
        let sums = Vec::<f64>::try_from(
            mixed.targets.sum_dim_intlist([1i64].as_slice(), false, Kind::Double),
        )
        .unwrap();
        ensure(sums.iter().all(|s| (s - 1.0).abs() <= 1e-6), "label row does not sum to 1")?;
    }

    let mut worst: f64 = 0.0;
    for (i, sigma) in [0.1, 0.5, 0.73].into_iter().enumerate() {
        let schedule = TrainingSchedule::constant(sigma).unwrap();
        let mut r = rng(100 + i as u64);
        let hits = (0..10_000)
            .filter(|_| choose_mixup_source(0, &schedule, r.gen()) == MixupSource::RealReal)
            .count();
        worst = worst.max((hits as f64 / 10_000.0 - sigma).abs());
    }
    ensure(worst <= 0.02, format!("branch frequency off by {worst}"))?;
    let secs = within_budget(t, 5.0)?;
    Ok(format!("boundary cases exact, 1000 batches, branch error {worst:.4}, {secs:.2}s"))
}

// 3
fn filter_oracle() -> Check {
    let t = Instant::now();
    let mut r = rng(3);
    for case in 0..200 {
        let c = r.gen_range(1..8);
        let items = random_scored(&mut r, 1000, c);
        let ds = scored_dataset(&items, c);
        let num = r.gen_range(1..=100u64);
        let fraction = num as f64 / 100.0;
        let out = filter_topk(&ds, fraction).unwrap();
        ensure(
            kept_indices(&out) == filter_reference(&items, c, num, 100),
            format!("case {case}: kept set differs from the sort oracle"),
        )?;
        for (class, (&after, &before)) in out.counts().iter().zip(&ds.counts()).enumerate() {
            let expected = if before == 0 { 0 } else { ((num * before as u64).div_ceil(100) as usize).max(1) };
            ensure(after == expected, format!("case {case} class {class}: kept {after}, want {expected}"))?;
        }
        let again = filter_topk(&ds, fraction).unwrap();
        ensure(again.samples == out.samples, "filtering is not deterministic")?;
        let identity = filter_topk(&out, 1.0).unwrap();
        ensure(identity.samples == out.samples, "fraction 1.0 changed a filtered set")?;
    }
    let secs = within_budget(t, 10.0)?;
    Ok(format!("200 datasets agree with the oracle, {secs:.2}s"))
}

// 4
fn fid_oracle() -> Check {
    let t = Instant::now();
    let mut r = rng(4);
    let mut shift = vec![0.0; 8];
    shift[0] = 1.0;
    let a = FeatureMatrix::from_rows(&gaussian_rows(&mut r, 10_000, 8, &[]), "e").unwrap();
    let b = FeatureMatrix::from_rows(&gaussian_rows(&mut r, 10_000, 8, &shift), "e").unwrap();
    let self_fid = fid(&a, &a).unwrap();
    let ab = fid(&a, &b).unwrap();
    let ba = fid(&b, &a).unwrap();
    ensure(self_fid <= 1e-6, format!("fid(A,A) = {self_fid}"))?;
    ensure((0.9..=1.1).contains(&ab), format!("fid = {ab}, expected about 1"))?;
    ensure((ab - ba).abs() <= 1e-6, format!("asymmetric: {ab} vs {ba}"))?;
    let secs = within_budget(t, 30.0)?;
    Ok(format!("fid(A,A)={self_fid:.2e}, fid(A,B)={ab:.4}, {secs:.2}s"))
}

// 5
fn inception_bounds() -> Check {
    let t = Instant::now();
    let uniform = vec![vec![0.1; 10]; 50];
    let (u, _) = inception_score(&uniform, 1).unwrap();
    ensure((u - 1.0).abs() <= 1e-6, format!("uniform IS {u}"))?;
    let onehot: Vec<Vec<f64>> = (0..40)
        .map(|i| (0..4).map(|c| if c == i % 4 { 1.0 } else { 0.0 }).collect())
        .collect();
    let (h, _) = inception_score(&onehot, 1).unwrap();
    ensure((h - 4.0).abs() <= 1e-6, format!("one-hot IS {h}"))?;
    let mut r = rng(5);
    for _ in 0..500 {
        let c = r.gen_range(2..20);
        let n = r.gen_range(2..100);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..c).map(|_| r.gen::<f64>().powi(8)).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let splits = r.gen_range(1..=n.min(10));
        let (m, _) = inception_score(&rows, splits).unwrap();
        ensure(m <= c as f64 && m >= 1.0, format!("IS {m} outside [1, {c}]"))?;
    }
    let secs = within_budget(t, 5.0)?;
    Ok(format!("uniform {u:.6}, one-hot {h:.6}, 500 random inputs bounded, {secs:.2}s"))
}

// 6
fn density_coverage_oracle() -> Check {
    let t = Instant::now();
    let mut r = rng(6);
    for case in 0..100 {
        let n = r.gen_range(6..=256);
        let m = r.gen_range(1..=256);
        let d = r.gen_range(1..=8);
        let k = [1, 3, 5][case % 3];
        let real = gaussian_rows(&mut r, n, d, &[]);
        let gen = gaussian_rows(&mut r, m, d, &[0.5]);
        let fr = FeatureMatrix::from_rows(&real, "e").unwrap();
        let (density, coverage) = density_coverage(&fr, &FeatureMatrix::from_rows(&gen, "e").unwrap(), k).unwrap();
        let (inside, covered) = density_coverage_counts(&real, &gen, k);
        let got_inside = density * (k * m) as f64;
        let got_covered = coverage * n as f64;
        ensure(
            (got_inside - inside as f64).abs() < 1e-6 && (got_covered - covered as f64).abs() < 1e-6,
            format!("case {case}: ({got_inside}, {got_covered}) vs ({inside}, {covered})"),
        )?;
        let (_, self_cov) = density_coverage(&fr, &fr, k).unwrap();
        ensure(self_cov == 1.0, format!("case {case}: coverage of real on itself {self_cov}"))?;
    }
    let secs = within_budget(t, 30.0)?;
    Ok(format!("100 instances match exactly, {secs:.2}s"))
}

// 7
fn pose_renderer() -> Check {
    let t = Instant::now();
    let mut r = rng(7);
    let kps: [(f64, f64); NUM_KEYPOINTS] = std::array::from_fn(|_| (r.gen(), r.gen()));
    let pose = HandPose::new(kps, [1.0; NUM_KEYPOINTS]);
    let (h, w) = (32, 33);
    let joints = render_joints(&pose, h, w, 1.5).unwrap();
    let bones = render_bones(&pose, &HandSkeleton::default(), h, w, 1.0).unwrap();
    ensure(joints.channels() == 21 && PoseMode::Joints.channels() == 21, "joint channels")?;
    ensure(bones.channels() == 20 && PoseMode::Bones.channels() == 20, "bone channels")?;
    for (k, &(x, y)) in pose.keypoints.iter().enumerate() {
        let (col, row) = (
            (x * (w - 1) as f64).round_ties_even() as usize,
            (y * (h - 1) as f64).round_ties_even() as usize,
        );
        let peak = joints.channel(k).iter().cloned().fold(f32::MIN, f32::max);
        ensure(joints.at(k, row, col) == 1.0 && peak == 1.0, format!("joint {k} peak"))?;
    }
    for case in 0..200 {
        let width = 2 * r.gen_range(4..40) + 1;
        let kps: [(f64, f64); NUM_KEYPOINTS] = std::array::from_fn(|_| (r.gen(), r.gen()));
        let conf: [f64; NUM_KEYPOINTS] = std::array::from_fn(|_| r.gen());
        let p = HandPose::new(kps, conf);
        let f = p.flipped_horizontal();
        let sigma = r.gen_range(0.5..3.0);
        ensure(
            render_joints(&f, 21, width, sigma).unwrap() == render_joints(&p, 21, width, sigma).unwrap().mirrored(),
            format!("case {case}: joint flip"),
        )?;
        let sk = HandSkeleton::default();
        ensure(
            render_bones(&f, &sk, 21, width, 2.0).unwrap() == render_bones(&p, &sk, 21, width, 2.0).unwrap().mirrored(),
            format!("case {case}: bone flip"),
        )?;
    }
    let mut single = [(0.0, 0.0); NUM_KEYPOINTS];
    single[0] = (0.5, 0.5);
    let centered = HandPose::new(single, [1.0; NUM_KEYPOINTS]);
    let map = render_joints(&centered, 33, 33, 1.5).unwrap();
    let v = map.at(0, 16, 19) as f64;
    ensure((v - (-2.0f64).exp()).abs() <= 1e-6, format!("3 px offset gives {v}"))?;
    let secs = within_budget(t, 5.0)?;
    Ok(format!("peaks, channel counts, 200 odd-width flips, e^-2 at 3 px, {secs:.2}s"))
}

fn d2dce_oracle() -> Check {
    let t = Instant::now();
    let mut r = rng(10);
    let params = D2dceParams::default();
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = r.gen_range(1..=16);
        let k = r.gen_range(1..=10);
        let d = r.gen_range(2..=64);
        let emb = unit_vectors(&mut r, n, d);
        let proxies = unit_vectors(&mut r, k, d);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let want = d2dce_reference(&emb, &labels, &proxies, params.temperature, params.margin_positive, params.margin_negative);
        let rows = |v: &[Vec<f64>]| Tensor::from_slice(&v.concat()).view([v.len() as i64, -1]).to_kind(Kind::Float);
        let lt = Tensor::from_slice(&labels.iter().map(|&l| l as i64).collect::<Vec<_>>());
        let got = d2dce_loss(&rows(&emb), &lt, &rows(&proxies), &params).unwrap().double_value(&[]);
        worst = worst.max((got - want).abs());
    }
    ensure(worst <= 1e-5, format!("max deviation {worst:.2e}"))?;
    let secs = within_budget(t, 10.0)?;
    Ok(format!("500 batches, max deviation {worst:.2e}, {secs:.2}s"))
}

// Shared desk-scale configuration of the end-to-end criteria.

fn work_root() -> PathBuf {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    root
}

fn toy(domain: u32) -> ToySpec {
    ToySpec {
        image_size: 32,
        domain,
        ..ToySpec::long_tail()
    }
}

fn label_config(out: &Path, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = seed;
    c.out_dir = out.to_path_buf();
    c.dataset.source.toy = Some(toy(0));
    let g = &mut c.gan.train;
    g.mode = GanMode::Label;
    g.g_width = 16;
    g.d_width = 16;
    g.lr_g = 2e-4;
    g.lr_d = 2e-4;
    g.ema_decay = None;
    g.steps = 2000;
    g.batch_size = 16;
    g.checkpoint_every = 500;
    c.synthesis.n_per_class = 200;
    c.classifier.strategies = vec![Strategy::Real, Strategy::Pretrain];
    c.classifier.settings.optimizer.lr = 1e-3;
    c.classifier.settings.patience = 10;
    c.metrics.n_gen = 500;
    c
}

struct SeedRun {
    seed: u64,
    real: EvalReport,
    pretrain: EvalReport,
    out: PathBuf,
}

fn run_seed(out: &Path, seed: u64) -> Result<SeedRun, String> {
    let config = label_config(out, seed);
    run_pipeline(&config, false).map_err(|e| format!("seed {seed}: {e}"))?;
    let mut reports = load_eval_reports(out).map_err(|e| e.to_string())?;
    let take = |m: &mut BTreeMap<Strategy, EvalReport>, s| m.remove(&s).ok_or(format!("seed {seed}: no {s} report"));
    Ok(SeedRun {
        seed,
        real: take(&mut reports, Strategy::Real)?,
        pretrain: take(&mut reports, Strategy::Pretrain)?,
        out: out.to_path_buf(),
    })
}

fn percent(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{:.0}", 100.0 * x)).collect();
    format!("[{}]", parts.join(" "))
}

// 8
fn imbalance_mitigation(runs: &[SeedRun], minutes: f64) -> Check {
    let mut wins = 0;
    let mut tail_hits = 0;
    let mut lines = Vec::new();
    for run in runs {
        let (r, p) = (run.real.macro_accuracy(), run.pretrain.macro_accuracy());
        wins += usize::from(p > r);
        let tail = (0..run.real.per_class_accuracy.len())
            .filter(|&c| run.real.train_class_counts[c] <= 6)
            .any(|c| run.real.per_class_accuracy[c] == 0.0 && run.pretrain.per_class_accuracy[c] > 0.0);
        tail_hits += usize::from(tail);
        lines.push(format!(
            "seed {}: REAL {r:.3} {} PRETRAIN {p:.3} {}",
            run.seed,
            percent(&run.real.per_class_accuracy),
            percent(&run.pretrain.per_class_accuracy)
        ));
    }
    for l in &lines {
        println!("    {l}");
    }
    ensure(wins >= 2, format!("PRETRAIN won {wins}/3 seeds"))?;
    ensure(tail_hits >= 2, format!("tail class recovered in {tail_hits}/3 seeds"))?;
    ensure(minutes <= 45.0, format!("took {minutes:.1} min"))?;
    Ok(format!("PRETRAIN won {wins}/3, tail recovered {tail_hits}/3, {minutes:.1} min"))
}

// 9
fn convergence(runs: &[SeedRun]) -> Check {
    let mut ok = 0;
    let mut parts = Vec::new();
    for run in runs {
        let real = epochs_to_threshold(&run.real.main_train_curve(), 0.9);
        let pre = epochs_to_threshold(&run.pretrain.main_train_curve(), 0.9);
        let pass = match (pre, real) {
            (Some(p), Some(r)) => p <= r,
            (Some(_), None) => true,
            (None, _) => false,
        };
        ok += usize::from(pass);
        parts.push(format!("{pre:?}/{real:?}"));
    }
    ensure(ok >= 2, format!("PRETRAIN ≤ REAL in {ok}/3 seeds ({})", parts.join(", ")))?;
    Ok(format!("PRETRAIN/REAL epochs to 0.9: {}", parts.join(", ")))
}

fn gan_metrics(out: &Path) -> Result<Vec<(usize, f64)>, String> {
    let path = out.join("eval/gan_metrics.csv");
    let mut reader = csv::Reader::from_path(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    reader
        .records()
        .map(|r| {
            let r = r.map_err(|e| e.to_string())?;
            Ok((r[0].parse().map_err(|_| "bad step")?, r[1].parse().map_err(|_| "bad fid")?))
        })
        .collect()
}

// 10
fn gan_sanity(runs: &[SeedRun], oracle: &Check) -> Check {
    let oracle = oracle.as_ref().map_err(|e| format!("d2dce oracle: {e}"))?;
    let mut parts = Vec::new();
    for run in runs {
        let fids = gan_metrics(&run.out)?;
        let first = fids.iter().find(|(s, _)| *s == 0).ok_or("no step-0 FID")?.1;
        let last = fids.iter().max_by_key(|(s, _)| *s).ok_or("no FID")?.1;
        ensure(last <= 0.7 * first, format!("FID {first:.2} -> {last:.2}"))?;
        let losses = read_losses(&run.out.join("gan/losses.csv")).map_err(|e| e.to_string())?;
        let sn = losses.iter().filter_map(|l| l.spectral_norm_max).fold(0.0, f64::max);
        ensure(losses.iter().any(|l| l.spectral_norm_max.is_some()), "no spectral norms logged")?;
        ensure(sn <= 1.05, format!("spectral norm {sn:.4}"))?;
        parts.push(format!("FID {first:.1}->{last:.1} sn≤{sn:.3}"));
    }
    Ok(format!("{}; {oracle}", parts.join(", ")))
}

fn results_bits(path: &Path) -> Result<Vec<(String, u64, u64)>, String> {
    let table = ResultTable::read_csv(path).map_err(|e| e.to_string())?;
    Ok(table
        .rows
        .iter()
        .map(|r| (r.method.to_string(), r.accuracy.to_bits(), r.macro_accuracy.to_bits()))
        .collect())
}

// 13
fn determinism(first: &SeedRun, root: &Path) -> Check {
    let again = root.join("repeat_seed0");
    run_seed(&again, first.seed)?;
    let a = results_bits(&first.out.join("report/results.csv"))?;
    let b = results_bits(&again.join("report/results.csv"))?;
    ensure(!a.is_empty() && a == b, format!("results differ: {a:?} vs {b:?}"))?;
    Ok(format!("{} rows identical bit-for-bit", a.len()))
}

// 11
fn multi_source(root: &Path) -> Check {
    let t = Instant::now();
    let out = root.join("multi_source");
    let mut c = label_config(&out, 0);
    c.dataset.source.name = "toy-target".into();
    c.gan.source = Some(balancegen::experiments::config::SourceSection {
        name: "toy-source".into(),
        manifest: None,
        toy: Some(toy(1)),
        toy_seed: Some(101),
    });
    let g = &mut c.gan.train;
    g.mode = GanMode::Pose;
    g.pose.mode = PoseMode::Bones;
    g.g_width = 8;
    g.d_width = 8;
    g.ema_decay = None;
    g.steps = 400;
    g.checkpoint_every = 400;
    c.metrics.enabled = false;
    let summary = run_pipeline(&c, false).map_err(|e| e.to_string())?;
    let results = summary.report.ok_or("no report")?.results_csv;
    let table = ResultTable::read_csv(&results).map_err(|e| e.to_string())?;
    ensure(table.rows.len() == 2, format!("{} result rows", table.rows.len()))?;
    let target = load_manifest(&out.join("prepare/manifest.tsv")).map_err(|e| e.to_string())?;
    let labels: BTreeMap<&str, usize> = target.records.iter().map(|r| (r.sample_id.as_str(), r.label)).collect();
    let synthetic = SyntheticDataset::load(&out.join("synthetic")).map_err(|e| e.to_string())?;
    ensure(synthetic.multi_source, "synthetic set is not marked multi-source")?;
    for s in &synthetic.samples {
        let ConditionRef::Pose(id) = &s.condition_ref else {
            return Err(format!("{} has no pose reference", s.sample_id));
        };
        ensure(labels.get(id.as_str()) == Some(&s.label), format!("{} label mismatch", s.sample_id))?;
    }
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    ensure(minutes <= 45.0, format!("took {minutes:.1} min"))?;
    Ok(format!("{} synthetic labels match their poses, {minutes:.1} min", synthetic.samples.len()))
}

// 12
fn limited_data(root: &Path) -> Check {
    let t = Instant::now();
    let mut c = label_config(&root.join("limited"), 0);
    c.sweep.seeds = vec![0, 1, 2];
    c.sweep.gan_steps = Some(600);
    c.metrics.enabled = false;
    let ks = [5, 10, 20];
    let outcome = run_limited_data_sweep(&c, &ks, false).map_err(|e| e.to_string())?;
    ensure(outcome.failures.is_empty(), format!("{} cells failed", outcome.failures.len()))?;
    ensure(outcome.table.rows.len() == ks.len() * 3 * 2, format!("{} rows", outcome.table.rows.len()))?;
    let mut hits = 0;
    let mut parts = Vec::new();
    for seed in [0, 1, 2] {
        let gaps = balancegen::experiments::sweep::gap_by_k(&outcome.table, seed, &ks, Strategy::Pretrain, Strategy::Real);
        let gaps: Vec<f64> = gaps.into_iter().map(|g| g.unwrap_or(f64::NAN)).collect();
        hits += usize::from(gaps[0] > gaps[1] && gaps[0] > gaps[2]);
        parts.push(format!("{:+.3}/{:+.3}/{:+.3}", gaps[0], gaps[1], gaps[2]));
    }
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    ensure(hits >= 2, format!("gap largest at k=5 in {hits}/3 seeds ({})", parts.join(", ")))?;
    ensure(minutes <= 90.0, format!("took {minutes:.1} min"))?;
    Ok(format!("gaps k=5/10/20: {}, {minutes:.1} min", parts.join(", ")))
}

fn main() {
    tch::set_num_threads(1);
    let quick = std::env::var("BALANCEGEN_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1");
    let mut results: Vec<(usize, &str, Check)> = vec![
        (1, "schedule exactness", schedule_exactness()),
        (2, "mixup exactness", mixup_exactness()),
        (3, "filter oracle", filter_oracle()),
        (4, "FID oracle", fid_oracle()),
        (5, "IS bounds", inception_bounds()),
        (6, "density/coverage oracle", density_coverage_oracle()),
        (7, "pose renderer", pose_renderer()),
    ];
    let oracle = d2dce_oracle();
    if quick {
        results.push((10, "d2dce oracle (quick mode)", oracle));
    } else {
        let root = work_root();
        let started = Instant::now();
        let runs: Result<Vec<SeedRun>, String> =
            (0..3).map(|s| run_seed(&root.join(format!("seed{s}")), s)).collect();
        let minutes = started.elapsed().as_secs_f64() / 60.0;
        match runs {
            Ok(runs) => {
                results.push((8, "imbalance mitigation", imbalance_mitigation(&runs, minutes)));
                results.push((9, "convergence", convergence(&runs)));
                results.push((10, "GAN training sanity", gan_sanity(&runs, &oracle)));
                results.push((13, "determinism", determinism(&runs[0], &root)));
            }
            Err(e) => {
                for (n, name) in [(8, "imbalance mitigation"), (9, "convergence"), (10, "GAN training sanity"), (13, "determinism")] {
                    results.push((n, name, Err(e.clone())));
                }
            }
        }
        results.push((11, "multi-source pipeline", multi_source(&root)));
        results.push((12, "limited-data sweep", limited_data(&root)));
    }
    results.sort_by_key(|(n, _, _)| *n);
    let mut failed = 0;
    for (n, name, check) in &results {
        match check {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail}");
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
