use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use evio_core::config::PipelineConfig;
use evio_core::dataset::{load_dataset, read_trajectory_file, Dataset};
use evio_core::estimator::{packet_stream, run_odometry, Odometry, OdometryOutput, StageTimings};
use evio_core::evaluation::{evaluate, write_eval_csv, write_trajectory, AlignMode, TrajectoryFile, DEFAULT_MAX_DT};
use evio_core::features::write_track_csv;
use evio_core::frame_enhance::enhance_stages;
use evio_core::geometry::Camera;
use evio_core::image::GrayImage;
use evio_core::simulator::{export_dataset, simulate as run_simulation, SimSpec};

use crate::pipeline::{depth_source, init_threads, load_config, pipeline_config, resolve_threads};
use crate::{BenchArgs, ConfigCmd, EnhanceArgs, EvalArgs, Failure, PipelineArgs, RunArgs, SimulateArgs, TrackArgs};

type Outcome = Result<(), Failure>;

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_failure(path, e))
}

fn create_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path).map_err(|e| io_failure(path, e))
}

pub fn simulate(a: SimulateArgs, threads: Option<usize>) -> Outcome {
    init_threads(threads, 0)?;
    let mut spec = SimSpec::default();
    if let Some(s) = &a.scene {
        spec.scene = s.parse()?;
    }
    if let Some(t) = a.trajectory {
        spec.trajectory = t;
    }
    if let Some(d) = a.duration {
        if !(d > 0.0 && d.is_finite()) {
            return Err(Failure::Usage(format!("--duration must be positive, got {d}")));
        }
        spec.duration = d;
    }
    if let Some(c) = a.contrast {
        if !(c > 0.0) {
            return Err(Failure::Usage(format!("--contrast must be positive, got {c}")));
        }
        spec.events.contrast = c;
    }
    if let Some(n) = a.noise {
        if !(n >= 0.0) {
            return Err(Failure::Usage(format!("--noise must be non-negative, got {n}")));
        }
        spec.events.noise_rate = n;
    }
    if let Some(s) = a.seed {
        spec.events.seed = s;
        spec.imu_noise.seed = s;
    }
    if let Some(r) = a.depth_rate {
        if !(r >= 0.0) {
            return Err(Failure::Usage(format!("--depth-rate must be non-negative, got {r}")));
        }
        spec.depth_rate = r;
    }
    let (_, _, data) = run_simulation(&spec, &Camera::default())?;
    export_dataset(&a.out, &data)?;
    println!(
        "{}: {} events, {} IMU samples, {} poses, {} depth frames",
        a.out.display(),
        data.events.events.len(),
        data.imu.len(),
        data.groundtruth.len(),
        data.depth_frames.len()
    );
    Ok(())
}

fn prepare(dataset: &Path, p: &PipelineArgs, threads: Option<usize>) -> Result<(PipelineConfig, Dataset), Failure> {
    let cfg = pipeline_config(p)?;
    init_threads(threads, cfg.threads)?;
    let data = load_dataset(dataset)?;
    log::info!("{}: {} events, {} IMU samples", dataset.display(), data.events.len(), data.imu.len());
    Ok((cfg, data))
}

fn odometry(cfg: &PipelineConfig, data: &Dataset, depth_flag: Option<&str>) -> Result<OdometryOutput, Failure> {
    let depth = depth_source(depth_flag, cfg, data)?;
    Ok(run_odometry(&data.events, &data.imu, &data.camera, cfg, depth.as_deref())?)
}

fn trajectory(out: &OdometryOutput) -> TrajectoryFile {
    TrajectoryFile { samples: out.frames.iter().map(|f| (f.timestamp, f.pose)).collect() }
}

fn print_timings(t: &StageTimings) {
    let per_frame = |d: Duration| d.as_secs_f64() * 1e3 / t.frames.max(1) as f64;
    println!("{:<12}{:>10}{:>12}", "stage", "total_s", "ms/frame");
    for (name, d) in [
        ("warp", t.warp),
        ("accumulate", t.accumulate),
        ("enhance", t.enhance),
        ("track", t.track),
        ("estimate", t.estimate),
        ("depth", t.depth),
        ("total", t.total()),
    ] {
        println!("{name:<12}{:>10.3}{:>12.2}", d.as_secs_f64(), per_frame(d));
    }
    println!("warped {:.3e} events/s", t.warp_events_per_sec());
    println!("enhanced {:.1} frames/s", t.frames as f64 / t.enhance.as_secs_f64().max(1e-12));
    println!("pipeline {:.1} frames/s", t.frames_per_sec());
}

pub fn run(a: RunArgs, threads: Option<usize>) -> Outcome {
    let (cfg, data) = prepare(&a.dataset, &a.pipeline, threads)?;
    let out = odometry(&cfg, &data, a.pipeline.depth_source.as_deref())?;
    let traj = trajectory(&out);
    let path = a.out.unwrap_or_else(|| a.dataset.join("traj_est.txt"));
    let mut w = create(&path)?;
    write_trajectory(&mut w, &traj).and_then(|_| w.flush()).map_err(|e| io_failure(&path, e))?;
    let lost: usize = out.gaps.iter().map(|g| g.frames).sum();
    println!("{} poses, {} tracking gaps ({lost} frames), scale {:.4}", out.frames.len(), out.gaps.len(), out.scale);
    print_timings(&out.timings);
    println!("trajectory: {}", path.display());
    if let Some(gt) = &data.groundtruth {
        match evaluate(&traj, gt, DEFAULT_MAX_DT, AlignMode::Se3) {
            Ok(r) => println!("APE (se3): rmse {:.4} m, max {:.4} m over {} poses", r.stats.rmse, r.stats.max, r.association.pairs.len()),
            Err(e) => log::warn!("APE unavailable: {e}"),
        }
    }
    Ok(())
}

pub fn enhance(a: EnhanceArgs, threads: Option<usize>) -> Outcome {
    let mut cfg = load_config(&a.config)?;
    if let Some(m) = &a.method {
        cfg.set("enhance.method", m)?;
    }
    init_threads(threads, cfg.threads)?;
    let img = GrayImage::read_pgm(&a.input)?;
    let stages = enhance_stages(&img, &cfg.enhance)?;
    if let Some(dir) = &a.dump_stages {
        create_dir(dir)?;
        for (name, stage) in stages.named() {
            stage.write_pgm(dir.join(format!("{name}.pgm")))?;
        }
    }
    stages.output.write_pgm(&a.out)?;
    Ok(())
}

pub fn track(a: TrackArgs, threads: Option<usize>) -> Outcome {
    let (cfg, data) = prepare(&a.dataset, &a.pipeline, threads)?;
    let depth = depth_source(a.pipeline.depth_source.as_deref(), &cfg, &data)?;
    if let Some(dir) = &a.dump_frames {
        create_dir(dir)?;
    }
    let mut odo = Odometry::new(data.camera, cfg.clone(), depth.as_deref(), &data.imu)?;
    let mut rows = Vec::new();
    for (k, ap) in packet_stream(&data.events, &data.imu, &cfg)?.enumerate() {
        let f = odo.process_frame(&ap?)?;
        if let Some(dir) = &a.dump_frames {
            f.frame.write_pgm(dir.join(format!("frame_{k:06}.pgm")))?;
            f.enhanced.write_pgm(dir.join(format!("enhanced_{k:06}.pgm")))?;
        }
        rows.extend(f.tracks);
    }
    let mut w = create(&a.out)?;
    write_track_csv(&mut w, &rows).and_then(|_| w.flush()).map_err(|e| io_failure(&a.out, e))?;
    let tracks = rows.iter().map(|r| r.track_id).max().map_or(0, |m| m + 1);
    println!("{}: {} rows, {tracks} tracks over {} frames", a.out.display(), rows.len(), odo.frames().len());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Outcome {
    let mode: AlignMode = a.align.parse()?;
    let max_dt = match a.max_dt {
        Some(s) if s > 0.0 && s.is_finite() => (s * 1e9).round() as i64,
        Some(s) => return Err(Failure::Usage(format!("--max-dt must be positive, got {s}"))),
        None => DEFAULT_MAX_DT,
    };
    let est = read_trajectory_file(&a.est)?;
    let gt = read_trajectory_file(&a.gt)?;
    let r = evaluate(&est, &gt, max_dt, mode)?;
    let s = &r.stats;
    println!("pairs   {}", r.association.pairs.len());
    println!("align   {}", r.alignment.mode);
    if r.alignment.mode == AlignMode::Sim3 {
        println!("scale   {:.6}", r.alignment.scale);
    }
    println!("rmse    {:.6}", s.rmse);
    println!("mean    {:.6}", s.mean);
    println!("median  {:.6}", s.median);
    println!("max     {:.6}", s.max);
    println!("min     {:.6}", s.min);
    if let Some(path) = &a.csv {
        let mut w = create(path)?;
        write_eval_csv(&mut w, &r).and_then(|_| w.flush()).map_err(|e| io_failure(path, e))?;
    }
    Ok(())
}

pub const BENCH_HEADER: &str = "stage,n,p50_ms,events_per_s";

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn bench(a: BenchArgs, threads: Option<usize>) -> Outcome {
    if a.runs == 0 {
        return Err(Failure::Usage("--runs must be at least 1".into()));
    }
    let (cfg, data) = prepare(&a.dataset, &a.pipeline, threads)?;
    let mut runs = Vec::with_capacity(a.runs);
    for i in 0..a.runs {
        let out = odometry(&cfg, &data, a.pipeline.depth_source.as_deref())?;
        log::info!("run {}: {:.3} s", i + 1, out.timings.total().as_secs_f64());
        runs.push(out.timings);
    }
    let stages: [(&str, fn(&StageTimings) -> Duration, bool); 7] = [
        ("warp", |t| t.warp, true),
        ("accumulate", |t| t.accumulate, true),
        ("enhance", |t| t.enhance, false),
        ("track", |t| t.track, false),
        ("estimate", |t| t.estimate, false),
        ("depth", |t| t.depth, false),
        ("total", |t| t.total(), true),
    ];
    let (events, frames) = (runs[0].events, runs[0].frames);
    let mut report = format!("{BENCH_HEADER}\n");
    for (name, get, per_event) in stages {
        let p50 = median(runs.iter().map(|t| get(t).as_secs_f64() * 1e3).collect());
        let n = if per_event { events } else { frames };
        let rate = events as f64 / (p50 * 1e-3).max(1e-12);
        report.push_str(&format!("{name},{n},{p50:.3},{rate:.1}\n"));
    }
    match &a.csv {
        Some(path) => {
            let mut w = create(path)?;
            w.write_all(report.as_bytes()).and_then(|_| w.flush()).map_err(|e| io_failure(path, e))?;
        }
        None => print!("{report}"),
    }
    Ok(())
}

pub fn config(a: ConfigCmd) -> Outcome {
    let cfg = if a.defaults { PipelineConfig::default() } else { load_config(&a.config)? };
    resolve_threads(None, cfg.threads)?;
    print!("{}", cfg.dump());
    Ok(())
}
