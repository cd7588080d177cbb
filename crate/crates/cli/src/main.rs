use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lidarseg::io::{read_label_file, read_point_file, write_label_file, write_point_file, write_raw_labels};
use lidarseg::kdtree::bench_build_query;
use lidarseg::model::{checkpoint, segment};
use lidarseg::projection::bench_flatten;
use lidarseg::synthetic::synthetic_scan;
use lidarseg::train::{evaluate, train_toy, window_means, AdamWConfig, MetricsReport, ToyOptions};
use lidarseg::{Error, ModelConfig, ModelParams, Point, PointCloud, RemapTable, Result, IGNORE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WARMUP_REPS: usize = 3;

#[derive(Parser, Debug)]
#[command(name = "lidarseg", version, about = "LiDAR point-cloud semantic segmentation")]
struct Cli {
    /// Worker threads for parallel kernels; defaults to all cores.
    #[arg(long, global = true, env = "LIDARSEG_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Label every point of a scan with a trained model.
    Segment(SegmentArgs),
    /// Overfit a small model on one synthetic toy scene.
    TrainToy(TrainToyArgs),
    /// Evaluate a model on labeled scans from a SemanticKITTI-style tree.
    Eval(EvalArgs),
    /// Time the kd-tree or the flatten kernel.
    Bench(BenchArgs),
    /// Write a synthetic 64-beam scan with labels.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Model config file (key=value lines); must agree with the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set cycle=0,1,2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Label remap table; defaults to SemanticKITTI for 19-class models and
    /// to `raw = train id + 1` otherwise.
    #[arg(long)]
    remap: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth label file; when given, accuracy and IoU are reported.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct TrainToyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    points: usize,
    #[arg(long, default_value_t = 32)]
    features: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    /// Drop the range-image view from the layer cycle.
    #[arg(long)]
    no_range: bool,
    /// Also write the training scene (`scene.bin`, `scene.label`) here.
    #[arg(long)]
    scene_dir: Option<PathBuf>,
    /// Print the loss every this many steps.
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Root holding `sequences/<seq>/{velodyne,labels}`.
    #[arg(long, env = "LIDARSEG_DATA_DIR")]
    data_dir: PathBuf,
    /// Comma-separated sequence ids.
    #[arg(long, default_value = "08")]
    split: String,
    /// Evaluate at most this many scans per sequence.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Suite {
    Knn,
    Flatten,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_enum)]
    suite: Suite,
    /// Number of points.
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    /// Neighbors per query (knn).
    #[arg(long, default_value_t = 16)]
    k: usize,
    /// Grid cells (flatten).
    #[arg(long, default_value_t = 4096)]
    hw: usize,
    /// Feature channels (flatten).
    #[arg(long, default_value_t = 64)]
    channels: usize,
    /// Timed repetitions after warm-up.
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value_t = WARMUP_REPS)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use a point file instead of random points (knn).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Run the flatten arms in float64.
    #[arg(long)]
    f64: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output stem; writes `<stem>.bin` and `<stem>.label`.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage msg={first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} msg={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = match cli.threads {
        Some(0) => return Err(Error::Config("--threads must be >= 1".into())),
        Some(t) => t,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    log(&format!("threads={threads}"));
    match cli.command {
        Command::Segment(a) => cmd_segment(a),
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a, threads),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn log(line: &str) {
    eprintln!("# {line}");
}

fn log_config(config: &ModelConfig) {
    for line in config.to_text().lines() {
        log(line);
    }
}

/// Checkpoint config with file and flag overrides applied; rejected when
/// the result no longer fits the stored tensors.
fn resolve_model(path: &Path, args: &ConfigArgs) -> Result<(ModelConfig, ModelParams<f32>, RemapTable)> {
    let (stored, params) = checkpoint::load(path)?;
    let mut config = match &args.config {
        Some(p) => ModelConfig::load(p)?,
        None => stored.clone(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        config.set_override(k.trim(), v.trim())?;
    }
    config.validate()?;
    if params.audit(&config).is_err() {
        return Err(Error::Config(format!(
            "config does not match checkpoint {}; differing fields: {}",
            path.display(),
            config.differing_fields(&stored).join(", ")
        )));
    }
    let remap = match &args.remap {
        Some(p) => RemapTable::from_file(p)?,
        None => {
            let kitti = RemapTable::semantic_kitti();
            if kitti.classes() == config.classes {
                kitti
            } else {
                RemapTable::shifted(config.classes as u16)
            }
        }
    };
    if remap.classes() != config.classes {
        return Err(Error::Config(format!(
            "remap table has {} classes, model has {}",
            remap.classes(),
            config.classes
        )));
    }
    log_config(&config);
    Ok((config, params, remap))
}

fn cmd_segment(a: SegmentArgs) -> Result<()> {
    let (config, params, remap) = resolve_model(&a.model, &a.cfg)?;
    let (cloud, report) = read_point_file(&a.input)?;
    log(&format!("input={} points={}", a.input.display(), cloud.len()));
    if report.dropped_non_finite > 0 || report.clamped_intensity > 0 {
        log(&format!(
            "dropped_non_finite={} clamped_intensity={}",
            report.dropped_non_finite, report.clamped_intensity
        ));
    }
    let t0 = Instant::now();
    let seg = segment(&params, &config, &cloud)?;
    let total = t0.elapsed().as_secs_f64() * 1e3;
    // one label per record of the input file, dropped records included
    let mut per_record = vec![IGNORE; report.records];
    for (&ri, &l) in report.kept.iter().zip(&seg.labels) {
        per_record[ri] = l;
    }
    write_label_file(&a.out, &per_record, &remap)?;

    let mut counts = vec![0usize; config.classes];
    let mut unlabeled = 0;
    for &l in &seg.labels {
        match counts.get_mut(l as usize) {
            Some(c) => *c += 1,
            None => unlabeled += 1,
        }
    }
    println!("{:<8} {:>8} {:>10}", "class", "raw_id", "points");
    for (c, n) in counts.iter().enumerate() {
        println!("{c:<8} {:>8} {n:>10}", remap.to_raw(c as u16));
    }
    println!("{:<8} {:>8} {unlabeled:>10}", "cropped", 0);
    println!();
    let t = seg.times;
    let stages = [
        ("prepare", seg.prepare_ms),
        ("embed", t.embed),
        ("backbone", t.backbone),
        ("head", t.head),
        ("total", total),
    ];
    for (name, ms) in stages {
        println!("{name:<10} {ms:>10.2} ms");
    }
    println!();
    println!("class,raw_id,points");
    for (c, n) in counts.iter().enumerate() {
        println!("{c},{},{n}", remap.to_raw(c as u16));
    }
    println!("stage,millis");
    for (name, ms) in stages {
        println!("{name},{ms:.3}");
    }
    if let Some(path) = &a.labels {
        let truth = read_label_file(path, report.records, &remap)?;
        let mut cm = lidarseg::ConfusionMatrix::new(config.classes);
        cm.accumulate(&truth, &per_record)?;
        println!("accuracy,{:.6}", cm.accuracy());
        print_metrics(&MetricsReport::new(cm)?);
    }
    Ok(())
}

fn print_metrics(report: &MetricsReport) {
    println!("{}", report.to_table(None));
    print!("{}", report.to_csv());
}

fn cmd_train_toy(a: TrainToyArgs) -> Result<()> {
    let opts = ToyOptions {
        seed: a.seed,
        steps: a.steps,
        points: a.points,
        features: a.features,
        layers: a.layers,
        cycle: a.no_range.then(|| vec![0, 1, 2]),
        optim: AdamWConfig {
            lr: a.lr,
            decay_steps: a.steps,
            ..AdamWConfig::default()
        },
    };
    log(&format!("train_toy {opts:?}"));
    let every = a.log_every.max(1);
    let run = train_toy(&opts, |step, loss| {
        if step % every == 0 || step + 1 == opts.steps {
            println!("step {step:>5} loss {loss:.6}");
        }
    })?;
    log_config(&run.config);
    checkpoint::save(&a.out, &run.config, &run.params)?;
    if let Some(dir) = &a.scene_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_point_file(dir.join("scene.bin"), &run.scene)?;
        let labels = run.scene.labels().unwrap_or_default();
        write_label_file(dir.join("scene.label"), labels, &RemapTable::shifted(run.config.classes as u16))?;
    }
    let first = run.losses.first().copied().unwrap_or(f64::NAN);
    let last = run.losses.last().copied().unwrap_or(f64::NAN);
    println!("initial_loss,{first:.6}");
    println!("final_loss,{last:.6}");
    println!("accuracy,{:.6}", run.accuracy);
    let means = window_means(&run.losses, 50);
    if !means.is_empty() {
        let joined: Vec<String> = means.iter().map(|m| format!("{m:.6}")).collect();
        println!("window_means,{}", joined.join(","));
    }
    println!("checkpoint,{}", a.out.display());
    Ok(())
}

/// Scan and label paths of one sequence, sorted by file name.
fn sequence_files(root: &Path, seq: &str) -> Result<Vec<(PathBuf, PathBuf)>> {
    let dir = root.join("sequences").join(seq);
    let velodyne = dir.join("velodyne");
    let mut scans: Vec<PathBuf> = std::fs::read_dir(&velodyne)
        .map_err(|e| Error::io(&velodyne, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    scans.sort();
    Ok(scans
        .into_iter()
        .map(|scan| {
            let label = dir.join("labels").join(scan.with_extension("label").file_name().unwrap());
            (scan, label)
        })
        .collect())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (config, params, remap) = resolve_model(&a.model, &a.cfg)?;
    log(&format!("data_dir={} split={}", a.data_dir.display(), a.split));
    let mut clouds = Vec::new();
    for seq in a.split.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let mut files = sequence_files(&a.data_dir, seq)?;
        if let Some(limit) = a.limit {
            files.truncate(limit);
        }
        for (scan, label) in files {
            let (mut cloud, report) = read_point_file(&scan)?;
            let labels = read_label_file(&label, report.records, &remap)?;
            cloud.set_labels(report.kept.iter().map(|&i| labels[i]).collect())?;
            clouds.push(cloud);
        }
    }
    if clouds.is_empty() {
        return Err(Error::Config(format!("no scans found for split `{}`", a.split)));
    }
    log(&format!("scans={}", clouds.len()));
    let t0 = Instant::now();
    let report = evaluate(&params, &clouds, &config)?;
    log(&format!("eval_ms={:.1}", t0.elapsed().as_secs_f64() * 1e3));
    print_metrics(&report);
    Ok(())
}

fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new(
        (0..n)
            .map(|_| {
                let x = rng.gen_range(-50.0..50.0);
                let y = rng.gen_range(-50.0..50.0);
                let z = rng.gen_range(-3.0..3.0);
                Point::new(x, y, z, rng.gen_range(0.0..1.0))
            })
            .collect(),
    )
}

fn cmd_bench(a: BenchArgs, threads: usize) -> Result<()> {
    log(&format!("bench {a:?}"));
    match a.suite {
        Suite::Knn => {
            let cloud = match &a.input {
                Some(p) => read_point_file(p)?.0,
                None => random_cloud(a.n, a.seed),
            };
            let report = bench_build_query(&cloud, a.k, threads, a.warmup, a.reps)?;
            println!("{:<8} {:>8} {:>12} {:>18}", "phase", "threads", "median_ms", "checksum");
            for r in &report.rows {
                let sum = report.checksums.iter().find(|c| c.0 == r.threads).map_or(0, |c| c.1);
                println!("{:<8} {:>8} {:>12.3} {:>18x}", r.label, r.threads, r.millis, sum);
            }
            println!("identical,{}", report.identical);
            print!("{}", report.to_csv());
            if !report.identical {
                return Err(Error::Mismatch("kNN results differ across thread counts".into()));
            }
        }
        Suite::Flatten => {
            let report = if a.f64 {
                bench_flatten::<f64>(a.n, a.hw, a.channels, a.warmup, a.reps, a.seed)?
            } else {
                bench_flatten::<f32>(a.n, a.hw, a.channels, a.warmup, a.reps, a.seed)?
            };
            println!("{:<8} {:>8} {:>6} {:>4} {:>12}", "arm", "N", "HW", "C", "median_ms");
            for r in &report.rows {
                println!("{:<8} {:>8} {:>6} {:>4} {:>12.3}", r.arm, r.n, r.hw, r.c, r.millis);
            }
            println!("max_abs_diff,{:e}", report.max_abs_diff);
            print!("{}", report.to_csv());
        }
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let scan = synthetic_scan(a.seed);
    let bin = a.out.with_extension("bin");
    let label = a.out.with_extension("label");
    write_point_file(&bin, &scan.cloud)?;
    write_raw_labels(&label, &scan.raw_labels)?;
    let ignored = scan.cloud.labels().map_or(0, |l| l.iter().filter(|&&v| v == IGNORE).count());
    println!("points,{}", scan.cloud.len());
    println!("ignored,{ignored}");
    println!("scan,{}", bin.display());
    println!("labels,{}", label.display());
    Ok(())
}
