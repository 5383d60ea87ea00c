//! The `colocam` command line.
//!
//! Errors go to stderr as one line, `error kind=<kind>: <message>`. Usage
//! errors and missing inputs exit with 2, other failures with 1.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::benchmark::Variant;
use crate::error::{Error, Result};
use crate::eval::{bench_coloc, extract_bbox, iou};
use crate::gradcheck::{check_all, GradcheckConfig};
use crate::io;
use crate::losses::{Affinity, Backend, KernelConfig};
use crate::synth::{generate_benchmark, SynthConfig};
use crate::trainer::{train, TrainConfig};

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "colocam",
    version,
    about = "Multi-frame CAM localization losses"
)]
struct Cli {
    /// Worker threads. With 1, every output except timings is reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Overrides every seed the subcommand uses.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Fit per-frame maps to every clip of a dataset.
    Train(TrainArgs),
    /// Score trained maps against the ground-truth boxes.
    Eval(EvalArgs),
    /// Time the CoLoc loss against window size.
    Bench(BenchArgs),
    /// Smooth a map with the bilateral kernel of a frame.
    Filter(FilterArgs),
    /// Check loss gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Flat key=value generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    videos: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value trainer settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// pls, pls-crf-asc, full or temporal-max.
    #[arg(long, default_value = "full")]
    variant: String,
    /// Fill the log's wall_ms column; otherwise it is zero.
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Where the CSVs go; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Comma-separated window sizes.
    #[arg(long, default_value = "1,2,4,8,16,32,64")]
    sizes: String,
    /// Frame size as HxW.
    #[arg(long, default_value = "64x64")]
    hw: String,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    shifts: usize,
    /// CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FilterArgs {
    /// P6 frame supplying the kernel features.
    #[arg(long)]
    frame: PathBuf,
    /// P5 map to smooth.
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100.0)]
    spatial: f64,
    #[arg(long, default_value_t = 15.0)]
    color: f64,
    #[arg(long, default_value_t = 16)]
    shifts: usize,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Run(e),
        }
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::{DisplayHelp, DisplayVersion};
            if matches!(e.kind(), DisplayHelp | DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            let _ = writeln!(stderr, "error kind=usage: {first}");
            return 2;
        }
    };
    let mut buf = Vec::new();
    let result = dispatch(&cli, &mut buf);
    let _ = stdout.write_all(&buf);
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(stderr, "error kind=usage: {}", one_line(&m));
            2
        }
        Err(Failure::Run(e)) => {
            let _ = writeln!(
                stderr,
                "error kind={}: {}",
                e.kind(),
                one_line(&e.to_string())
            );
            1
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn dispatch(cli: &Cli, stdout: &mut Vec<u8>) -> std::result::Result<(), Failure> {
    if cli.threads == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Failure::Run(Error::InvalidConfig(e.to_string())))?;
    pool.install(|| match &cli.command {
        Command::Gen(a) => gen(a, cli.seed),
        Command::Train(a) => train_cmd(a, cli.seed, cli.threads > 1),
        Command::Eval(a) => eval_cmd(a, stdout),
        Command::Bench(a) => bench(a, cli.seed, stdout),
        Command::Filter(a) => filter(a),
        Command::Gradcheck(a) => gradcheck(a, cli.seed, stdout),
    })
}

fn read_kv(path: &Path) -> Result<Vec<io::Entry>> {
    io::parse_kv(&io::read_text(path)?).map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

fn gen(a: &GenArgs, seed: Option<u64>) -> std::result::Result<(), Failure> {
    let mut cfg = match &a.config {
        Some(p) => io::synth_config_from_kv(&read_kv(p)?)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let clips = generate_benchmark(&cfg, a.videos)?;
    let videos: Vec<io::VideoData> = clips
        .into_iter()
        .enumerate()
        .map(|(id, v)| io::VideoData {
            id,
            frames: v.frames,
            seeds: v.seeds,
            boxes: v.boxes,
        })
        .collect();
    let echo = io::synth_config_to_kv(&cfg)
        .lines()
        .filter_map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
        })
        .collect();
    io::save_dataset(&a.out, &videos, echo)?;
    Ok(())
}

fn video_dir(run: &Path, id: usize) -> PathBuf {
    run.join(format!("video_{id:03}"))
}

fn train_cmd(a: &TrainArgs, seed: Option<u64>, parallel: bool) -> std::result::Result<(), Failure> {
    let variant: Variant = a
        .variant
        .parse()
        .map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let mut base = match &a.config {
        Some(p) => io::train_config_from_kv(&read_kv(p)?, TrainConfig::default())?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        base.seed = s;
    }
    base.parallel = parallel;
    base.timing = a.timing;
    let cfg = variant.apply(&base);
    let (_, videos) = io::load_dataset(&a.data)?;

    let echo = format!("variant={variant}\n{}", io::train_config_to_kv(&cfg));
    io::write_file(&a.out.join("config.txt"), echo.as_bytes())?;
    for v in &videos {
        let run_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(v.id as u64),
            ..cfg.clone()
        };
        let out = train(&v.frames, &v.seeds, &run_cfg)?;
        let dir = video_dir(&a.out, v.id);
        let (h, w) = (v.frames.height(), v.frames.width());
        let frames: Vec<&[[f64; 2]]> = (0..out.logits.len()).map(|t| out.logits.frame(t)).collect();
        io::write_file(&dir.join("logits.bin"), &io::write_logits(&frames, h, w))?;
        for t in 0..out.logits.len() {
            let map = io::write_map(&out.logits.foreground(t), h, w)?;
            io::write_file(&dir.join(format!("maps/{t:04}.pgm")), &map)?;
        }
        io::write_file(&dir.join("log.csv"), out.log.to_csv().as_bytes())?;
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs, stdout: &mut Vec<u8>) -> std::result::Result<(), Failure> {
    let manifest = io::load_manifest(&a.data)?;
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    let mut frames_csv = String::from("video,frame_id,iou,hit\n");
    let mut summary = String::from("video,corloc\n");
    let mut total = 0.0;
    for e in &manifest.videos {
        let gts = io::read_boxes(&io::read_text(&a.data.join(&e.boxes))?)?;
        if gts.len() != e.frames {
            return Err(Error::InvalidSequence(format!(
                "video {}: {} boxes for {} frames",
                e.id,
                gts.len(),
                e.frames
            ))
            .into());
        }
        let mut hits = 0;
        for (t, gt) in gts.iter().enumerate() {
            let path = video_dir(&a.run, e.id).join(format!("maps/{t:04}.pgm"));
            let (h, w, map) = io::read_map(&io::read_file(&path)?)?;
            let v = iou(&extract_bbox(&map, h, w)?.bbox, gt);
            let hit = v > 0.5;
            hits += hit as usize;
            let _ = writeln!(frames_csv, "{},{t},{v},{}", e.id, hit as u8);
        }
        let c = if e.frames == 0 {
            0.0
        } else {
            hits as f64 / e.frames as f64
        };
        total += c;
        let _ = writeln!(summary, "{},{c}", e.id);
    }
    if manifest.videos.is_empty() {
        return Err(Error::InvalidSequence("dataset lists no videos".into()).into());
    }
    let mean = total / manifest.videos.len() as f64;
    let _ = writeln!(summary, "mean,{mean}");
    io::write_file(&out.join("corloc.csv"), summary.as_bytes())?;
    io::write_file(&out.join("frames.csv"), frames_csv.as_bytes())?;
    let _ = writeln!(stdout, "corloc {mean}");
    Ok(())
}

fn parse_list(s: &str) -> std::result::Result<Vec<usize>, Failure> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Failure::Usage(format!("bad size {p:?} in --sizes")))
        })
        .collect()
}

fn parse_hw(s: &str) -> std::result::Result<(usize, usize), Failure> {
    let bad = || Failure::Usage(format!("--hw expects HxW, got {s:?}"));
    let (h, w) = s.split_once('x').ok_or_else(bad)?;
    Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?))
}

fn emit(out: &Option<PathBuf>, text: &str, stdout: &mut Vec<u8>) -> Result<()> {
    match out {
        Some(p) => io::write_file(p, text.as_bytes()),
        None => {
            stdout.extend_from_slice(text.as_bytes());
            Ok(())
        }
    }
}

fn bench(
    a: &BenchArgs,
    seed: Option<u64>,
    stdout: &mut Vec<u8>,
) -> std::result::Result<(), Failure> {
    let sizes = parse_list(&a.sizes)?;
    let (h, w) = parse_hw(&a.hw)?;
    let cfg = KernelConfig {
        shifts: a.shifts,
        ..KernelConfig::default()
    };
    let rows = bench_coloc(&sizes, h, w, &cfg, a.repeats, seed.unwrap_or(0))?;
    let mut csv = String::from("n,wall_ms\n");
    for r in rows {
        let _ = writeln!(csv, "{},{}", r.n, r.wall_ms);
    }
    emit(&a.out, &csv, stdout)?;
    Ok(())
}

fn filter(a: &FilterArgs) -> std::result::Result<(), Failure> {
    let frame = io::read_frame(&io::read_file(&a.frame)?)?;
    let (h, w, map) = io::read_map(&io::read_file(&a.map)?)?;
    if (h, w) != (frame.height(), frame.width()) {
        return Err(Error::Shape {
            expected: frame.len(),
            actual: h * w,
        }
        .into());
    }
    let cfg = KernelConfig {
        spatial_bandwidth: a.spatial,
        color_bandwidth: a.color,
        shifts: a.shifts,
    };
    let aff = Affinity::frame(&frame, &cfg, Backend::Lattice)?;
    let wm = aff.apply(&map, 1)?;
    // Normalized smoothing including each pixel's own weight.
    let out: Vec<f64> = map
        .iter()
        .zip(&wm)
        .zip(aff.ones())
        .map(|((m, s), o)| ((s + m) / (o + 1.0)).clamp(0.0, 1.0))
        .collect();
    io::write_file(&a.out, &io::write_map(&out, h, w)?)?;
    Ok(())
}

fn gradcheck(
    a: &GradcheckArgs,
    seed: Option<u64>,
    stdout: &mut Vec<u8>,
) -> std::result::Result<(), Failure> {
    let cfg = GradcheckConfig {
        instances: a.instances,
        seed: seed.unwrap_or(0),
        ..GradcheckConfig::default()
    };
    let reports = check_all(&cfg)?;
    let mut csv = String::from("loss,instances,checked,max_rel_error\n");
    for r in &reports {
        let _ = writeln!(
            csv,
            "{},{},{},{:e}",
            r.loss, r.instances, r.checked, r.max_rel_error
        );
    }
    emit(&None, &csv, stdout)?;
    if let Some(r) = reports
        .iter()
        .find(|r| !(r.max_rel_error <= GRADCHECK_TOLERANCE))
    {
        return Err(Failure::Run(Error::InvalidConfig(format!(
            "{} gradient off by {:e}, above {GRADCHECK_TOLERANCE:e}",
            r.loss, r.max_rel_error
        ))));
    }
    Ok(())
}
