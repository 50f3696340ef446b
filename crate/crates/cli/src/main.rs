//! `deflare`: synthesis, training, inference, evaluation, property checks and
//! diagnostic dumps.
//!
//! Exit codes: 0 success, 1 property failure or runtime error, 2 I/O or
//! configuration error, 3 malformed PPM, 4 bad checkpoint, 5 image extents
//! not divisible by the network's required divisor.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deflare_core::config::KvConfig;
use deflare_core::train::{self, TrainConfig};
use deflare_core::{checkpoint, checks, data, ppm, scan, ssm, Error};

#[derive(Parser)]
#[command(
    name = "deflare",
    version,
    about = "Hierarchical vision state space flare removal"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed (network initialization for `train`, generator root for `synth`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path (directory, checkpoint or file prefix by subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic flare pairs as PPM triples plus metadata.
    Synth {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
    },
    /// Train a network and write a checkpoint and a metric log.
    Train {
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        data_seed: Option<u64>,
        /// Extra `key=value` override, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Metric log path (default: checkpoint path with `.log` appended).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run a checkpoint on one PPM image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// PSNR/SSIM of a checkpoint (or of the raw inputs) against ground truth.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of `<id>_input.ppm` / `<id>_gt.ppm` pairs.
        #[arg(long)]
        dir: PathBuf,
    },
    /// Run property suites: all, ssm, scan, grad or net.
    Check {
        #[arg(default_value = "all")]
        suite: String,
    },
    /// Print the four directional scan orders and hierarchical partitions of a grid.
    ScanDump {
        #[arg(long, default_value_t = 4)]
        height: usize,
        #[arg(long, default_value_t = 4)]
        width: usize,
        /// Window as `HxW`.
        #[arg(long, default_value = "2x2")]
        window: String,
        /// Also print partitions for levels 1..=K.
        #[arg(long, default_value_t = 0)]
        levels: u32,
    },
    /// Print the discretized kernel and token contributions of a diagonal SSM.
    KernelDump {
        /// Comma-separated negative diagonal of A.
        #[arg(long, allow_hyphen_values = true, default_value = "-1")]
        a: String,
        #[arg(long, allow_hyphen_values = true, default_value = "1")]
        b: String,
        #[arg(long, allow_hyphen_values = true, default_value = "1")]
        c: String,
        #[arg(long, default_value_t = std::f64::consts::LN_2)]
        delta: f64,
        #[arg(long, default_value_t = 8)]
        len: usize,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

fn code_of(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Config(_) => 2,
        Error::Image(_) => 3,
        Error::Checkpoint(_) => 4,
        Error::Indivisible { .. } => 5,
        _ => 1,
    }
}

/// Attaches `path` to an error while keeping its exit class.
fn at(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| Failure {
        code: code_of(&e),
        msg: format!("{}: {e}", path.display()),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: code_of(&e),
            msg: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        msg: msg.into(),
    }
}

fn need_out(c: &Common) -> Result<&Path, Failure> {
    c.out.as_deref().ok_or_else(|| usage("--out is required"))
}

fn read_config(c: &Common) -> Result<KvConfig, Failure> {
    match &c.config {
        None => Ok(KvConfig::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| at(p)(e.into()))?;
            KvConfig::from_text(&text).map_err(at(p))
        }
    }
}

fn cmd_synth(c: &Common, n: usize, h: usize, w: usize) -> Result<(), Failure> {
    let out = need_out(c)?;
    let pairs = data::pair_set(n, h, w, c.seed.unwrap_or(0))?;
    data::materialize(out, &pairs).map_err(at(out))?;
    log::info!("wrote {n} pairs of {h}x{w} to {}", out.display());
    Ok(())
}

fn cmd_train(
    c: &Common,
    iters: Option<u64>,
    data_seed: Option<u64>,
    overrides: &[String],
    resume: Option<&Path>,
    log_path: Option<&Path>,
) -> Result<(), Failure> {
    let out = need_out(c)?;
    let mut kv = read_config(c)?;
    let mut flags = KvConfig::new();
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        flags.set(k.trim(), v.trim());
    }
    if let Some(s) = c.seed {
        flags.set("seed", s);
    }
    if let Some(s) = data_seed {
        flags.set("data_seed", s);
    }
    if let Some(i) = iters {
        flags.set("iters", i);
    }
    kv.merge(&flags);
    // a resumed run starts from the checkpoint's network settings
    let resumed = match resume {
        Some(p) => Some(checkpoint::load(p).map_err(at(p))?),
        None => None,
    };
    let mut base = TrainConfig::default();
    if let Some(s) = &resumed {
        base.net = s.config().clone();
    }
    let cfg = base.apply_kv(&kv)?;
    log::info!("effective configuration:\n{}", cfg.to_kv());
    let mut state = match resumed {
        Some(s) => s,
        None => deflare_core::net::NetworkState::new(&cfg.net)?,
    };
    let log_path = log_path.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".log");
        PathBuf::from(p)
    });
    let mut log_text = String::new();
    let report = train::train_more(&mut state, &cfg, |r| {
        log_text.push_str(&r.log_line());
        log_text.push('\n');
        if r.iteration % 50 == 0 {
            log::info!("{}", r.log_line());
        }
    })?;
    for (it, p) in &report.psnr {
        log::info!("iteration {it}: train PSNR {p:.3} dB");
    }
    std::fs::write(&log_path, log_text).map_err(|e| at(&log_path)(e.into()))?;
    checkpoint::save(&state, out).map_err(at(out))?;
    log::info!(
        "saved checkpoint at iteration {} to {}",
        state.iteration,
        out.display()
    );
    Ok(())
}

fn cmd_infer(c: &Common, ckpt: &Path, input: &Path) -> Result<(), Failure> {
    let prefix = need_out(c)?;
    let state = checkpoint::load(ckpt).map_err(at(ckpt))?;
    let img = ppm::read(input).map_err(at(input))?;
    let (clean, flare) = state.infer(&img).map_err(at(input))?;
    let path = |suffix: &str| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(suffix);
        PathBuf::from(p)
    };
    for (suffix, t) in [("_deflared.ppm", &clean), ("_flare.ppm", &flare)] {
        let p = path(suffix);
        ppm::write(&p, t).map_err(at(&p))?;
    }
    Ok(())
}

fn list_pairs(dir: &Path) -> Result<Vec<String>, Failure> {
    let rd = std::fs::read_dir(dir).map_err(|e| at(dir)(e.into()))?;
    let mut ids = Vec::new();
    for entry in rd {
        let name = entry.map_err(|e| at(dir)(e.into()))?.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_suffix("_input.ppm")) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

fn cmd_eval(ckpt: Option<&Path>, dir: &Path) -> Result<(), Failure> {
    let state = match ckpt {
        Some(p) => Some(checkpoint::load(p).map_err(at(p))?),
        None => None,
    };
    let ids = list_pairs(dir)?;
    let mut rows = Vec::new();
    for id in &ids {
        let ip = dir.join(format!("{id}_input.ppm"));
        let gp = dir.join(format!("{id}_gt.ppm"));
        let input = ppm::read(&ip).map_err(at(&ip))?;
        let gt = ppm::read(&gp).map_err(at(&gp))?;
        let pred = match &state {
            Some(s) => s
                .infer(&input)
                .map_err(at(&ip))?
                .0
                .map(|v| v.clamp(0.0, 1.0)),
            None => input,
        };
        let p = deflare_core::metrics::psnr(&pred, &gt, 1.0).map_err(at(&ip))?;
        let s = deflare_core::metrics::ssim(&pred, &gt, 1.0).map_err(at(&ip))?;
        rows.push((id.clone(), p, s));
    }
    println!("{:<12} {:>8} {:>8}", "id", "psnr", "ssim");
    for (id, p, s) in &rows {
        println!("{id:<12} {p:>8.2} {s:>8.4}");
    }
    let n = rows.len().max(1) as f64;
    let mp = rows.iter().map(|r| r.1).sum::<f64>() / n;
    let ms = rows.iter().map(|r| r.2).sum::<f64>() / n;
    println!("{:<12} {mp:>8.2} {ms:>8.4}", "mean");
    Ok(())
}

fn cmd_check(suite: &str) -> Result<(), Failure> {
    let suites =
        checks::Suite::parse(suite).ok_or_else(|| usage(format!("unknown suite {suite:?}")))?;
    let outcomes = checks::run(&suites);
    let mut failed = Vec::new();
    for o in &outcomes {
        match &o.result {
            Ok(()) => println!("PASS {}: {}", o.suite.name(), o.name),
            Err(m) => {
                println!("FAIL {}: {} ({m})", o.suite.name(), o.name);
                failed.push(o.name);
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            msg: format!("{} properties failed: {}", failed.len(), failed.join(", ")),
        })
    }
}

fn parse_window(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || usage(format!("window must look like 2x2, got {s:?}"));
    let (a, b) = s.split_once('x').ok_or_else(bad)?;
    Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
}

fn join<T: fmt::Display>(v: impl IntoIterator<Item = T>) -> String {
    v.into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn cmd_scan_dump(h: usize, w: usize, window: &str, levels: u32) -> Result<(), Failure> {
    let win = parse_window(window)?;
    for d in scan::Direction::ALL {
        let o = d.order(h, w, scan::clamp_window(h, w, win))?;
        println!("{d:?}: {}", join(o.forward()));
    }
    for level in 1..=levels {
        let p = scan::HierPartition::new(h, w, level)?;
        println!(
            "level {level}: stride {} sub-images {} of {}x{}",
            p.stride,
            p.count(),
            p.sub_shape.0,
            p.sub_shape.1
        );
        for y in 0..h {
            println!("  {}", join((0..w).map(|x| p.membership[y * w + x].0)));
        }
    }
    Ok(())
}

fn parse_list(name: &str, s: &str) -> Result<Vec<f64>, Failure> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("--{name}: bad number {t:?}")))
        })
        .collect()
}

fn cmd_kernel_dump(a: &str, b: &str, c: &str, delta: f64, len: usize) -> Result<(), Failure> {
    let a = parse_list("a", a)?;
    // a single value of b or c applies to every state
    let spread = |v: Vec<f64>| if v.len() == 1 { vec![v[0]; a.len()] } else { v };
    let (b, c) = (spread(parse_list("b", b)?), spread(parse_list("c", c)?));
    let (a_bar, b_bar) = ssm::discretize_zoh(&a, &b, delta)?;
    println!("a_bar: {}", join(a_bar.iter().map(|v| format!("{v:.12}"))));
    println!("b_bar: {}", join(b_bar.iter().map(|v| format!("{v:.12}"))));
    let s = ssm::DiscreteSsm::time_invariant(&a, &b, &c, 0.0, delta, len)?;
    for (k, v) in s.kernel()?.iter().enumerate() {
        println!("k[{k}] = {v:.12}");
    }
    if len > 1 {
        let n = len - 1;
        for m in (0..n).rev() {
            println!(
                "contribution({m} -> {n}) = {:.12}",
                ssm::contribution(&s, m, n)?
            );
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let c = &cli.common;
    match &cli.cmd {
        Cmd::Synth { n, height, width } => cmd_synth(c, *n, *height, *width),
        Cmd::Train {
            iters,
            data_seed,
            overrides,
            resume,
            log,
        } => cmd_train(
            c,
            *iters,
            *data_seed,
            overrides,
            resume.as_deref(),
            log.as_deref(),
        ),
        Cmd::Infer { checkpoint, input } => cmd_infer(c, checkpoint, input),
        Cmd::Eval { checkpoint, dir } => cmd_eval(checkpoint.as_deref(), dir),
        Cmd::Check { suite } => cmd_check(suite),
        Cmd::ScanDump {
            height,
            width,
            window,
            levels,
        } => cmd_scan_dump(*height, *width, window, *levels),
        Cmd::KernelDump {
            a,
            b,
            c: cc,
            delta,
            len,
        } => cmd_kernel_dump(a, b, cc, *delta, *len),
    }
}

fn init_logging() {
    let level = match std::env::var("DEFLARE_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
