use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use codequant::lutgemm::{bench_gemm, BenchRow, GemmShape};
use codequant::model::{generate_synthetic_model, inspect, save_model};
use codequant::pipeline::{evaluate_seeds, run_pipeline, summary_text, PipelineConfig};
use codequant::{Error, Result, RngState};

#[derive(Parser)]
#[command(name = "codequant", version, about = "Clustered quantization for small mixture-of-experts models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `model.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a freshly generated full-precision model.
    Generate(Common),
    /// Compress one model and write `report.txt` and `model.cqm`.
    Pipeline(Common),
    /// Run the pipeline for every seed in `eval.seeds` and summarize.
    Eval(Common),
    /// Time the table kernel against the reference and a dense GEMM.
    BenchGemm {
        /// Semicolon-separated `N,d_in,d_out,g` shapes.
        #[arg(long, default_value = "256,256,256,16;256,256,256,64;256,1024,256,64;512,512,512,256")]
        shapes: String,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print the header and tensor list of a model container.
    Inspect { path: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence { .. } | Error::NonFinite(_) => 3,
        Error::Io(_) | Error::Format(_) => 4,
        _ => 1,
    }
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn load_config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(path) => PipelineConfig::parse(&fs::read_to_string(path)?)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.model.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &PipelineConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("codequant-out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn parse_shapes(spec: &str) -> Result<Vec<GemmShape>> {
    spec.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let v: Vec<usize> = s
                .split(',')
                .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("bad shape `{s}`"))))
                .collect::<Result<_>>()?;
            match v[..] {
                [n, d_in, d_out, g] => Ok(GemmShape { n, d_in, d_out, g }),
                _ => Err(Error::Config(format!("shape `{s}` needs N,d_in,d_out,g"))),
            }
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            set_threads(c.threads)?;
            let cfg = load_config(&c)?;
            cfg.validate()?;
            let w = generate_synthetic_model(&cfg.model, cfg.outlier_channels, cfg.outlier_scale)?;
            let dir = out_dir(&cfg)?;
            save_model(&w, dir.join("model.cqm"))?;
            println!("wrote {}", dir.join("model.cqm").display());
        }
        Command::Pipeline(c) => {
            set_threads(c.threads)?;
            let cfg = load_config(&c)?;
            let (report, w) = run_pipeline(&cfg)?;
            let dir = out_dir(&cfg)?;
            write(&dir, "report.txt", &report.to_text())?;
            save_model(&w, dir.join("model.cqm"))?;
            println!(
                "{} seed {}: final hidden error {:e}, router change {:e}",
                report.mode.name(),
                report.seed,
                report.final_error,
                report.router_change_mean()
            );
        }
        Command::Eval(c) => {
            set_threads(c.threads)?;
            let cfg = load_config(&c)?;
            let reports = evaluate_seeds(&cfg)?;
            let text = summary_text(&cfg, &reports);
            match &cfg.out {
                Some(_) => write(&out_dir(&cfg)?, "eval.txt", &text)?,
                None => print!("{text}"),
            }
        }
        Command::BenchGemm {
            shapes,
            repeats,
            seed,
            out,
            threads,
        } => {
            set_threads(threads)?;
            let rows = bench_gemm(&parse_shapes(&shapes)?, repeats, &RngState::new(seed))?;
            let mut text = format!("{}\n", BenchRow::HEADER);
            for r in &rows {
                text.push_str(&r.to_line());
                text.push('\n');
            }
            print!("{text}");
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                write(&dir, "bench.txt", &text)?;
            }
        }
        Command::Inspect { path } => {
            let m = inspect(&fs::read(&path)?)?;
            println!("[config]");
            for (k, v) in &m.config {
                println!("{k} = {v}");
            }
            println!("\n[tensors]");
            for t in &m.tensors {
                let dims: Vec<String> = t.dims.iter().map(u64::to_string).collect();
                println!("{} {:?} [{}]", t.name, t.dtype, dims.join(", "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
