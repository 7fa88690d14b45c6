use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dragopt::latentnet::{load_checkpoint, save_checkpoint, train, TrainMode, TrainingSet};
use dragopt::numfmt::real;
use dragopt::pipeline::{
    evaluate_contours, generate_dataset, run_optimization, run_table1_experiment, write_report, Dataset, PipelineConfig,
    PipelineError,
};
use dragopt::shapegen::read_contour;

#[derive(Parser)]
#[command(name = "dragopt", version, about = "Drag-guided latent shape optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample shapes, simulate them and write a dataset directory.
    GenDataset {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Train the autoencoder and drag net on a dataset's training split.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: TrainMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare jointly and separately trained models.
    Table1 {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an expected-improvement campaign from a trained checkpoint.
    Optimize {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate every contour file (`*.txt`) in a directory.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        contours: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rewrite the summary table and renderings of a campaign directory.
    Report {
        #[arg(long)]
        campaign: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    s.parse().map_err(|e: dragopt::latentnet::LatentError| e.to_string())
}

fn config(path: &Option<PathBuf>) -> Result<PipelineConfig, PipelineError> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn io(path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError::Io { path: path.display().to_string(), msg: e.to_string() }
}

fn run(cmd: Command) -> Result<(), PipelineError> {
    match cmd {
        Command::GenDataset { config: c, out, n, seed } => {
            let cfg = config(&c)?;
            let ds = generate_dataset(&cfg, &out, n, seed)?;
            let failed = ds.rows.iter().filter(|r| !r.usable()).count();
            println!(
                "{} shapes, {failed} unconverged; train cd mean {} std {} over {} rows",
                ds.rows.len(),
                real(ds.stats.mean),
                real(ds.stats.std),
                ds.stats.count
            );
        }
        Command::Train { config: c, data, mode, out } => {
            let cfg = config(&c)?;
            let ds = Dataset::load(&data)?;
            let rows = ds.train_rows();
            let labels = ds.labels(&rows).iter().map(|&y| y as f32).collect();
            let set = TrainingSet::new(cfg.pixels(), ds.images(&rows)?, labels)?;
            let (params, metrics) = train(&set, &cfg.train_config(mode, cfg.seed))?;
            save_checkpoint(&out, &params)?;
            let mpath = PathBuf::from(format!("{}.metrics.tsv", out.display()));
            std::fs::write(&mpath, metrics.to_tsv()).map_err(|e| io(&mpath, e))?;
            if let Some(m) = metrics.last() {
                println!("final recon {:.5} kl {:.4} dn {:.5}", m.loss_recon, m.loss_kl, m.loss_dn);
            }
        }
        Command::Table1 { config: c, data, out } => {
            let cfg = config(&c)?;
            let table = run_table1_experiment(&Dataset::load(&data)?, &cfg, None)?;
            std::fs::write(&out, table.to_text()).map_err(|e| io(&out, e))?;
            print!("{}", table.to_text().split("\n\n").next().unwrap_or(""));
            println!();
            if let Some((dn, gp)) = table.joint_wins() {
                println!("joint beats separate: drag net {dn}, surrogate {gp}");
            }
        }
        Command::Optimize { config: c, data, ckpt, out } => {
            let cfg = config(&c)?;
            let ds = Dataset::load(&data)?;
            let params = load_checkpoint(&ckpt, &cfg.train_config(TrainMode::Joint, cfg.seed).net())?;
            let report = run_optimization(&ds, &params, &cfg, &out)?;
            println!(
                "best training cd {}; {} candidates evaluated, {} skipped",
                real(report.best_train_cd),
                report.candidates.len(),
                report.skipped.len()
            );
            if let Some(best) = report.candidates.first() {
                println!("best candidate cd {} ({:+.2}% improvement)", real(best.cd), 100.0 * best.improvement);
            }
        }
        Command::Evaluate { config: c, contours, out } => {
            let cfg = config(&c)?;
            let mut files: Vec<PathBuf> = std::fs::read_dir(&contours)
                .map_err(|e| io(&contours, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "txt"))
                .collect();
            files.sort();
            let shapes = files.iter().map(|f| read_contour(f)).collect::<Result<Vec<_>, _>>()?;
            let setup = cfg.flow_setup();
            let records = evaluate_contours(&shapes, &setup, cfg.workers);
            let p = setup.params;
            let mut s = format!(
                "# rho={} nu={} v_in={} resolution={}\nfile\tcd\tfrontal_area\tconverged\titerations\n",
                real(p.rho),
                real(p.nu),
                real(p.v_in),
                real(setup.resolution)
            );
            for (f, r) in files.iter().zip(&records) {
                let name = f.file_name().unwrap_or_default().to_string_lossy();
                match r {
                    Ok(r) => writeln!(s, "{name}\t{}\t{}\t{}\t{}", real(r.cd), real(r.frontal), u8::from(r.converged), r.iterations),
                    Err(e) => {
                        log::warn!("{name}: {e}");
                        writeln!(s, "{name}\tNaN\tNaN\t0\t0")
                    }
                }
                .unwrap();
            }
            std::fs::write(&out, s).map_err(|e| io(&out, e))?;
            println!("{} contours evaluated", records.len());
        }
        Command::Report { campaign } => {
            write_report(&campaign)?;
            println!("wrote {}", campaign.join("summary.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
