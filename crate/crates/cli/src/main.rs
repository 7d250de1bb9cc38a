use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use oct_bridge::{serve, ServeOptions};
use oct_servo::galvo::{acquire_viewing_card_samples, fit_calibration, GalvoCalibration};
use oct_servo::imaging::raster::encode_png;
use oct_servo::imaging::RenderMode;
use oct_servo::metrics::AggregateRow;
use oct_servo::rng::substream;
use oct_servo::trial::{replay_file, run_batch, write_batch, ReplayFrame, TrialConfig};

#[derive(Parser)]
#[command(name = "octsim", version, about = "Microscope/OCT guided subretinal insertion simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a batch of scripted trials and write records and aggregates.
    Simulate {
        /// TOML configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Fit the galvo map from a simulated viewing-card acquisition.
    Calibrate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Grid points per axis (N = grid²).
        #[arg(long)]
        grid: Option<usize>,
        /// Spot localisation noise, px.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the fitted calibration as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render the frames of a trial record.
    Replay {
        record: PathBuf,
        /// Write PNG frames into this directory.
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Serve an interactive session over the bridge protocol.
    Serve {
        #[arg(long, default_value_t = 7878)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Simulated seconds per wall second; 0 runs unpaced.
        #[arg(long, default_value_t = 1.0)]
        realtime: f64,
        /// Omit PNG payloads from frame messages.
        #[arg(long)]
        no_images: bool,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

fn load(config: Option<&PathBuf>) -> oct_servo::Result<TrialConfig> {
    match config {
        Some(p) => TrialConfig::load(p),
        None => Ok(TrialConfig::default()),
    }
}

fn print_aggregate(rows: &[AggregateRow]) {
    println!("{:<34} {:>10} {:>10} {:>4}   {:>16}", "metric", "mean", "std", "n", "reference");
    for r in rows {
        let Some(s) = r.summary else { continue };
        let reference = r
            .reference
            .map(|x| format!("{:.1} ± {:.1}", x.mean, x.std))
            .unwrap_or_default();
        println!("{:<34} {:>10.3} {:>10.3} {:>4}   {:>16}", r.metric, s.mean, s.std, s.n, reference);
    }
}

fn run(cli: Cli) -> oct_servo::Result<()> {
    match cli.command {
        Command::Simulate {
            config,
            trials,
            seed,
            out,
        } => {
            let mut cfg = load(config.as_ref())?;
            if let Some(n) = trials {
                cfg.trials = n;
            }
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            let started = std::time::Instant::now();
            let report = run_batch(&cfg)?;
            write_batch(&report, &out)?;
            println!(
                "{}/{} trials done in {:.2} s",
                report.done_count(),
                report.records.len(),
                started.elapsed().as_secs_f64()
            );
            for r in report.records.iter().filter(|r| !r.status.is_done()) {
                println!("trial {}: {:?}", r.trial_index, r.status);
            }
            print_aggregate(&report.aggregate);
            println!("hash {}", report.hash);
            println!("wrote {}", out.display());
        }
        Command::Calibrate {
            config,
            grid,
            sigma,
            seed,
            out,
        } => {
            let cfg = load(config.as_ref())?;
            let mut card = cfg.viewing_card;
            if let Some(g) = grid {
                card.grid_size = g;
            }
            if let Some(s) = sigma {
                card.position_noise_px = s;
            }
            let truth = GalvoCalibration::from(cfg.galvo_truth);
            let mut rng = substream(seed, "calibration", 0);
            let samples = acquire_viewing_card_samples(&truth, &card, &mut rng)?;
            let fit = fit_calibration(&samples)?;
            println!("samples        {}", samples.len());
            println!("R              [[{:.6}, {:.6}], [{:.6}, {:.6}]]", fit.r[(0, 0)], fit.r[(0, 1)], fit.r[(1, 0)], fit.r[(1, 1)]);
            println!("T              [{:.6}, {:.6}]", fit.t.x, fit.t.y);
            println!("rms residual   {:.4} px", fit.rms_residual(&samples));
            println!("R rel. error   {:.3e}", (fit.r - truth.r).norm() / truth.r.norm());
            if let Some(p) = out {
                std::fs::write(&p, serde_json::to_string_pretty(&fit.to_record())?)?;
                println!("wrote {}", p.display());
            }
        }
        Command::Replay { record, frames } => {
            let mode = if frames.is_some() { RenderMode::Full } else { RenderMode::Annotations };
            let out = replay_file(&record, mode)?;
            for w in &out.warnings {
                log::warn!("{w}");
            }
            let ms = out.frames.iter().filter(|f| matches!(f, ReplayFrame::Microscope(_))).count();
            println!("{} frames ({} microscope, {} B-scan)", out.frames.len(), ms, out.frames.len() - ms);
            if let Some(dir) = frames {
                std::fs::create_dir_all(&dir)?;
                for (i, f) in out.frames.iter().enumerate() {
                    let (name, px) = match f {
                        ReplayFrame::Microscope(m) => (format!("{i:05}_microscope.png"), m.pixels.as_ref()),
                        ReplayFrame::Bscan(b) => (format!("{i:05}_bscan.png"), b.pixels.as_ref()),
                    };
                    if let Some(px) = px {
                        std::fs::write(dir.join(name), encode_png(px)?)?;
                    }
                }
                println!("wrote {}", dir.display());
            }
        }
        Command::Serve {
            port,
            host,
            config,
            realtime,
            no_images,
        } => {
            let cfg = load(config.as_ref())?;
            let opts = ServeOptions {
                realtime_factor: realtime,
                images: !no_images,
                ..Default::default()
            };
            let handle = serve(cfg, &format!("{host}:{port}"), opts)?;
            println!("serving on {}", handle.local_addr());
            handle.join();
        }
        Command::DefaultConfig => print!("{}", TrialConfig::default().to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
