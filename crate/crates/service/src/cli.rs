//! The `vcbot` command line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;

use clap::{Args, Parser, Subcommand};
use log::info;
use vcbot_core::deliberation::read_session_log;
use vcbot_core::io::{
    load_config, load_primitives, macaw_primitives, save_config, save_primitives, write_meta, ArtifactMeta, PrimitiveSet, RunConfig,
};
use vcbot_core::observer::{
    congruence_series, evaluate_observer, event_means, loop_closure_ratio, pca_latent, write_congruence_csv,
    write_pca_csv, ObserverCheckpoint,
};
use vcbot_core::train::checkpoint::ModelCheckpoint;
use vcbot_core::train::gradcheck::{GradCheckProblem, GradCheckSettings};
use vcbot_core::{CoreError, LayerSpec, NetworkConfig};

use crate::artifacts::Artifacts;
use crate::error::{Result, ServiceError};
use crate::pipeline::{fit_observer_for, generate, nelbo_slope, post_rec_drop, regeneration_rmse, rollouts, train_model};
use crate::runner::{replay_records, write_session_log, SessionOptions};
use crate::server::{serve, ServeOptions, Transport};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// Runtime failure (I/O, divergence, worker failure).
    pub const FAILURE: i32 = 1;
    /// Bad flags or arguments.
    pub const USAGE: i32 = 2;
    /// Invalid or unreadable configuration.
    pub const CONFIG: i32 = 3;
    /// A required checkpoint, dataset or log is missing or malformed.
    pub const INPUT: i32 = 4;
    /// The command ran but its check did not pass.
    pub const CHECK_FAILED: i32 = 5;
}

pub fn exit_code(e: &ServiceError) -> i32 {
    match e {
        ServiceError::Core(CoreError::Config(_) | CoreError::Toml(_) | CoreError::TomlWrite(_)) => exit::CONFIG,
        ServiceError::Core(
            CoreError::Data { .. }
            | CoreError::Dataset(_)
            | CoreError::Version { .. }
            | CoreError::Corrupt(_)
            | CoreError::Replay(_),
        )
        | ServiceError::Missing { .. }
        | ServiceError::Mismatch(_) => exit::INPUT,
        _ => exit::FAILURE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "vcbot", version, about = "Train, run and analyse shared-control sessions")]
pub struct Cli {
    /// Run configuration file.
    #[arg(long, global = true, env = "VCBOT_CONFIG", default_value = "vcbot.toml")]
    pub config: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the demo primitive set (and optionally a default configuration).
    Dataset {
        /// Target directory; defaults to the configured primitive directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a default configuration file at --config if absent.
        #[arg(long)]
        write_config: bool,
    },
    /// Train the network and the intent observer.
    Train {
        /// Override the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Train the network only.
        #[arg(long, conflicts_with = "observer_only")]
        skip_observer: bool,
        /// Fit the observer on an existing model checkpoint.
        #[arg(long)]
        observer_only: bool,
    },
    /// Emit a prior rollout of one primitive as CSV.
    Generate {
        #[arg(long)]
        primitive: String,
        #[arg(long, default_value_t = 72)]
        steps: usize,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the session service.
    Serve(ServeArgs),
    /// Re-run a recorded session log and compare.
    Replay {
        log: PathBuf,
        /// Replayed log; defaults to `replay-<name>` in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analysis outputs.
    #[command(subcommand)]
    Analyze(Analysis),
    /// Finite-difference check of every analytic gradient on a tiny network.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        steps: usize,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Length-prefixed TCP listener.
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub addr: String,
    /// Additional WebSocket listener for browser clients.
    #[arg(long)]
    pub ws_addr: Option<String>,
    /// Allow concurrent sessions.
    #[arg(long)]
    pub multi: bool,
    /// Exit after this many sessions per listener.
    #[arg(long)]
    pub sessions: Option<usize>,
    /// Do not write session logs.
    #[arg(long)]
    pub no_logs: bool,
}

#[derive(Debug, Subcommand)]
pub enum Analysis {
    /// Observer confusion matrix on noise-perturbed prior rollouts.
    Confusion {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-event congruence series of a session log.
    Congruence {
        #[arg(long)]
        log: PathBuf,
        /// Output directory; defaults to `congruence-<name>` in the output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Principal components of the high layer's latent states.
    Pca {
        #[arg(long, default_value_t = 72)]
        from: usize,
        #[arg(long, default_value_t = 144)]
        to: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// The tiny network used by `gradcheck`.
pub fn gradcheck_config() -> NetworkConfig {
    NetworkConfig {
        layers: vec![
            LayerSpec::new(3, 1, 2.0).with_regulation(0.7),
            LayerSpec::new(2, 1, 4.0).with_regulation(1.3),
        ],
        dof: 2,
        softmax_bins: 3,
        softmax_sigma: 0.3,
        seed: 0,
    }
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.resolve(&cfg.paths.output);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p)?;
    }
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<ModelCheckpoint> {
    let path = cfg.resolve(&cfg.paths.model);
    if !path.exists() {
        return Err(ServiceError::Missing {
            what: "model checkpoint",
            path,
        });
    }
    Ok(ModelCheckpoint::load(&path)?)
}

fn names(set: &PrimitiveSet) -> Vec<String> {
    set.labels().into_iter().map(String::from).collect()
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "log".into())
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Dataset { out, write_config } => dataset(&cli.config, out, write_config),
        Command::Gradcheck { seed, steps } => gradcheck(seed, steps),
        command => {
            let cfg = load_config(&cli.config)?;
            match command {
                Command::Train {
                    epochs,
                    skip_observer,
                    observer_only,
                } => train(cfg, epochs, skip_observer, observer_only),
                Command::Generate { primitive, steps, out } => generate_cmd(&cfg, &primitive, steps, out),
                Command::Serve(args) => serve_cmd(cfg, args),
                Command::Replay { log, out } => replay(cfg, &log, out),
                Command::Analyze(a) => analyze(cfg, a),
                Command::Dataset { .. } | Command::Gradcheck { .. } => unreachable!(),
            }
        }
    }
}

fn dataset(config: &Path, out: Option<PathBuf>, write_config: bool) -> Result<i32> {
    let cfg = if config.exists() {
        RunConfig::from_toml(&std::fs::read_to_string(config).map_err(CoreError::from)?)?
    } else {
        RunConfig::default()
    };
    let cfg = cfg.with_base_dir(config.parent().unwrap_or(Path::new("")));
    if write_config && !config.exists() {
        create_parent(config)?;
        save_config(&cfg, config)?;
        println!("wrote {}", config.display());
    }
    let dir = out.unwrap_or_else(|| cfg.resolve(&cfg.paths.primitives));
    std::fs::create_dir_all(&dir)?;
    let set = macaw_primitives();
    save_primitives(&set, &dir)?;
    println!("wrote {} primitives to {}", set.primitives.len(), dir.display());
    Ok(exit::OK)
}

fn gradcheck(seed: u64, steps: usize) -> Result<i32> {
    let settings = GradCheckSettings::default();
    let report = GradCheckProblem::random(&gradcheck_config(), steps, seed).check(&settings)?;
    let failures: Vec<_> = report.failures().collect();
    for f in &failures {
        println!("FAIL {}[{}]: analytic {} numeric {}", f.tensor, f.index, f.analytic, f.numeric);
    }
    println!(
        "{} gradients checked, {} failed, worst error ratio {:.3}",
        report.entries.len(),
        failures.len(),
        report.worst_ratio(&settings)
    );
    Ok(if report.passed() { exit::OK } else { exit::CHECK_FAILED })
}

fn train(mut cfg: RunConfig, epochs: Option<usize>, skip_observer: bool, observer_only: bool) -> Result<i32> {
    if let Some(e) = epochs {
        cfg.train.epochs = e;
        cfg.validate()?;
    }
    let prims = load_primitives(&cfg.resolve(&cfg.paths.primitives))?;
    let out = output_dir(&cfg)?;
    let hash = cfg.hash()?;
    let model_path = cfg.resolve(&cfg.paths.model);
    let model = if observer_only {
        load_model(&cfg)?
    } else {
        let every = cfg.train.report_every.max(1);
        let trained = train_model(&cfg, &prims, |r| {
            if r.epoch == 1 || r.epoch % every == 0 {
                info!(
                    "epoch {:6}  post_rec {:.4}  prior_rec {:.4}  kl {:.4}  nelbo {:.4}",
                    r.epoch, r.post_rec, r.prior_rec, r.regulation, r.nelbo
                );
            }
        })?;
        if let Some(reason) = &trained.stopped_early {
            log::warn!("training stopped early: {reason}");
        }
        create_parent(&model_path)?;
        trained.checkpoint.save(&model_path)?;
        let report_path = out.join("train-report.csv");
        trained.report.save_csv(&report_path)?;
        write_meta(&report_path, &ArtifactMeta::new("training-report", &hash))?;
        let rows = &trained.report.rows;
        println!(
            "post_rec drop {:.1}%  nelbo slope over last 1000 epochs {:.3e}",
            100.0 * post_rec_drop(rows),
            nelbo_slope(rows, 1000)
        );
        println!("model written to {}", model_path.display());
        trained.checkpoint
    };
    for (p, e) in prims.primitives.iter().zip(regeneration_rmse(&model, &prims)?) {
        println!("{:<6} regeneration RMSE {e:.4}", p.label);
    }
    if skip_observer {
        return Ok(exit::OK);
    }
    let (ckpt, run) = fit_observer_for(&cfg, &model, &names(&prims))?;
    let obs_path = cfg.resolve(&cfg.paths.observer);
    create_parent(&obs_path)?;
    ckpt.save(&obs_path)?;
    let conf_path = out.join("confusion.csv");
    run.confusion.write_csv(&ckpt.labels, BufWriter::new(File::create(&conf_path)?))?;
    write_meta(&conf_path, &ArtifactMeta::new("confusion", &hash))?;
    println!(
        "observer trained on {} windows; confusion diagonal {:?}",
        run.train_pairs,
        run.confusion.diagonal().iter().map(|d| format!("{d:.3}")).collect::<Vec<_>>()
    );
    println!("observer written to {}", obs_path.display());
    Ok(exit::OK)
}

fn generate_cmd(cfg: &RunConfig, primitive: &str, steps: usize, out: Option<PathBuf>) -> Result<i32> {
    if steps == 0 {
        return Err(CoreError::Config("--steps must be >= 1".into()).into());
    }
    let model = load_model(cfg)?;
    let labels = names(&load_primitives(&cfg.resolve(&cfg.paths.primitives))?);
    if labels.len() != model.windows.len() {
        return Err(ServiceError::Mismatch(format!(
            "{} primitives on disk, model trained on {}",
            labels.len(),
            model.windows.len()
        )));
    }
    let index = labels
        .iter()
        .position(|l| l.eq_ignore_ascii_case(primitive))
        .ok_or_else(|| ServiceError::Mismatch(format!("unknown primitive {primitive}; known: {}", labels.join(", "))))?;
    let points = generate(&model, index, steps)?;
    let mut sink: Box<dyn Write> = match &out {
        Some(p) => {
            create_parent(p)?;
            Box::new(BufWriter::new(File::create(p)?))
        }
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(sink, "step,x,y")?;
    for (t, p) in points.iter().enumerate() {
        writeln!(sink, "{t},{},{}", p[0], p[1])?;
    }
    sink.flush()?;
    if let Some(p) = out {
        write_meta(&p, &ArtifactMeta::new("rollout", &cfg.hash()?))?;
    }
    Ok(exit::OK)
}

fn serve_cmd(cfg: RunConfig, args: ServeArgs) -> Result<i32> {
    let log_dir = (!args.no_logs).then(|| output_dir(&cfg)).transpose()?;
    let art = Arc::new(Artifacts::load(cfg)?);
    let opts = ServeOptions {
        multi: args.multi,
        max_sessions: args.sessions,
        session: SessionOptions { log_dir },
    };
    let framed = TcpListener::bind(&args.addr)?;
    let ws = match &args.ws_addr {
        Some(a) => Some(TcpListener::bind(a)?),
        None => None,
    };
    println!("serving on {}", framed.local_addr()?);
    let ws_thread = match ws {
        Some(listener) => {
            println!("websocket on {}", listener.local_addr()?);
            let art = Arc::clone(&art);
            let opts = opts.clone();
            Some(thread::spawn(move || serve(listener, Transport::WebSocket, art, opts)))
        }
        None => None,
    };
    let mut outcomes = serve(framed, Transport::Framed, art, opts)?;
    if let Some(t) = ws_thread {
        outcomes.extend(t.join().map_err(|_| ServiceError::Worker("websocket listener panicked".into()))??);
    }
    for o in &outcomes {
        println!("session {} ({}): {} ticks", o.id, o.reason, o.records.len());
    }
    Ok(exit::OK)
}

fn replay(cfg: RunConfig, log: &Path, out: Option<PathBuf>) -> Result<i32> {
    if !log.exists() {
        return Err(ServiceError::Missing {
            what: "session log",
            path: log.to_path_buf(),
        });
    }
    let recorded = read_session_log(File::open(log)?, log)?;
    let out = match out {
        Some(p) => p,
        None => output_dir(&cfg)?.join(format!("replay-{}.csv", stem(log))),
    };
    let art = Artifacts::load(cfg)?;
    let replayed = replay_records(&art, &recorded)?;
    create_parent(&out)?;
    write_session_log(&out, &replayed, &art.config_hash)?;
    println!("replayed {} ticks to {}", replayed.len(), out.display());
    match recorded.iter().zip(&replayed).find(|(a, b)| a != b) {
        None => {
            println!("identical to the recording");
            Ok(exit::OK)
        }
        Some((a, b)) => {
            println!("first difference at t = {}: recorded {a:?}, replayed {b:?}", a.t);
            Ok(exit::CHECK_FAILED)
        }
    }
}

fn analyze(cfg: RunConfig, a: Analysis) -> Result<i32> {
    let hash = cfg.hash()?;
    match a {
        Analysis::Confusion { out } => {
            let art = Artifacts::load(cfg)?;
            let rolls = rollouts(&art.model, art.observer.config.rollout_steps)?;
            let confusion = evaluate_observer(&art.observer.net, &rolls, &art.observer.config)?;
            let path = match out {
                Some(p) => p,
                None => output_dir(&art.config)?.join("confusion.csv"),
            };
            create_parent(&path)?;
            confusion.write_csv(art.labels(), BufWriter::new(File::create(&path)?))?;
            write_meta(&path, &ArtifactMeta::new("confusion", &hash))?;
            for (l, d) in art.labels().iter().zip(confusion.diagonal()) {
                println!("{l:<6} {d:.3}");
            }
            println!("wrote {}", path.display());
        }
        Analysis::Congruence { log, out_dir } => {
            let obs_path = cfg.resolve(&cfg.paths.observer);
            if !obs_path.exists() {
                return Err(ServiceError::Missing {
                    what: "observer checkpoint",
                    path: obs_path,
                });
            }
            if !log.exists() {
                return Err(ServiceError::Missing {
                    what: "session log",
                    path: log,
                });
            }
            let obs = ObserverCheckpoint::load(&obs_path)?;
            let records = read_session_log(File::open(&log)?, &log)?;
            let rows = congruence_series(&records, &obs.net, obs.config.congruence_window, obs.config.event_gap);
            let dir = match out_dir {
                Some(d) => d,
                None => output_dir(&cfg)?.join(format!("congruence-{}", stem(&log))),
            };
            std::fs::create_dir_all(&dir)?;
            let all = dir.join("congruence.csv");
            write_congruence_csv(&rows, BufWriter::new(File::create(&all)?))?;
            write_meta(&all, &ArtifactMeta::new("congruence", &hash))?;
            for (event, mean) in event_means(&rows) {
                let part: Vec<_> = rows.iter().filter(|r| r.event == event).cloned().collect();
                let path = dir.join(format!("event-{event:03}.csv"));
                write_congruence_csv(&part, BufWriter::new(File::create(&path)?))?;
                write_meta(&path, &ArtifactMeta::new("congruence", &hash))?;
                println!("event {event:3}: {:4} ticks, mean P {mean:.3}", part.len());
            }
            println!("wrote {}", dir.display());
        }
        Analysis::Pca { from, to, out } => {
            let model = load_model(&cfg)?;
            let labels = names(&load_primitives(&cfg.resolve(&cfg.paths.primitives))?);
            let (pca, rows) = pca_latent(&model.params, &model.windows, &labels, &model.config, from, to)?;
            let path = match out {
                Some(p) => p,
                None => output_dir(&cfg)?.join("pca.csv"),
            };
            create_parent(&path)?;
            write_pca_csv(&rows, BufWriter::new(File::create(&path)?))?;
            write_meta(&path, &ArtifactMeta::new("pca", &hash))?;
            println!("explained variance {:?}", pca.explained_variance);
            for l in &labels {
                let trace: Vec<[f64; 2]> = rows.iter().filter(|r| &r.primitive == l).map(|r| [r.pc1, r.pc2]).collect();
                println!("{l:<6} loop closure {:.3}", loop_closure_ratio(&trace));
            }
            println!("wrote {}", path.display());
        }
    }
    Ok(exit::OK)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn generate_requires_primitive() {
        assert!(Cli::try_parse_from(["vcbot", "generate", "--steps", "72"]).is_err());
        let cli = Cli::try_parse_from(["vcbot", "generate", "--steps", "72", "--primitive", "Head"]).unwrap();
        assert!(matches!(cli.command, Command::Generate { steps: 72, .. }));
    }

    #[test]
    fn analyze_subcommands_parse() {
        for args in [
            vec!["vcbot", "analyze", "confusion"],
            vec!["vcbot", "analyze", "congruence", "--log", "s.csv"],
            vec!["vcbot", "analyze", "pca", "--from", "0", "--to", "72"],
        ] {
            Cli::try_parse_from(args).unwrap();
        }
    }

    #[test]
    fn config_errors_map_to_their_code() {
        let e = ServiceError::Core(CoreError::Config("x".into()));
        assert_eq!(exit_code(&e), exit::CONFIG);
        let e = ServiceError::Missing {
            what: "model checkpoint",
            path: "m".into(),
        };
        assert_eq!(exit_code(&e), exit::INPUT);
    }
}
