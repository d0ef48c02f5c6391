use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use modnet_core::channel::Dataset;
use modnet_core::config::{ExperimentConfig, Scenario, Split};
use modnet_core::experiment::{self, Metric};
use modnet_core::io;
use modnet_core::{Error, Result};

#[derive(Parser)]
#[command(name = "modnet", version, about = "Learned matrix modems for doubly-dispersive channels")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a channel dataset.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["train", "val", "test"])]
        split: String,
        /// Test-set scenario (defaults to the first configured one).
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run training phase 1 (rate objective) or 2 (siamese).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        phase: u8,
        /// Starting parameters; required for phase 2.
        #[arg(long)]
        in_params: Option<PathBuf>,
        #[arg(long)]
        out_params: PathBuf,
        /// Training set; generated from the config when absent.
        #[arg(long)]
        train_data: Option<PathBuf>,
        /// Per-epoch loss log (default: next to the output parameters).
        #[arg(long)]
        metrics_log: Option<PathBuf>,
        /// Directory for periodic checkpoints (see `checkpoint_every`).
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Collapse the trained network into one modem (element-wise median).
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        val_data: PathBuf,
        #[arg(long)]
        out_modem: PathBuf,
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Rate or BER curves of a modem, optionally alongside OFDM.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        modem: PathBuf,
        #[arg(long)]
        baseline_ofdm: bool,
        #[arg(long, value_parser = ["ber", "rate"])]
        metric: String,
        #[arg(long)]
        out: PathBuf,
        /// Test set file; otherwise test sets are generated from the config.
        #[arg(long, conflicts_with_all = ["scenario", "speed_kmh", "num_paths"])]
        test_data: Option<PathBuf>,
        /// Restrict to these configured scenarios.
        #[arg(long)]
        scenario: Vec<String>,
        /// Override the test-set speed (km/h) for a one-off scenario.
        #[arg(long)]
        speed_kmh: Option<f64>,
        /// Override the test-set path count for a one-off scenario.
        #[arg(long)]
        num_paths: Option<usize>,
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Write selected modulation-matrix columns as CSV.
    ExportWaveforms {
        #[arg(long)]
        modem: PathBuf,
        /// Comma-separated sub-carrier indices.
        #[arg(long, value_delimiter = ',', required = true)]
        columns: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// generate-data, both training phases, distill and evaluate in one go.
    RunPipeline {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: `paths.out_dir` from the config).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenerateData {
            config,
            split,
            scenario,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let split: Split = split.parse()?;
            let data = experiment::generate_split(&cfg, split, scenario.as_deref())?;
            io::save_dataset(&out, &data, Some(&cfg.provenance()))?;
            log::info!("wrote {} {} samples to {}", data.len(), split.name(), out.display());
            Ok(())
        }
        Command::Train {
            config,
            phase,
            in_params,
            out_params,
            train_data,
            metrics_log,
            checkpoint_dir,
            allow_config_mismatch,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let allow = allow_config_mismatch;
            let mut params = match (&in_params, phase) {
                (Some(path), _) => {
                    let (p, prov) = io::load_params_for(path, &cfg.arch())?;
                    experiment::check_provenance(&cfg, path, prov.as_ref(), allow)?;
                    p
                }
                (None, 1) => experiment::init_params(&cfg)?,
                (None, _) => {
                    return Err(Error::MissingInput(
                        "phase 2 continues from phase-1 parameters; pass --in-params".into(),
                    ))
                }
            };
            let train = load_or_generate(&cfg, train_data.as_deref(), Split::Train, allow)?;
            if let Some(dir) = &checkpoint_dir {
                std::fs::create_dir_all(dir)?;
            }
            let prov = cfg.provenance();
            let mut observer = experiment::progress_observer(
                phase as usize,
                cfg.training.checkpoint_every,
                checkpoint_dir.as_deref(),
                prov,
            );
            let start = Instant::now();
            let history = if phase == 1 {
                experiment::run_phase1(&cfg, &mut params, &train, &mut observer)?
            } else {
                experiment::run_phase2(&cfg, &mut params, &train, &mut observer)?
            };
            log::info!("phase {phase} finished in {:.1} s", start.elapsed().as_secs_f64());
            io::save_params(&out_params, &params, Some(&prov))?;
            let log_path = metrics_log.unwrap_or_else(|| out_params.with_extension("metrics.csv"));
            io::write_file(&log_path, experiment::metrics_csv(&history).as_bytes())?;
            Ok(())
        }
        Command::Distill {
            config,
            params,
            val_data,
            out_modem,
            allow_config_mismatch,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (p, prov) = io::load_params_for(&params, &cfg.arch())?;
            experiment::check_provenance(&cfg, &params, prov.as_ref(), allow_config_mismatch)?;
            let val = load_dataset_checked(&cfg, &val_data, allow_config_mismatch)?;
            let modem = experiment::distill(&p, &val)?;
            io::save_modem(&out_modem, &modem, Some(&cfg.provenance()))?;
            log::info!("distilled {} validation outputs into {}", val.len(), out_modem.display());
            Ok(())
        }
        Command::Evaluate {
            config,
            modem,
            baseline_ofdm,
            metric,
            out,
            test_data,
            scenario,
            speed_kmh,
            num_paths,
            allow_config_mismatch,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (m, prov) = io::load_modem(&modem)?;
            experiment::check_provenance(&cfg, &modem, prov.as_ref(), allow_config_mismatch)?;
            let metric: Metric = metric.parse()?;
            let test_sets = test_sets(&cfg, test_data.as_deref(), &scenario, speed_kmh, num_paths, allow_config_mismatch)?;
            let id = modem
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "modem".into());
            let report = experiment::evaluate(&cfg, &m, &id, baseline_ofdm, metric, &test_sets)?;
            io::write_file(&out, report.to_csv().as_bytes())?;
            log::info!("wrote {} rows to {}", report.rows.len(), out.display());
            Ok(())
        }
        Command::ExportWaveforms { modem, columns, out } => {
            let (m, _) = io::load_modem(&modem)?;
            let csv = waveform_csv(&m, &columns)?;
            io::write_file(&out, csv.as_bytes())?;
            Ok(())
        }
        Command::RunPipeline { config, out_dir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out_dir
                .or_else(|| cfg.paths.out_dir.clone())
                .ok_or_else(|| Error::Argument("no output directory: pass --out-dir or set paths.out_dir".into()))?;
            let run = experiment::run_pipeline(&cfg, &dir)?;
            log::info!(
                "pipeline done in {}: phase 1 {:.0} s, phase 2 {:.0} s",
                dir.display(),
                run.phase1_seconds,
                run.phase2_seconds
            );
            Ok(())
        }
    }
}

fn load_dataset_checked(cfg: &ExperimentConfig, path: &Path, allow: bool) -> Result<Dataset> {
    let (data, prov) = io::load_dataset(path)?;
    experiment::check_provenance(cfg, path, prov.as_ref(), allow)?;
    Ok(data)
}

fn load_or_generate(cfg: &ExperimentConfig, path: Option<&Path>, split: Split, allow: bool) -> Result<Dataset> {
    match path {
        Some(p) => load_dataset_checked(cfg, p, allow),
        None => experiment::generate_split(cfg, split, None),
    }
}

fn test_sets(
    cfg: &ExperimentConfig,
    file: Option<&Path>,
    names: &[String],
    speed_kmh: Option<f64>,
    num_paths: Option<usize>,
    allow: bool,
) -> Result<Vec<(String, Dataset)>> {
    if let Some(path) = file {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "test".into());
        return Ok(vec![(name, load_dataset_checked(cfg, path, allow)?)]);
    }
    if speed_kmh.is_some() || num_paths.is_some() {
        if !names.is_empty() {
            return Err(Error::Argument("--scenario cannot be combined with --speed-kmh/--num-paths".into()));
        }
        let base = &cfg.evaluation.scenarios[0];
        let speed = speed_kmh.unwrap_or(base.ue_speed_kmh);
        let paths = num_paths.unwrap_or(base.num_paths);
        let s = Scenario {
            name: format!("v{speed}_np{paths}"),
            ue_speed_kmh: speed,
            num_paths: paths,
        };
        cfg.scenario_spec(&s).validate()?;
        return Ok(vec![(s.name.clone(), experiment::generate_test_set(cfg, &s)?)]);
    }
    let chosen: Vec<&Scenario> = if names.is_empty() {
        cfg.evaluation.scenarios.iter().collect()
    } else {
        names.iter().map(|n| cfg.scenario(n)).collect::<Result<_>>()?
    };
    chosen
        .into_iter()
        .map(|s| Ok((s.name.clone(), experiment::generate_test_set(cfg, s)?)))
        .collect()
}

/// Long-format CSV of `Φ` columns: one row per (column, sample index).
fn waveform_csv(modem: &modnet_core::Modem64, columns: &[usize]) -> Result<String> {
    let m = modem.num_subcarriers();
    if let Some(&bad) = columns.iter().find(|&&c| c >= m) {
        return Err(Error::Argument(format!("column {bad} out of range (modem has {m} sub-carriers)")));
    }
    let prefix = modem.prefix_len() as i64;
    let mut out = String::from("column,n,re,im\n");
    for &c in columns {
        for (row, z) in modem.phi().column(c).iter().enumerate() {
            writeln!(out, "{c},{},{:e},{:e}", row as i64 - prefix, z.re, z.im).unwrap();
        }
    }
    Ok(out)
}

