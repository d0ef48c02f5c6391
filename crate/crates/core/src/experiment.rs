//! End-to-end workflow driven by an [`ExperimentConfig`]: dataset generation,
//! the three training phases, evaluation against OFDM, and the on-disk layout
//! of a full pipeline run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::channel::{generate_dataset, Dataset};
use crate::config::{ExperimentConfig, Scenario, Split};
use crate::error::{Error, Result};
use crate::io::{self, Provenance};
use crate::link::{ber_curve, rate_curve, EvalReport};
use crate::modem::Modem;
use crate::modnet::{init_modnet, ModNetParams};
use crate::training::{
    distill_phase3, mean_pair_distance, pair_dataset, pair_indices, train_phase1, train_phase2, EpochMetrics,
    EpochObserver,
};

/// Held-out validation pairs used to measure how far apart the network's
/// outputs for two different channels are.
pub const DISTANCE_PAIRS: usize = 100;

pub const OFDM_ID: &str = "ofdm";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Ber,
    Rate,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ber" => Ok(Metric::Ber),
            "rate" => Ok(Metric::Rate),
            _ => Err(Error::Argument(format!("unknown metric {s:?} (expected ber or rate)"))),
        }
    }
}

/// Generates a split. Test sets follow the statistics of `scenario`
/// (default: the first configured scenario).
pub fn generate_split(cfg: &ExperimentConfig, split: Split, scenario: Option<&str>) -> Result<Dataset> {
    match split {
        Split::Train | Split::Val => {
            if let Some(name) = scenario {
                return Err(Error::Argument(format!(
                    "scenario {name:?} only applies to the test split"
                )));
            }
            let seed = cfg.derive_seed(&format!("data:{}", split.name()));
            generate_dataset(&cfg.channel_spec(), cfg.split_size(split), seed)
        }
        Split::Test => {
            let s = match scenario {
                Some(name) => cfg.scenario(name)?,
                None => &cfg.evaluation.scenarios[0],
            };
            generate_test_set(cfg, s)
        }
    }
}

pub fn generate_test_set(cfg: &ExperimentConfig, scenario: &Scenario) -> Result<Dataset> {
    let seed = cfg.derive_seed(&format!("data:test:{}", scenario.name));
    generate_dataset(&cfg.scenario_spec(scenario), cfg.data.test, seed)
}

pub fn init_params(cfg: &ExperimentConfig) -> Result<ModNetParams<f32>> {
    init_modnet(&cfg.arch(), cfg.derive_seed("init"))
}

fn check_arch(cfg: &ExperimentConfig, params: &ModNetParams<f32>) -> Result<()> {
    if *params.arch() != cfg.arch() {
        return Err(Error::ArchMismatch(
            "parameters were built for a different network than the config describes".into(),
        ));
    }
    Ok(())
}

pub fn run_phase1(
    cfg: &ExperimentConfig,
    params: &mut ModNetParams<f32>,
    train: &Dataset,
    observer: &mut impl EpochObserver<f32>,
) -> Result<Vec<EpochMetrics>> {
    check_arch(cfg, params)?;
    train_phase1(params, train, &cfg.train_config(), observer)
}

pub fn run_phase2(
    cfg: &ExperimentConfig,
    params: &mut ModNetParams<f32>,
    train: &Dataset,
    observer: &mut impl EpochObserver<f32>,
) -> Result<Vec<EpochMetrics>> {
    check_arch(cfg, params)?;
    let pairs = pair_dataset(train, cfg.derive_seed("pairing"))?;
    train_phase2(params, &pairs, &cfg.train_config(), observer)
}

/// Phase 3 at evaluation precision.
pub fn distill(params: &ModNetParams<f32>, val: &Dataset) -> Result<Modem<f64>> {
    distill_phase3(&params.cast::<f64>(), val)
}

/// Index pairs of the validation set used for [`pair_distance`].
pub fn validation_pairs(cfg: &ExperimentConfig, val_len: usize) -> Result<Vec<(usize, usize)>> {
    let mut pairs = pair_indices(val_len, cfg.derive_seed("val-pairs"))?;
    pairs.truncate(DISTANCE_PAIRS);
    Ok(pairs)
}

/// Mean `‖Φ₁ − Φ₂‖² + ‖Ψ₁ᴴ − Ψ₂ᴴ‖²` over the validation pairs, inference mode.
pub fn pair_distance(cfg: &ExperimentConfig, params: &ModNetParams<f32>, val: &Dataset) -> Result<f64> {
    let pairs = validation_pairs(cfg, val.len())?;
    mean_pair_distance(&params.cast::<f64>(), val, &pairs)
}

/// Evaluates `modem` (and OFDM when `baseline_ofdm`) on every test set with
/// the configured SNR grid; both modems see the same channels and seeds.
pub fn evaluate(
    cfg: &ExperimentConfig,
    modem: &Modem<f64>,
    modem_id: &str,
    baseline_ofdm: bool,
    metric: Metric,
    test_sets: &[(String, Dataset)],
) -> Result<EvalReport> {
    let spec = cfg.channel_spec();
    if modem.num_subcarriers() != spec.num_subcarriers || modem.frame_len() != spec.frame_len() {
        return Err(Error::Dimension(format!(
            "modem is {}x{} but the config describes M = {}, M_L = {}",
            modem.frame_len(),
            modem.num_subcarriers(),
            spec.num_subcarriers,
            spec.frame_len()
        )));
    }
    if modem_id.is_empty() || modem_id.contains([',', '\n']) {
        return Err(Error::Argument(format!("modem id {modem_id:?} must be non-empty and CSV-safe")));
    }
    let ofdm = Modem::<f64>::ofdm(spec.num_subcarriers, spec.prefix_len);
    let mut modems = vec![(modem_id, modem)];
    if baseline_ofdm {
        modems.push((OFDM_ID, &ofdm));
    }
    let mut report = EvalReport {
        config_hash: Some(cfg.hash_hex()),
        rows: Vec::new(),
    };
    let snrs = &cfg.evaluation.snr_db;
    for (scenario, data) in test_sets {
        for &(id, m) in &modems {
            match metric {
                Metric::Rate => {
                    let points = rate_curve(m, data, snrs)?;
                    report.push_rates(scenario, id, cfg.seed, &points);
                }
                Metric::Ber => {
                    let opts = cfg.ber_options();
                    for &alphabet in &cfg.evaluation.alphabets {
                        let start = Instant::now();
                        let points = ber_curve(m, data, snrs, alphabet, &opts)?;
                        log::info!(
                            "{scenario} {id} {alphabet}: {} SNR points in {:.1} s",
                            points.len(),
                            start.elapsed().as_secs_f64()
                        );
                        report.push_ber(scenario, id, opts.seed, &points);
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Per-epoch training log. Wall-clock times are left out so that identical
/// runs produce identical files.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,mean_loss,rate_term,distance_term\n");
    for m in history {
        writeln!(out, "{},{:e},{:e},{:e}", m.epoch, m.mean_loss, m.rate_term, m.distance_term).unwrap();
    }
    out
}

/// Observer that logs progress and writes periodic checkpoints.
pub fn progress_observer<'a>(
    phase: usize,
    checkpoint_every: usize,
    checkpoint_dir: Option<&'a Path>,
    prov: Provenance,
) -> impl EpochObserver<f32> + 'a {
    move |m: &EpochMetrics, params: &ModNetParams<f32>| {
        log::info!(
            "phase {phase} epoch {}: loss {:.5} (rate {:.5}, distance {:.5}) {:.1} s",
            m.epoch,
            m.mean_loss,
            m.rate_term,
            m.distance_term,
            m.wall_time_s
        );
        if let Some(dir) = checkpoint_dir {
            if checkpoint_every > 0 && m.epoch.is_multiple_of(checkpoint_every) {
                let path = dir.join(format!("phase{phase}_epoch{:04}.mnet", m.epoch));
                io::save_params(&path, params, Some(&prov))?;
            }
        }
        Ok(())
    }
}

/// Everything a full pipeline run produces, in memory.
pub struct PipelineRun {
    pub dir: PathBuf,
    pub phase1: ModNetParams<f32>,
    pub phase2: ModNetParams<f32>,
    pub phase1_history: Vec<EpochMetrics>,
    pub phase2_history: Vec<EpochMetrics>,
    pub modem: Modem<f64>,
    pub val: Dataset,
    pub test_sets: Vec<(String, Dataset)>,
    pub rate_report: EvalReport,
    pub ber_report: EvalReport,
    pub phase1_seconds: f64,
    pub phase2_seconds: f64,
}

/// File names inside a pipeline output directory.
pub mod files {
    pub const TRAIN: &str = "train.ddch";
    pub const VAL: &str = "val.ddch";
    pub const PHASE1: &str = "phase1.mnet";
    pub const PHASE2: &str = "phase2.mnet";
    pub const PHASE1_METRICS: &str = "phase1_metrics.csv";
    pub const PHASE2_METRICS: &str = "phase2_metrics.csv";
    pub const MODEM: &str = "modem.modm";
    pub const RATE: &str = "rate.csv";
    pub const BER: &str = "ber.csv";

    pub fn test(scenario: &str) -> String {
        format!("test_{scenario}.ddch")
    }
}

/// generate → phase 1 → phase 2 → distill → evaluate, writing every artifact
/// into `dir`.
pub fn run_pipeline(cfg: &ExperimentConfig, dir: &Path) -> Result<PipelineRun> {
    std::fs::create_dir_all(dir)?;
    let prov = cfg.provenance();
    let train = generate_split(cfg, Split::Train, None)?;
    let val = generate_split(cfg, Split::Val, None)?;
    io::save_dataset(&dir.join(files::TRAIN), &train, Some(&prov))?;
    io::save_dataset(&dir.join(files::VAL), &val, Some(&prov))?;
    let mut test_sets = Vec::new();
    for s in &cfg.evaluation.scenarios {
        let data = generate_test_set(cfg, s)?;
        io::save_dataset(&dir.join(files::test(&s.name)), &data, Some(&prov))?;
        test_sets.push((s.name.clone(), data));
    }

    let every = cfg.training.checkpoint_every;
    let mut params = init_params(cfg)?;
    let start = Instant::now();
    let phase1_history = run_phase1(cfg, &mut params, &train, &mut progress_observer(1, every, Some(dir), prov))?;
    let phase1_seconds = start.elapsed().as_secs_f64();
    io::save_params(&dir.join(files::PHASE1), &params, Some(&prov))?;
    io::write_file(&dir.join(files::PHASE1_METRICS), metrics_csv(&phase1_history).as_bytes())?;
    let phase1 = params.clone();

    let start = Instant::now();
    let phase2_history = run_phase2(cfg, &mut params, &train, &mut progress_observer(2, every, Some(dir), prov))?;
    let phase2_seconds = start.elapsed().as_secs_f64();
    io::save_params(&dir.join(files::PHASE2), &params, Some(&prov))?;
    io::write_file(&dir.join(files::PHASE2_METRICS), metrics_csv(&phase2_history).as_bytes())?;

    let modem = distill(&params, &val)?;
    io::save_modem(&dir.join(files::MODEM), &modem, Some(&prov))?;

    let rate_report = evaluate(cfg, &modem, "learned", true, Metric::Rate, &test_sets)?;
    io::write_file(&dir.join(files::RATE), rate_report.to_csv().as_bytes())?;
    let ber_report = evaluate(cfg, &modem, "learned", true, Metric::Ber, &test_sets)?;
    io::write_file(&dir.join(files::BER), ber_report.to_csv().as_bytes())?;

    Ok(PipelineRun {
        dir: dir.to_path_buf(),
        phase1,
        phase2: params,
        phase1_history,
        phase2_history,
        modem,
        val,
        test_sets,
        rate_report,
        ber_report,
        phase1_seconds,
        phase2_seconds,
    })
}

/// Refuses artifacts stamped by a different configuration unless `allow`.
pub fn check_provenance(cfg: &ExperimentConfig, what: &Path, prov: Option<&Provenance>, allow: bool) -> Result<()> {
    let expected = cfg.hash_hex();
    match prov {
        Some(p) if p.hash_hex() == expected => Ok(()),
        _ if allow => {
            log::warn!("{} was not produced by this config; continuing as requested", what.display());
            Ok(())
        }
        Some(p) => Err(Error::Provenance(format!(
            "{} carries config hash {} but the config hashes to {expected}",
            what.display(),
            p.hash_hex()
        ))),
        None => Err(Error::Provenance(format!(
            "{} carries no config hash; expected {expected}",
            what.display()
        ))),
    }
}
