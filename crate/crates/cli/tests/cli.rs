use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use modnet_core::io;
use modnet_core::link::EvalReport;
use modnet_core::Modem64;

const TINY: &str = r#"
seed = 7

[channel]
carrier_freq_hz = 4.0e9
subcarrier_spacing_hz = 15.0e3
num_subcarriers = 8
prefix_len = 2
ue_speed_kmh = 360.0
num_paths = 2
max_delay_grid = 2

[model]
conv_kernel = 3
conv_widths = [2, 2, 2]
hidden_widths = [16, 16]
leaky_slope = 0.01
bn_eps = 1e-5
bn_momentum = 0.1

[training]
epochs = 2
batch_size = 4
train_snr_db = 20.0
alpha = 0.005
clip_norm = 10.0
checkpoint_every = 1

[training.adam]
beta1 = 0.9
beta2 = 0.999
lr = 1e-3
eps = 1e-8

[data]
train = 12
val = 6
test = 5

[evaluation]
snr_db = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0]
alphabets = ["qpsk"]
trials_per_channel = 3
stop_errors = 10
min_bits = 100

[[evaluation.scenarios]]
name = "base"
ue_speed_kmh = 360.0
num_paths = 2
"#;

fn modnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = modnet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Runs a command expected to fail and returns its error class.
fn fails(args: &[&str]) -> String {
    let out = modnet(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    let class = line
        .strip_prefix("error[")
        .and_then(|rest| rest.split(']').next())
        .unwrap_or_else(|| panic!("no error class in {stderr:?}"));
    class.to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

#[test]
fn generate_data_is_deterministic_and_validated() {
    let (dir, cfg) = setup();
    let a = dir.path().join("a.ddch");
    let b = dir.path().join("b.ddch");
    ok(&["generate-data", "--config", s(&cfg), "--split", "train", "--out", s(&a)]);
    ok(&["generate-data", "--config", s(&cfg), "--split", "train", "--out", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let (data, prov) = io::load_dataset(&a).unwrap();
    assert_eq!(data.len(), 12);
    assert!(prov.is_some());

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, TINY.replace("max_delay_grid = 2", "max_delay_grid = 3")).unwrap();
    assert_eq!(
        fails(&["generate-data", "--config", s(&bad), "--split", "train", "--out", s(&a)]),
        "config"
    );
    assert_eq!(
        fails(&["generate-data", "--config", s(&cfg), "--split", "val", "--scenario", "base", "--out", s(&a)]),
        "argument"
    );
    assert_eq!(
        fails(&["generate-data", "--config", "/no/such.cfg", "--split", "val", "--out", s(&a)]),
        "missing-input"
    );
}

#[test]
fn paper_default_test_split_has_20000_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/paper-default.cfg");
    let out = dir.path().join("test.ddch");
    ok(&["generate-data", "--config", s(&cfg), "--split", "test", "--out", s(&out)]);
    let (data, _) = io::load_dataset(&out).unwrap();
    assert_eq!(data.len(), 20_000);
    assert_eq!(data.spec.num_subcarriers, 128);
}

#[test]
fn phase2_requires_phase1_params() {
    let (dir, cfg) = setup();
    let out = dir.path().join("p.mnet");
    assert_eq!(
        fails(&["train", "--config", s(&cfg), "--phase", "2", "--out-params", s(&out)]),
        "missing-input"
    );
}

#[test]
fn full_workflow() {
    let (dir, cfg) = setup();
    let p = |name: &str| dir.path().join(name);
    ok(&["generate-data", "--config", s(&cfg), "--split", "train", "--out", s(&p("train.ddch"))]);
    ok(&["generate-data", "--config", s(&cfg), "--split", "val", "--out", s(&p("val.ddch"))]);
    ok(&[
        "train", "--config", s(&cfg), "--phase", "1", "--train-data", s(&p("train.ddch")),
        "--out-params", s(&p("p1.mnet")), "--checkpoint-dir", s(&p("ckpt")),
    ]);
    let log = fs::read_to_string(p("p1.metrics.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2, "one row per epoch");
    assert!(p("ckpt/phase1_epoch0002.mnet").exists());
    ok(&[
        "train", "--config", s(&cfg), "--phase", "2", "--in-params", s(&p("p1.mnet")),
        "--out-params", s(&p("p2.mnet")), "--metrics-log", s(&p("p2.csv")),
    ]);
    assert_eq!(fs::read_to_string(p("p2.csv")).unwrap().lines().count(), 3);

    for name in ["m1.modm", "m2.modm"] {
        ok(&[
            "distill", "--config", s(&cfg), "--params", s(&p("p2.mnet")), "--val-data", s(&p("val.ddch")),
            "--out-modem", s(&p(name)),
        ]);
    }
    assert_eq!(fs::read(p("m1.modm")).unwrap(), fs::read(p("m2.modm")).unwrap());
    let (modem, _) = io::load_modem(&p("m1.modm")).unwrap();
    assert!(modem.energy_error() < 1e-9);

    ok(&[
        "evaluate", "--config", s(&cfg), "--modem", s(&p("m1.modm")), "--baseline-ofdm", "--metric", "rate",
        "--out", s(&p("rate.csv")),
    ]);
    let report = EvalReport::from_csv(&fs::read_to_string(p("rate.csv")).unwrap()).unwrap();
    for id in ["m1", "ofdm"] {
        let rows: Vec<_> = report.select("base", "avg_rate", id).collect();
        assert_eq!(rows.len(), 7);
        let mins: Vec<_> = report.select("base", "min_rate", id).collect();
        for (a, m) in rows.iter().zip(&mins) {
            assert!(a.value >= m.value);
        }
    }
    assert!(report.rows.iter().all(|r| r.seed == report.rows[0].seed));
    assert!(report.config_hash.is_some());

    ok(&[
        "evaluate", "--config", s(&cfg), "--modem", s(&p("m1.modm")), "--baseline-ofdm", "--metric", "ber",
        "--speed-kmh", "500", "--num-paths", "3", "--out", s(&p("ber.csv")),
    ]);
    let ber = EvalReport::from_csv(&fs::read_to_string(p("ber.csv")).unwrap()).unwrap();
    assert_eq!(ber.select("v500_np3", "ber_qpsk", "m1").count(), 7);
    let (mine, base): (Vec<_>, Vec<_>) = ber.rows.iter().partition(|r| r.modem_id == "m1");
    for (a, b) in mine.iter().zip(&base) {
        assert_eq!((a.snr_db, a.seed), (b.snr_db, b.seed));
    }

    // a config with another seed hashes differently
    let other = p("other.cfg");
    fs::write(&other, TINY.replace("seed = 7", "seed = 8")).unwrap();
    let (m1, r2) = (p("m1.modm"), p("r2.csv"));
    let args = ["evaluate", "--config", s(&other), "--modem", s(&m1), "--metric", "rate", "--out", s(&r2)];
    assert_eq!(fails(&args), "provenance");
    let mut allowed = args.to_vec();
    allowed.push("--allow-config-mismatch");
    ok(&allowed);
}

#[test]
fn export_waveforms_of_ofdm() {
    let dir = tempfile::tempdir().unwrap();
    let (m, mp) = (8usize, 2usize);
    let modem_path = dir.path().join("ofdm.modm");
    io::save_modem(&modem_path, &Modem64::ofdm(m, mp), None).unwrap();
    let out = dir.path().join("w.csv");
    ok(&["export-waveforms", "--modem", s(&modem_path), "--columns", "0,3,7", "--out", s(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("column,n,re,im"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3 * (m + mp));
    let mut cols: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    cols.dedup();
    assert_eq!(cols, vec![0.0, 3.0, 7.0]);
    for r in &rows {
        let (c, n) = (r[0], r[1]);
        let phase = TAU * c * n / m as f64;
        let amp = 1.0 / (m as f64).sqrt();
        assert!((r[2] - amp * phase.cos()).abs() < 1e-12 && (r[3] - amp * phase.sin()).abs() < 1e-12);
    }
    assert_eq!(rows[0][1], -(mp as f64));

    assert_eq!(
        fails(&["export-waveforms", "--modem", s(&modem_path), "--columns", "8", "--out", s(&out)]),
        "argument"
    );
}
