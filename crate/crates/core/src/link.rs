//! Monte-Carlo link simulation: symbol mapping, the full
//! modulate → channel → demodulate chain, per-sub-channel LMMSE equalization,
//! and BER / sub-channel rate curves over a set of test channels.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelRealization, Dataset};
use crate::error::{Error, Result};
use crate::modem::{equivalent_channel, subchannel_rates, EquivalentChannel, Modem, SnrSpec};
use crate::stats::{mean, mean_interval, wilson_interval, Z95};

/// Square Gray-labelled constellations with unit average power.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Alphabet {
    #[serde(rename = "qpsk")]
    Qpsk,
    #[serde(rename = "16qam")]
    Qam16,
}

impl Alphabet {
    pub fn bits_per_symbol(self) -> usize {
        match self {
            Alphabet::Qpsk => 2,
            Alphabet::Qam16 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Alphabet::Qpsk => "qpsk",
            Alphabet::Qam16 => "16qam",
        }
    }

    /// Bits per real dimension.
    fn axis_bits(self) -> usize {
        self.bits_per_symbol() / 2
    }

    fn scale(self) -> f64 {
        match self {
            Alphabet::Qpsk => std::f64::consts::FRAC_1_SQRT_2,
            Alphabet::Qam16 => 1.0 / 10f64.sqrt(),
        }
    }

    /// Gray-coded amplitude of one real dimension, before scaling.
    fn axis_level(self, bits: &[bool]) -> f64 {
        match (self, bits) {
            (Alphabet::Qpsk, [b]) => {
                if *b {
                    -1.0
                } else {
                    1.0
                }
            }
            // 00 -> -3, 01 -> -1, 11 -> 1, 10 -> 3
            (Alphabet::Qam16, [b0, b1]) => match (b0, b1) {
                (false, false) => -3.0,
                (false, true) => -1.0,
                (true, true) => 1.0,
                (true, false) => 3.0,
            },
            _ => unreachable!("axis bit count fixed by alphabet"),
        }
    }

    pub fn symbol(self, bits: &[bool]) -> Complex<f64> {
        let k = self.axis_bits();
        Complex::new(self.axis_level(&bits[..k]), self.axis_level(&bits[k..])) * self.scale()
    }

    /// Every constellation point with its label, label bits MSB first.
    pub fn points(self) -> Vec<(Vec<bool>, Complex<f64>)> {
        let b = self.bits_per_symbol();
        (0..1usize << b)
            .map(|label| {
                let bits: Vec<bool> = (0..b).map(|i| label >> (b - 1 - i) & 1 == 1).collect();
                let point = self.symbol(&bits);
                (bits, point)
            })
            .collect()
    }
}

impl fmt::Display for Alphabet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Alphabet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qpsk" => Ok(Alphabet::Qpsk),
            "16qam" | "qam16" => Ok(Alphabet::Qam16),
            _ => Err(Error::Argument(format!("unknown alphabet {s:?} (expected qpsk or 16qam)"))),
        }
    }
}

pub fn map_symbols(bits: &[bool], alphabet: Alphabet) -> Result<Array1<Complex<f64>>> {
    let b = alphabet.bits_per_symbol();
    if bits.is_empty() || !bits.len().is_multiple_of(b) {
        return Err(Error::Argument(format!(
            "{} bits do not fill whole {alphabet} symbols of {b} bits",
            bits.len()
        )));
    }
    Ok(bits.chunks(b).map(|c| alphabet.symbol(c)).collect())
}

/// Minimum-distance hard decisions, one axis at a time (the constellations
/// are square, so this is the joint minimum-distance decision).
pub fn demap_symbols(symbols: &Array1<Complex<f64>>, alphabet: Alphabet) -> Vec<bool> {
    let mut out = Vec::with_capacity(symbols.len() * alphabet.bits_per_symbol());
    for z in symbols {
        demap_axis(z.re, alphabet, &mut out);
        demap_axis(z.im, alphabet, &mut out);
    }
    out
}

fn demap_axis(v: f64, alphabet: Alphabet, out: &mut Vec<bool>) {
    let u = v / alphabet.scale();
    match alphabet {
        Alphabet::Qpsk => out.push(u < 0.0),
        Alphabet::Qam16 => {
            out.push(u >= 0.0);
            out.push(u.abs() < 2.0);
        }
    }
}

/// `x̂(m) = conj(H_e(m,m)) y(m) / (|H_e(m,m)|² + (σ_w²/σ_s²) Σ_n |Ψᴴ(m,n)|²)`,
/// using only the diagonal of the equivalent channel. A sub-channel whose
/// denominator vanishes is erased to zero.
pub fn lmmse_equalize(y: &Array1<Complex<f64>>, eq: &EquivalentChannel<f64>, snr: &SnrSpec) -> Array1<Complex<f64>> {
    let rho = snr.noise_ratio();
    y.iter()
        .enumerate()
        .map(|(m, &ym)| {
            let h = eq.matrix[(m, m)];
            let denom = h.norm_sqr() + rho * eq.demod_row_energy[m];
            if denom > 0.0 {
                h.conj() * ym / denom
            } else {
                Complex::new(0.0, 0.0)
            }
        })
        .collect()
}

/// Generator for trial `trial` on test channel `channel`. It does not depend
/// on the modem or the SNR, so modems are compared on identical bits and
/// noise draws.
pub fn trial_rng(seed: u64, channel: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((channel as u64) << 32) | trial as u64);
    rng
}

/// Per-channel state reused across trials and SNR points.
pub struct LinkChannel<'a> {
    modem: &'a Modem<f64>,
    h: Array2<Complex<f64>>,
    eq: EquivalentChannel<f64>,
}

impl<'a> LinkChannel<'a> {
    pub fn new(modem: &'a Modem<f64>, realization: &ChannelRealization) -> Result<Self> {
        let h = realization.matrix::<f64>();
        let eq = equivalent_channel(modem, &h)?;
        Ok(LinkChannel { modem, h, eq })
    }

    pub fn equivalent(&self) -> &EquivalentChannel<f64> {
        &self.eq
    }

    /// One frame through the full chain; returns `(bit errors, bits sent)`.
    pub fn trial<R: Rng + ?Sized>(&self, snr: &SnrSpec, alphabet: Alphabet, rng: &mut R) -> (u64, u64) {
        let m = self.modem.num_subcarriers();
        let bits: Vec<bool> = (0..m * alphabet.bits_per_symbol()).map(|_| rng.random()).collect();
        let x = map_symbols(&bits, alphabet).expect("whole symbols by construction");
        let s = self.modem.modulate(&x);
        let sigma = (snr.noise_ratio() / 2.0).sqrt();
        let mut r = self.h.dot(&s);
        for v in r.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *v += Complex::new(re, im) * sigma;
        }
        let y = self.modem.demodulate(&r);
        let x_hat = lmmse_equalize(&y, &self.eq, snr);
        let errors = demap_symbols(&x_hat, alphabet)
            .iter()
            .zip(&bits)
            .filter(|(a, b)| a != b)
            .count();
        (errors as u64, bits.len() as u64)
    }
}

/// One frame over one channel, seeded on its own.
pub fn run_ber_trial(
    modem: &Modem<f64>,
    realization: &ChannelRealization,
    snr: &SnrSpec,
    alphabet: Alphabet,
    seed: u64,
) -> Result<(u64, u64)> {
    let link = LinkChannel::new(modem, realization)?;
    Ok(link.trial(snr, alphabet, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// Monte-Carlo controls for [`ber_curve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BerOptions {
    /// Upper bound on frames per test channel at each SNR.
    pub trials_per_channel: usize,
    /// Stop once this many errors are seen (and `min_bits` are reached).
    pub stop_errors: u64,
    pub min_bits: u64,
    pub seed: u64,
}

impl Default for BerOptions {
    fn default() -> Self {
        BerOptions {
            trials_per_channel: 100,
            stop_errors: 400,
            min_bits: 1_000_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BerPoint {
    pub snr_db: f64,
    pub alphabet: Alphabet,
    pub errors: u64,
    pub bits: u64,
    /// Trials run on every test channel.
    pub rounds: usize,
}

impl BerPoint {
    pub fn ber(&self) -> f64 {
        self.errors as f64 / self.bits as f64
    }

    pub fn wilson95(&self) -> (f64, f64) {
        wilson_interval(self.errors, self.bits, Z95)
    }
}

/// BER at each SNR. Trials are run in rounds, one frame per test channel per
/// round; a point stops after the round that brings it to `stop_errors`
/// errors and `min_bits` bits, or after `trials_per_channel` rounds.
pub fn ber_curve(
    modem: &Modem<f64>,
    test_set: &Dataset,
    snr_list: &[f64],
    alphabet: Alphabet,
    opts: &BerOptions,
) -> Result<Vec<BerPoint>> {
    if test_set.is_empty() {
        return Err(Error::Argument("test set is empty".into()));
    }
    if opts.trials_per_channel == 0 {
        return Err(Error::Argument("trials per channel must be positive".into()));
    }
    let links = test_set
        .realizations
        .par_iter()
        .map(|r| LinkChannel::new(modem, r))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(snr_list.len());
    for &snr_db in snr_list {
        let snr = SnrSpec::from_db(snr_db);
        let (mut errors, mut bits, mut rounds) = (0u64, 0u64, 0usize);
        while rounds < opts.trials_per_channel {
            let (e, b) = links
                .par_iter()
                .enumerate()
                .map(|(c, link)| link.trial(&snr, alphabet, &mut trial_rng(opts.seed, c, rounds)))
                .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
            errors += e;
            bits += b;
            rounds += 1;
            if errors >= opts.stop_errors && bits >= opts.min_bits {
                break;
            }
        }
        out.push(BerPoint {
            snr_db,
            alphabet,
            errors,
            bits,
            rounds,
        });
    }
    Ok(out)
}

/// Per-channel mean and minimum sub-channel rate at one SNR.
#[derive(Clone, Debug, PartialEq)]
pub struct RatePoint {
    pub snr_db: f64,
    pub avg_rates: Vec<f64>,
    pub min_rates: Vec<f64>,
}

impl RatePoint {
    pub fn mean_avg_rate(&self) -> f64 {
        mean(&self.avg_rates)
    }

    pub fn mean_min_rate(&self) -> f64 {
        mean(&self.min_rates)
    }
}

pub fn rate_curve(modem: &Modem<f64>, test_set: &Dataset, snr_list: &[f64]) -> Result<Vec<RatePoint>> {
    if test_set.is_empty() {
        return Err(Error::Argument("test set is empty".into()));
    }
    let eqs = test_set
        .realizations
        .par_iter()
        .map(|r| equivalent_channel(modem, &r.matrix::<f64>()))
        .collect::<Result<Vec<_>>>()?;
    Ok(snr_list
        .iter()
        .map(|&snr_db| {
            let snr = SnrSpec::from_db(snr_db);
            let (avg_rates, min_rates) = eqs
                .par_iter()
                .map(|eq| {
                    let r = subchannel_rates(eq, &snr);
                    (r.mean().unwrap_or(0.0), r.iter().copied().fold(f64::INFINITY, f64::min))
                })
                .unzip();
            RatePoint {
                snr_db,
                avg_rates,
                min_rates,
            }
        })
        .collect())
}

/// One CSV row of an evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub scenario: String,
    pub snr_db: f64,
    pub metric: String,
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_bits: Option<u64>,
    pub n_errors: Option<u64>,
    pub modem_id: String,
    pub seed: u64,
}

/// Aggregated evaluation results, written as CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub config_hash: Option<String>,
    pub rows: Vec<ReportRow>,
}

pub const CSV_HEADER: &str = "scenario,snr_db,metric,value,ci_low,ci_high,n_bits,n_errors,modem_id,seed";

impl EvalReport {
    pub fn push_ber(&mut self, scenario: &str, modem_id: &str, seed: u64, points: &[BerPoint]) {
        for p in points {
            let (lo, hi) = p.wilson95();
            self.rows.push(ReportRow {
                scenario: scenario.to_string(),
                snr_db: p.snr_db,
                metric: format!("ber_{}", p.alphabet),
                value: p.ber(),
                ci_low: lo,
                ci_high: hi,
                n_bits: Some(p.bits),
                n_errors: Some(p.errors),
                modem_id: modem_id.to_string(),
                seed,
            });
        }
    }

    pub fn push_rates(&mut self, scenario: &str, modem_id: &str, seed: u64, points: &[RatePoint]) {
        for p in points {
            for (metric, values) in [("avg_rate", &p.avg_rates), ("min_rate", &p.min_rates)] {
                let (lo, hi) = mean_interval(values, Z95);
                self.rows.push(ReportRow {
                    scenario: scenario.to_string(),
                    snr_db: p.snr_db,
                    metric: metric.to_string(),
                    value: mean(values),
                    ci_low: lo,
                    ci_high: hi,
                    n_bits: None,
                    n_errors: None,
                    modem_id: modem_id.to_string(),
                    seed,
                });
            }
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if let Some(h) = &self.config_hash {
            out.push_str(&format!("# config_hash={h}\n"));
        }
        out.push_str(CSV_HEADER);
        out.push('\n');
        let opt = |v: Option<u64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:e},{:e},{:e},{},{},{},{}\n",
                r.scenario,
                r.snr_db,
                r.metric,
                r.value,
                r.ci_low,
                r.ci_high,
                opt(r.n_bits),
                opt(r.n_errors),
                r.modem_id,
                r.seed
            ));
        }
        out
    }

    /// Parses CSV produced by [`EvalReport::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Corrupt(format!("report line {line}: {msg}"));
        let mut report = EvalReport::default();
        let mut header_seen = false;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if let Some(rest) = line.strip_prefix("# config_hash=") {
                report.config_hash = Some(rest.trim().to_string());
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            if !header_seen {
                if line != CSV_HEADER {
                    return Err(bad(n, "unexpected header"));
                }
                header_seen = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(bad(n, "expected 10 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n, "bad number"));
            let opt = |s: &str| -> Result<Option<u64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(n, "bad count"))
                }
            };
            report.rows.push(ReportRow {
                scenario: f[0].to_string(),
                snr_db: num(f[1])?,
                metric: f[2].to_string(),
                value: num(f[3])?,
                ci_low: num(f[4])?,
                ci_high: num(f[5])?,
                n_bits: opt(f[6])?,
                n_errors: opt(f[7])?,
                modem_id: f[8].to_string(),
                seed: f[9].parse().map_err(|_| bad(n, "bad seed"))?,
            });
        }
        if !header_seen {
            return Err(Error::Corrupt("report has no header".into()));
        }
        Ok(report)
    }

    /// Rows matching `(scenario, metric, modem_id)`.
    pub fn select<'a>(&'a self, scenario: &'a str, metric: &'a str, modem_id: &'a str) -> impl Iterator<Item = &'a ReportRow> {
        self.rows
            .iter()
            .filter(move |r| r.scenario == scenario && r.metric == metric && r.modem_id == modem_id)
    }
}
