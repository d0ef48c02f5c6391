//! Three-phase training of the channel-to-modem network.
//!
//! 1. Optimization: minimize the rate objective of the network's output on
//!    each training channel.
//! 2. Convergence: feed two different channels through the same weights and
//!    trade the rate objective against the distance between the two output
//!    modems, pulling the network towards one channel-independent modem.
//! 3. Output: with the weights frozen, run the validation channels and take
//!    the element-wise median of the outputs as the unified modem.

use std::time::Instant;

use ndarray::Array2;
use num_complex::Complex;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelRealization, Dataset};
use crate::error::{Error, Result};
use crate::modem::{Modem, SnrSpec};
use crate::modnet::ModNetParams;
use crate::objective::{modem_distance, rate_objective_grad, siamese_objective_grad};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_snr_db: f64,
    /// Weight of the rate objective in the siamese loss.
    pub alpha: f64,
    pub seed: u64,
    /// Global gradient-norm clipping threshold.
    pub clip_norm: f64,
    /// Write a checkpoint every this many epochs; 0 disables checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            epochs: 500,
            batch_size: 200,
            train_snr_db: 20.0,
            alpha: 0.005,
            seed: 0,
            clip_norm: 10.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} must lie in (0, 1)", self.alpha)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.clip_norm > 0.0) || !(self.adam.lr > 0.0) {
            return Err(Error::Config("clip norm and learning rate must be positive".into()));
        }
        Ok(())
    }

    fn noise_ratio<T: Scalar>(&self) -> T {
        T::lit(SnrSpec::from_db(self.train_snr_db).noise_ratio())
    }
}

/// Per-epoch training record. In phase 1 the distance term is zero and the
/// loss equals the rate term.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub rate_term: f64,
    pub distance_term: f64,
    pub wall_time_s: f64,
}

/// Called after every epoch with the current parameters.
pub trait EpochObserver<T> {
    fn on_epoch(&mut self, metrics: &EpochMetrics, params: &ModNetParams<T>) -> Result<()>;
}

impl<T, F> EpochObserver<T> for F
where
    F: FnMut(&EpochMetrics, &ModNetParams<T>) -> Result<()>,
{
    fn on_epoch(&mut self, metrics: &EpochMetrics, params: &ModNetParams<T>) -> Result<()> {
        self(metrics, params)
    }
}

/// Observer that ignores every epoch.
pub fn silent<T>() -> impl EpochObserver<T> {
    |_: &EpochMetrics, _: &ModNetParams<T>| Ok(())
}

fn check_dims<T: Scalar>(params: &ModNetParams<T>, data: &Dataset) -> Result<()> {
    let arch = params.arch();
    if data.spec.frame_len() != arch.frame_len || data.spec.num_subcarriers != arch.num_subcarriers {
        return Err(Error::ArchMismatch(format!(
            "dataset has M = {}, M_L = {} but the network expects M = {}, M_L = {}",
            data.spec.num_subcarriers,
            data.spec.frame_len(),
            arch.num_subcarriers,
            arch.frame_len
        )));
    }
    Ok(())
}

#[derive(Default)]
struct Accum {
    loss: f64,
    rate: f64,
    distance: f64,
    samples: usize,
}

impl Accum {
    fn finish(&self, epoch: usize, start: &Instant) -> EpochMetrics {
        let n = self.samples.max(1) as f64;
        EpochMetrics {
            epoch,
            mean_loss: self.loss / n,
            rate_term: self.rate / n,
            distance_term: self.distance / n,
            wall_time_s: start.elapsed().as_secs_f64(),
        }
    }
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}

fn scale_grads<T: Scalar>(g: (Array2<Complex<T>>, Array2<Complex<T>>), s: T) -> (Array2<Complex<T>>, Array2<Complex<T>>) {
    (g.0.mapv(|z| z * s), g.1.mapv(|z| z * s))
}

fn apply_step<T: Scalar>(params: &mut ModNetParams<T>, adam: &mut Adam<T>, mut grad: Vec<T>, clip: f64) {
    clip_grad_norm(&mut grad, clip);
    adam.step(params.values_mut(), &grad);
}

/// Phase 1: minimizes the batch-mean rate objective. Returns one record per
/// epoch.
pub fn train_phase1<T: Scalar>(
    params: &mut ModNetParams<T>,
    train_set: &Dataset,
    cfg: &TrainConfig,
    observer: &mut impl EpochObserver<T>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    check_dims(params, train_set)?;
    if cfg.batch_size > train_set.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds dataset size {}",
            cfg.batch_size,
            train_set.len()
        )));
    }
    let rho: T = cfg.noise_ratio();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam.clone(), params.num_params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = Accum::default();
        for (batch_no, idx) in batches(&order, cfg.batch_size).enumerate() {
            let hs = train_set.matrices::<T>(idx);
            let (modems, tape) = params.forward_train(&hs)?;
            let inv_b = T::one() / T::count(idx.len());
            let per_sample: Vec<_> = modems
                .par_iter()
                .zip(&hs)
                .map(|(m, h)| rate_objective_grad(m, h, rho))
                .collect();
            let loss: f64 = per_sample.iter().map(|g| g.loss.as_f64()).sum();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    loss,
                    rate_term: loss,
                    distance_term: 0.0,
                });
            }
            let grads: Vec<_> = per_sample
                .into_iter()
                .map(|g| scale_grads((g.grad_phi, g.grad_psi_h), inv_b))
                .collect();
            let grad = params.backward(&tape, &grads)?;
            apply_step(params, &mut adam, grad, cfg.clip_norm);
            acc.loss += loss;
            acc.rate += loss;
            acc.samples += idx.len();
        }
        let m = acc.finish(epoch, &start);
        log::info!("phase 1 epoch {epoch}: loss {:.4}", m.mean_loss);
        observer.on_epoch(&m, params)?;
        history.push(m);
    }
    Ok(history)
}

/// Channel pairs for the siamese phase, as indices into `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub data: Dataset,
    pub pairs: Vec<(usize, usize)>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair(&self, i: usize) -> (&ChannelRealization, &ChannelRealization) {
        let (a, b) = self.pairs[i];
        (&self.data.realizations[a], &self.data.realizations[b])
    }
}

/// Pairs every channel with a different one through a uniformly random
/// derangement `σ`: the pairs are `(i, σ(i))`, except that a 2-cycle
/// `σ(i) = j, σ(j) = i` contributes the single pair `(min, max)`.
pub fn pair_indices(n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if n < 2 {
        return Err(Error::Argument(format!("pairing needs at least 2 samples, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sigma: Vec<usize> = (0..n).collect();
    loop {
        sigma.shuffle(&mut rng);
        if sigma.iter().enumerate().all(|(i, &j)| i != j) {
            break;
        }
    }
    Ok((0..n)
        .filter(|&i| {
            let j = sigma[i];
            !(sigma[j] == i && j < i)
        })
        .map(|i| (i, sigma[i]))
        .collect())
}

pub fn pair_dataset(train_set: &Dataset, seed: u64) -> Result<PairedDataset> {
    Ok(PairedDataset {
        pairs: pair_indices(train_set.len(), seed)?,
        data: train_set.clone(),
    })
}

/// Phase 2: siamese training. Both branches of a pair run through the same
/// parameter vector and their gradients accumulate into it.
pub fn train_phase2<T: Scalar>(
    params: &mut ModNetParams<T>,
    pairs: &PairedDataset,
    cfg: &TrainConfig,
    observer: &mut impl EpochObserver<T>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    check_dims(params, &pairs.data)?;
    if pairs.is_empty() {
        return Err(Error::Argument("no training pairs".into()));
    }
    let batch_size = cfg.batch_size.min(pairs.len());
    let rho: T = cfg.noise_ratio();
    let alpha = T::lit(cfg.alpha);
    // distinct stream from phase 1 so the epoch orders differ
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut adam = Adam::new(cfg.adam.clone(), params.num_params());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = Accum::default();
        for (batch_no, idx) in batches(&order, batch_size).enumerate() {
            let first: Vec<usize> = idx.iter().map(|&i| pairs.pairs[i].0).collect();
            let second: Vec<usize> = idx.iter().map(|&i| pairs.pairs[i].1).collect();
            let h1 = pairs.data.matrices::<T>(&first);
            let h2 = pairs.data.matrices::<T>(&second);
            let (m1, tape1) = params.forward_train(&h1)?;
            let (m2, tape2) = params.forward_train(&h2)?;
            let per_pair: Vec<_> = (0..idx.len())
                .into_par_iter()
                .map(|k| siamese_objective_grad((&m1[k], &h1[k]), (&m2[k], &h2[k]), rho, alpha))
                .collect();
            let loss: f64 = per_pair.iter().map(|g| g.loss.as_f64()).sum();
            let rate: f64 = per_pair.iter().map(|g| g.rate_term.as_f64()).sum();
            let distance: f64 = per_pair.iter().map(|g| g.distance_term.as_f64()).sum();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    loss,
                    rate_term: rate,
                    distance_term: distance,
                });
            }
            let inv_b = T::one() / T::count(idx.len());
            let (g1, g2): (Vec<_>, Vec<_>) = per_pair
                .into_iter()
                .map(|g| {
                    let [a, b] = g.grads;
                    (scale_grads(a, inv_b), scale_grads(b, inv_b))
                })
                .unzip();
            let mut grad = params.backward(&tape1, &g1)?;
            let grad2 = params.backward(&tape2, &g2)?;
            grad.iter_mut().zip(grad2).for_each(|(a, b)| *a += b);
            apply_step(params, &mut adam, grad, cfg.clip_norm);
            acc.loss += loss;
            acc.rate += rate;
            acc.distance += distance;
            acc.samples += idx.len();
        }
        let m = acc.finish(epoch, &start);
        log::info!(
            "phase 2 epoch {epoch}: loss {:.5} (rate {:.4}, distance {:.5})",
            m.mean_loss,
            m.rate_term,
            m.distance_term
        );
        observer.on_epoch(&m, params)?;
        history.push(m);
    }
    Ok(history)
}

/// Inference over a dataset in fixed-size chunks.
pub fn infer_dataset<T: Scalar>(params: &ModNetParams<T>, data: &Dataset, indices: &[usize]) -> Result<Vec<Modem<T>>> {
    check_dims(params, data)?;
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(64) {
        out.extend(params.infer(&data.matrices::<T>(chunk))?);
    }
    Ok(out)
}

/// Mean modem distance over the given pairs, with frozen parameters.
pub fn mean_pair_distance<T: Scalar>(params: &ModNetParams<T>, data: &Dataset, pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Argument("no pairs".into()));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let modems = infer_dataset(params, data, &all)?;
    let total: f64 = pairs
        .iter()
        .map(|&(a, b)| modem_distance(&modems[a].cast::<f64>(), &modems[b].cast::<f64>()))
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Median of a slice; the mean of the two central values for even lengths.
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    let n = values.len();
    let mid = n / 2;
    let (_, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Phase 3: element-wise median of the network's modems over the validation
/// channels, renormalized. The parameters are not modified.
pub fn distill_phase3<T: Scalar>(params: &ModNetParams<T>, validation_set: &Dataset) -> Result<Modem<f64>> {
    distill_modems(&infer_dataset(params, validation_set, &(0..validation_set.len()).collect::<Vec<_>>())?)
}

/// Element-wise median (real and imaginary parts separately) of a set of
/// modems, renormalized to the target energies.
pub fn distill_modems<T: Scalar>(modems: &[Modem<T>]) -> Result<Modem<f64>> {
    let first = modems.first().ok_or_else(|| Error::Argument("empty validation set".into()))?;
    let (ml, m) = (first.frame_len(), first.num_subcarriers());
    let mut column = vec![0.0f64; modems.len()];
    let mut median_of = |get: &dyn Fn(&Modem<T>) -> f64| {
        for (slot, md) in column.iter_mut().zip(modems) {
            *slot = get(md);
        }
        median(&mut column)
    };
    let mut phi = Array2::<Complex<f64>>::zeros((ml, m));
    for ((r, c), z) in phi.indexed_iter_mut() {
        let re = median_of(&|md| md.phi()[(r, c)].re.as_f64());
        let im = median_of(&|md| md.phi()[(r, c)].im.as_f64());
        *z = Complex::new(re, im);
    }
    let mut psi_h = Array2::<Complex<f64>>::zeros((m, ml));
    for ((r, c), z) in psi_h.indexed_iter_mut() {
        let re = median_of(&|md| md.psi_h()[(r, c)].re.as_f64());
        let im = median_of(&|md| md.psi_h()[(r, c)].im.as_f64());
        *z = Complex::new(re, im);
    }
    Modem::new(phi, psi_h)?.normalized()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_dataset, ChannelSpec};
    use crate::modem::{equivalent_channel, rate_objective};
    use crate::modnet::{init_modnet, ModNetArch};

    fn small_spec() -> ChannelSpec {
        ChannelSpec {
            num_subcarriers: 6,
            prefix_len: 2,
            max_delay_grid: 2,
            ..ChannelSpec::default()
        }
    }

    fn small_arch() -> ModNetArch {
        ModNetArch {
            conv_kernel: 3,
            ..ModNetArch::new(6, 2)
        }
        .with_conv_width(3)
        .with_hidden_width(16)
    }

    fn cfg(epochs: usize, batch: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: batch,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn median_handles_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&mut [7.0]), 7.0);
    }

    #[test]
    fn pairing_contract() {
        assert_eq!(pair_indices(2, 9).unwrap(), vec![(0, 1)]);
        assert!(pair_indices(1, 0).is_err());
        for seed in 0..10_000 {
            let pairs = pair_indices(5, seed).unwrap();
            assert!(pairs.iter().all(|(a, b)| a != b));
        }
        assert_eq!(pair_indices(50, 3).unwrap(), pair_indices(50, 3).unwrap());
        let pairs = pair_indices(50, 3).unwrap();
        let mut seen = [false; 50];
        for (a, b) in pairs {
            seen[a] = true;
            seen[b] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn phase1_descends_and_logs_every_epoch() {
        let data = generate_dataset(&small_spec(), 10, 1).unwrap();
        let mut p = init_modnet::<f32>(&small_arch(), 1).unwrap();
        let cfg = cfg(3, 5);
        let mut seen = 0;
        let hist = train_phase1(&mut p, &data, &cfg, &mut |_: &EpochMetrics, _: &ModNetParams<f32>| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(hist.len(), 3);
        assert_eq!(seen, 3);
        assert!(hist.last().unwrap().mean_loss <= hist[0].mean_loss);
        assert!(hist.iter().all(|m| m.distance_term == 0.0));
    }

    #[test]
    fn phase1_rejects_oversized_batches_and_wrong_dims() {
        let data = generate_dataset(&small_spec(), 4, 1).unwrap();
        let mut p = init_modnet::<f32>(&small_arch(), 1).unwrap();
        assert!(train_phase1(&mut p, &data, &cfg(1, 5), &mut silent()).is_err());
        let other = generate_dataset(&ChannelSpec { num_subcarriers: 7, ..small_spec() }, 4, 1).unwrap();
        assert!(matches!(
            train_phase1(&mut p, &other, &cfg(1, 2), &mut silent()),
            Err(Error::ArchMismatch(_))
        ));
    }

    #[test]
    fn phase2_loss_decomposes() {
        let data = generate_dataset(&small_spec(), 8, 2).unwrap();
        let pairs = pair_dataset(&data, 5).unwrap();
        let mut p = init_modnet::<f32>(&small_arch(), 1).unwrap();
        let c = cfg(2, 4);
        let hist = train_phase2(&mut p, &pairs, &c, &mut silent()).unwrap();
        for m in &hist {
            let recomposed = c.alpha * m.rate_term + (1.0 - c.alpha) * m.distance_term;
            assert!((recomposed - m.mean_loss).abs() <= 1e-6 * m.mean_loss.abs().max(1e-12));
        }
    }

    #[test]
    fn loop_precision_objective_matches_double_precision() {
        let data = generate_dataset(&small_spec(), 6, 3).unwrap();
        let p = init_modnet::<f32>(&small_arch(), 2).unwrap();
        let idx: Vec<usize> = (0..6).collect();
        let h32 = data.matrices::<f32>(&idx);
        let h64 = data.matrices::<f64>(&idx);
        let snr = SnrSpec::from_db(20.0);
        for (m, (a, b)) in p.infer(&h32).unwrap().iter().zip(h32.iter().zip(&h64)) {
            let single = rate_objective_grad(m, a, snr.noise_ratio() as f32).loss as f64;
            let double = rate_objective(&equivalent_channel(&m.cast::<f64>(), b).unwrap(), &snr);
            assert!((single - double).abs() <= 1e-3 * double.abs());
        }
    }

    #[test]
    fn distilling_identical_outputs_returns_them() {
        let modem = Modem::<f64>::ofdm(6, 2);
        let out = distill_modems(&[modem.clone(), modem.clone(), modem.clone()]).unwrap();
        for (a, b) in out.phi().iter().zip(modem.phi()) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!(distill_modems::<f64>(&[]).is_err());
    }

    #[test]
    fn single_sample_distillation_is_that_output() {
        let data = generate_dataset(&small_spec(), 1, 3).unwrap();
        let p = init_modnet::<f32>(&small_arch(), 2).unwrap();
        let before = p.clone();
        let out = distill_phase3(&p, &data).unwrap();
        let direct = p.infer(&data.matrices::<f32>(&[0])).unwrap().remove(0).cast::<f64>().normalized().unwrap();
        for (a, b) in out.phi().iter().zip(direct.phi()) {
            assert!((a - b).norm() < 1e-9);
        }
        assert_eq!(p, before);
        assert!(out.energy_error() < 1e-12);
    }
}
