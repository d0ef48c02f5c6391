//! Sparse delay-Doppler channel model.
//!
//! A realization is a handful of propagation paths, each with a complex gain,
//! an integer delay on the sampling grid and a Doppler shift. Expanded over one
//! frame of `M_L = M + M_p` samples it becomes the matrix
//! `H = sum_i h_i * Delta^{k_i} * Gamma_{l_i}` acting on the transmitted frame.
//!
//! Rows and columns of every frame-length quantity are indexed by the sample
//! time `n = -M_p, ..., M - 1`, prefix samples first.

use ndarray::{Array1, Array2};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Frame geometry and mobility statistics of a channel family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub carrier_freq_hz: f64,
    pub subcarrier_spacing_hz: f64,
    /// Number of data-bearing samples `M`.
    pub num_subcarriers: usize,
    /// Prefix length `M_p` in samples.
    pub prefix_len: usize,
    pub ue_speed_mps: f64,
    pub num_paths: usize,
    /// Largest delay, in samples, a path may take.
    pub max_delay_grid: usize,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        ChannelSpec {
            carrier_freq_hz: 4.0e9,
            subcarrier_spacing_hz: 15.0e3,
            num_subcarriers: 128,
            prefix_len: 24,
            ue_speed_mps: kmh_to_mps(360.0),
            num_paths: 4,
            max_delay_grid: 20,
        }
    }
}

pub fn kmh_to_mps(kmh: f64) -> f64 {
    kmh / 3.6
}

impl ChannelSpec {
    /// `M_L = M + M_p`.
    pub fn frame_len(&self) -> usize {
        self.num_subcarriers + self.prefix_len
    }

    /// Frame duration `T = 1 / Δf` in seconds, prefix excluded.
    pub fn frame_duration(&self) -> f64 {
        1.0 / self.subcarrier_spacing_hz
    }

    /// Sampling interval `T / M` in seconds.
    pub fn sample_interval(&self) -> f64 {
        self.frame_duration() / self.num_subcarriers as f64
    }

    /// Maximum Doppler shift `v f_c / c` in Hz.
    pub fn max_doppler_hz(&self) -> f64 {
        self.ue_speed_mps * self.carrier_freq_hz / SPEED_OF_LIGHT
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_subcarriers == 0 {
            return Err(Error::Config("number of subcarriers must be positive".into()));
        }
        if self.num_paths == 0 {
            return Err(Error::Config("number of paths must be positive".into()));
        }
        if self.max_delay_grid > self.prefix_len {
            return Err(Error::Config(format!(
                "maximum delay grid {} exceeds prefix length {}",
                self.max_delay_grid, self.prefix_len
            )));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.carrier_freq_hz) || !positive(self.subcarrier_spacing_hz) {
            return Err(Error::Config(
                "carrier frequency and subcarrier spacing must be positive".into(),
            ));
        }
        if !(self.ue_speed_mps.is_finite() && self.ue_speed_mps >= 0.0) {
            return Err(Error::Config("speed must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// One propagation path.
#[derive(Clone, Debug, PartialEq)]
pub struct PathComponent {
    pub gain: Complex<f64>,
    /// Delay in samples.
    pub delay_grid: usize,
    pub doppler_hz: f64,
    /// `k = ν T`, the Doppler shift in units of the subcarrier spacing.
    pub normalized_doppler: f64,
}

impl PathComponent {
    pub fn new(spec: &ChannelSpec, gain: Complex<f64>, delay_grid: usize, doppler_hz: f64) -> Self {
        PathComponent {
            gain,
            delay_grid,
            doppler_hz,
            normalized_doppler: doppler_hz * spec.frame_duration(),
        }
    }

    /// Physical delay in seconds.
    pub fn delay_s(&self, spec: &ChannelSpec) -> f64 {
        self.delay_grid as f64 * spec.sample_interval()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub spec: ChannelSpec,
    pub paths: Vec<PathComponent>,
}

impl ChannelRealization {
    pub fn new(spec: ChannelSpec, paths: Vec<PathComponent>) -> Result<Self> {
        spec.validate()?;
        let f_max = spec.max_doppler_hz();
        for p in &paths {
            if p.delay_grid > spec.max_delay_grid {
                return Err(Error::Argument(format!(
                    "path delay {} exceeds maximum {}",
                    p.delay_grid, spec.max_delay_grid
                )));
            }
            if p.doppler_hz.abs() > f_max * (1.0 + 1e-12) {
                return Err(Error::Argument(format!(
                    "path Doppler {} Hz exceeds maximum {} Hz",
                    p.doppler_hz, f_max
                )));
            }
        }
        Ok(ChannelRealization { spec, paths })
    }

    /// Total path power `sum_i |h_i|^2`.
    pub fn path_energy(&self) -> f64 {
        self.paths.iter().map(|p| p.gain.norm_sqr()).sum()
    }

    pub fn matrix<T: Scalar>(&self) -> Array2<Complex<T>> {
        build_channel_matrix(self)
    }
}

/// Draws one realization from the path-level statistics of `spec`, using the
/// given generator.
///
/// Gains are `CN(0, 1/N_p)`, delays uniform on `{0, ..., l_max}`, and
/// Dopplers follow `f_max cos θ` with `θ` uniform on `[0, 2π)`.
pub fn sample_channel_with<R: Rng + ?Sized>(spec: &ChannelSpec, rng: &mut R) -> ChannelRealization {
    let n_p = spec.num_paths;
    let std = (0.5 / n_p as f64).sqrt();
    let f_max = spec.max_doppler_hz();
    let paths = (0..n_p)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            let delay = rng.random_range(0..=spec.max_delay_grid);
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            PathComponent::new(spec, Complex::new(re * std, im * std), delay, f_max * theta.cos())
        })
        .collect();
    ChannelRealization {
        spec: spec.clone(),
        paths,
    }
}

/// Generator for sample `index` of the dataset seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws one realization; identical to sample 0 of `generate_dataset(spec, _, seed)`.
pub fn sample_channel(spec: &ChannelSpec, seed: u64) -> Result<ChannelRealization> {
    spec.validate()?;
    Ok(sample_channel_with(spec, &mut sample_rng(seed, 0)))
}

/// Expands a realization into the `M_L x M_L` channel matrix.
///
/// Entry `(r, c)` collects `h_i exp(j 2π n k_i / M)` for every path with
/// `c = r - l_i`, where `n = r - M_p`. Samples delayed past the start of the
/// frame are dropped, never wrapped.
pub fn build_channel_matrix<T: Scalar>(realization: &ChannelRealization) -> Array2<Complex<T>> {
    let spec = &realization.spec;
    let m = spec.num_subcarriers as f64;
    let m_p = spec.prefix_len as i64;
    let len = spec.frame_len();
    let mut h = Array2::<Complex<T>>::zeros((len, len));
    for path in &realization.paths {
        let l = path.delay_grid;
        for r in l..len {
            let n = (r as i64 - m_p) as f64;
            let phase = std::f64::consts::TAU * n * path.normalized_doppler / m;
            let z = path.gain * Complex::from_polar(1.0, phase);
            h[(r, r - l)] += Complex::new(T::lit(z.re), T::lit(z.im));
        }
    }
    h
}

/// `r = H s + w` with circular white Gaussian noise of per-sample variance
/// `noise_var`.
pub fn apply_channel_with<T: Scalar, R: Rng + ?Sized>(
    h: &Array2<Complex<T>>,
    s: &Array1<Complex<T>>,
    noise_var: f64,
    rng: &mut R,
) -> Result<Array1<Complex<T>>> {
    if !(noise_var >= 0.0) {
        return Err(Error::Argument(format!("noise variance {noise_var} is negative")));
    }
    if h.ncols() != s.len() {
        return Err(Error::Dimension(format!(
            "channel has {} columns but signal has {} samples",
            h.ncols(),
            s.len()
        )));
    }
    let mut r = h.dot(s);
    if noise_var > 0.0 {
        let std = (noise_var / 2.0).sqrt();
        for v in r.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *v += Complex::new(T::lit(re * std), T::lit(im * std));
        }
    }
    Ok(r)
}

pub fn apply_channel<T: Scalar>(
    h: &Array2<Complex<T>>,
    s: &Array1<Complex<T>>,
    noise_var: f64,
    seed: u64,
) -> Result<Array1<Complex<T>>> {
    apply_channel_with(h, s, noise_var, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A set of realizations sharing one spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: ChannelSpec,
    pub realizations: Vec<ChannelRealization>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.realizations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.realizations.is_empty()
    }

    /// Materializes the channel matrices of the selected samples.
    pub fn matrices<T: Scalar>(&self, indices: &[usize]) -> Vec<Array2<Complex<T>>> {
        indices
            .par_iter()
            .map(|&i| build_channel_matrix(&self.realizations[i]))
            .collect()
    }

    /// Keeps the first `count` samples.
    pub fn truncated(&self, count: usize) -> Dataset {
        Dataset {
            spec: self.spec.clone(),
            realizations: self.realizations.iter().take(count).cloned().collect(),
        }
    }
}

/// Generates `count` realizations; sample `i` draws from its own generator
/// stream, so the result does not depend on evaluation order.
pub fn generate_dataset(spec: &ChannelSpec, count: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Argument("dataset size must be positive".into()));
    }
    let realizations = (0..count as u64)
        .into_par_iter()
        .map(|i| sample_channel_with(spec, &mut sample_rng(seed, i)))
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        realizations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_spec() -> ChannelSpec {
        ChannelSpec {
            num_subcarriers: 32,
            prefix_len: 8,
            max_delay_grid: 6,
            ..ChannelSpec::default()
        }
    }

    /// Per-sample evaluation of `r(n) = sum_i h_i s(n - l_i) exp(j2π n k_i / M)`.
    fn direct_response(real: &ChannelRealization, s: &[Complex<f64>]) -> Vec<Complex<f64>> {
        let spec = &real.spec;
        let m_p = spec.prefix_len as i64;
        let m = spec.num_subcarriers as f64;
        (0..spec.frame_len() as i64)
            .map(|idx| {
                let n = idx - m_p;
                real.paths
                    .iter()
                    .map(|p| {
                        let src = idx - p.delay_grid as i64;
                        if src < 0 {
                            return Complex::new(0.0, 0.0);
                        }
                        let phase = std::f64::consts::TAU * n as f64 * p.normalized_doppler / m;
                        p.gain * s[src as usize] * Complex::from_polar(1.0, phase)
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn doppler_and_delay_scales_match_table_values() {
        let spec = ChannelSpec::default();
        assert!((spec.max_doppler_hz() - 1334.258).abs() < 1e-2);
        let p = PathComponent::new(&spec, Complex::new(1.0, 0.0), 10, 0.0);
        assert!((p.delay_s(&spec) * 1e6 - 5.208).abs() < 1e-3);
        let q = PathComponent::new(&spec, Complex::new(1.0, 0.0), 0, -1297.0);
        assert!((q.normalized_doppler + 0.08647).abs() < 1e-4);
    }

    #[test]
    fn rejects_delay_beyond_prefix() {
        let spec = ChannelSpec {
            max_delay_grid: 25,
            ..ChannelSpec::default()
        };
        assert!(matches!(sample_channel(&spec, 1), Err(Error::Config(_))));
    }

    #[test]
    fn sampled_paths_respect_bounds() {
        let spec = desk_spec();
        let data = generate_dataset(&spec, 500, 3).unwrap();
        let f_max = spec.max_doppler_hz();
        for r in &data.realizations {
            assert_eq!(r.paths.len(), spec.num_paths);
            for p in &r.paths {
                assert!(p.delay_grid <= spec.max_delay_grid);
                assert!(p.doppler_hz.abs() <= f_max);
            }
        }
    }

    #[test]
    fn single_path_has_unit_mean_energy() {
        let spec = ChannelSpec {
            num_paths: 1,
            ..desk_spec()
        };
        let data = generate_dataset(&spec, 20_000, 11).unwrap();
        let mean = data.realizations.iter().map(|r| r.path_energy()).sum::<f64>() / 20_000.0;
        assert!((mean - 1.0).abs() < 0.03, "mean energy {mean}");
    }

    #[test]
    fn identity_and_pure_delay_matrices() {
        let spec = desk_spec();
        let flat = ChannelRealization::new(
            spec.clone(),
            vec![PathComponent::new(&spec, Complex::new(1.0, 0.0), 0, 0.0)],
        )
        .unwrap();
        let h = build_channel_matrix::<f64>(&flat);
        assert_eq!(h, Array2::eye(spec.frame_len()).mapv(|v: f64| Complex::new(v, 0.0)));

        let delayed = ChannelRealization::new(
            spec.clone(),
            vec![PathComponent::new(&spec, Complex::new(1.0, 0.0), 2, 0.0)],
        )
        .unwrap();
        let h = build_channel_matrix::<f64>(&delayed);
        for ((r, c), v) in h.indexed_iter() {
            let expected = if r == c + 2 { 1.0 } else { 0.0 };
            assert_eq!(*v, Complex::new(expected, 0.0));
        }
    }

    #[test]
    fn matrix_matches_per_sample_response() {
        let spec = desk_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..20 {
            let real = sample_channel(&spec, i).unwrap();
            let h = build_channel_matrix::<f64>(&real);
            let s: Vec<Complex<f64>> = (0..spec.frame_len())
                .map(|_| Complex::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
                .collect();
            let fast = h.dot(&Array1::from(s.clone()));
            let direct = direct_response(&real, &s);
            for (a, b) in fast.iter().zip(direct) {
                assert!((a - b).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn no_wraparound_into_prefix_rows() {
        let spec = desk_spec();
        let real = ChannelRealization::new(
            spec.clone(),
            vec![PathComponent::new(&spec, Complex::new(0.5, 0.5), 5, 700.0)],
        )
        .unwrap();
        let h = build_channel_matrix::<f64>(&real);
        for r in 0..5 {
            assert!(h.row(r).iter().all(|z| z.norm() == 0.0));
        }
        // the last five transmitted samples fall off the end of the frame
        for c in spec.frame_len() - 5..spec.frame_len() {
            assert!(h.column(c).iter().all(|z| z.norm() == 0.0));
        }
    }

    #[test]
    fn noiseless_channel_is_exact() {
        let spec = desk_spec();
        let h = sample_channel(&spec, 9).unwrap().matrix::<f64>();
        let s = Array1::from_shape_fn(spec.frame_len(), |i| Complex::new(i as f64, -(i as f64)));
        assert_eq!(apply_channel(&h, &s, 0.0, 1).unwrap(), h.dot(&s));
        let eye = Array2::eye(spec.frame_len()).mapv(|v: f64| Complex::new(v, 0.0));
        assert_eq!(apply_channel(&eye, &s, 0.0, 1).unwrap(), s);
        assert!(matches!(apply_channel(&eye, &s, -1.0, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn noise_variance_matches_request() {
        let len = 100;
        let eye = Array2::eye(len).mapv(|v: f64| Complex::new(v, 0.0));
        let zero = Array1::zeros(len);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sigma2 = 0.37;
        let mut acc = 0.0;
        let draws = 1000;
        for _ in 0..draws {
            let r = apply_channel_with(&eye, &zero, sigma2, &mut rng).unwrap();
            acc += r.iter().map(|z| z.norm_sqr()).sum::<f64>();
        }
        let var = acc / (draws * len) as f64;
        assert!((var - sigma2).abs() < 0.03 * sigma2, "variance {var}");
    }

    #[test]
    fn dataset_is_deterministic() {
        let spec = desk_spec();
        let a = generate_dataset(&spec, 50, 1).unwrap();
        let b = generate_dataset(&spec, 50, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(generate_dataset(&spec, 3, 1).unwrap().len(), 3);
        assert_eq!(a.realizations[0], sample_channel(&spec, 1).unwrap());
        assert!(generate_dataset(&spec, 0, 1).is_err());
    }
}
