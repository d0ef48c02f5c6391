//! Matrix-form modems, the OFDM baseline and the equivalent-channel rate math.
//!
//! A modem is a pair `(Φ, Ψᴴ)`: `Φ` (`M_L x M`) maps `M` symbols onto one
//! frame of `M_L` samples and `Ψᴴ` (`M x M_L`) maps the received frame back to
//! `M` sub-channel outputs. The transmit chain is `y = Ψᴴ (H Φ x + w)`, so the
//! sub-channels see the equivalent channel `H_e = Ψᴴ H Φ`.

use ndarray::{Array1, Array2};
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::{cast_complex, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Modem<T> {
    phi: Array2<Complex<T>>,
    psi_h: Array2<Complex<T>>,
}

pub(crate) fn frobenius_sqr<T: Scalar>(a: &Array2<Complex<T>>) -> T {
    a.iter().map(|z| z.norm_sqr()).sum()
}

impl<T: Scalar> Modem<T> {
    /// Pairs a modulation and a demodulation matrix, checking that their
    /// shapes are transposes of each other with `M_L >= M`.
    pub fn new(phi: Array2<Complex<T>>, psi_h: Array2<Complex<T>>) -> Result<Self> {
        let (frame_len, m) = phi.dim();
        if psi_h.dim() != (m, frame_len) {
            return Err(Error::Dimension(format!(
                "modulation matrix is {}x{} but demodulation matrix is {}x{}",
                frame_len,
                m,
                psi_h.nrows(),
                psi_h.ncols()
            )));
        }
        if m == 0 || frame_len < m {
            return Err(Error::Dimension(format!(
                "frame length {frame_len} must be at least the symbol count {m} > 0"
            )));
        }
        Ok(Modem { phi, psi_h })
    }

    /// Cyclic-prefix OFDM with `m` subcarriers and an `prefix_len`-sample
    /// prefix: `Φ = A_cp Fᴴ`, `Ψᴴ = F R_cp` with the unitary DFT `F`.
    pub fn ofdm(m: usize, prefix_len: usize) -> Self {
        assert!(m > 0, "OFDM needs at least one subcarrier");
        let frame_len = m + prefix_len;
        let scale = 1.0 / (m as f64).sqrt();
        let twiddle = |k: usize, n: i64| -> Complex<T> {
            let phase = std::f64::consts::TAU * (k as i64 * n).rem_euclid(m as i64) as f64 / m as f64;
            cast_complex(Complex::from_polar(scale, phase))
        };
        let phi = Array2::from_shape_fn((frame_len, m), |(r, k)| twiddle(k, r as i64 - prefix_len as i64));
        let psi_h = Array2::from_shape_fn((m, frame_len), |(k, r)| {
            if r < prefix_len {
                Complex::new(T::zero(), T::zero())
            } else {
                twiddle(k, r as i64 - prefix_len as i64).conj()
            }
        });
        Modem { phi, psi_h }
    }

    /// Rescales to `‖Φ‖_F² = M_L` and `‖Ψᴴ‖_F² = M`.
    pub fn normalized(self) -> Result<Self> {
        let e_phi = frobenius_sqr(&self.phi);
        let e_psi = frobenius_sqr(&self.psi_h);
        if !(e_phi > T::zero()) || !(e_psi > T::zero()) || !e_phi.is_finite() || !e_psi.is_finite() {
            return Err(Error::Degenerate(
                "cannot normalize a zero or non-finite modem matrix".into(),
            ));
        }
        let a = (T::count(self.frame_len()) / e_phi).sqrt();
        let b = (T::count(self.num_subcarriers()) / e_psi).sqrt();
        let Modem { phi, psi_h } = self;
        Ok(Modem {
            phi: phi.mapv(|z| z * a),
            psi_h: psi_h.mapv(|z| z * b),
        })
    }

    pub fn phi(&self) -> &Array2<Complex<T>> {
        &self.phi
    }

    pub fn psi_h(&self) -> &Array2<Complex<T>> {
        &self.psi_h
    }

    pub fn into_parts(self) -> (Array2<Complex<T>>, Array2<Complex<T>>) {
        (self.phi, self.psi_h)
    }

    pub fn num_subcarriers(&self) -> usize {
        self.phi.ncols()
    }

    pub fn frame_len(&self) -> usize {
        self.phi.nrows()
    }

    pub fn prefix_len(&self) -> usize {
        self.frame_len() - self.num_subcarriers()
    }

    /// `(‖Φ‖_F², ‖Ψᴴ‖_F²)`.
    pub fn energies(&self) -> (T, T) {
        (frobenius_sqr(&self.phi), frobenius_sqr(&self.psi_h))
    }

    /// Largest relative deviation of either energy from its target.
    pub fn energy_error(&self) -> f64 {
        let (e_phi, e_psi) = self.energies();
        let d_phi = (e_phi.as_f64() / self.frame_len() as f64 - 1.0).abs();
        let d_psi = (e_psi.as_f64() / self.num_subcarriers() as f64 - 1.0).abs();
        d_phi.max(d_psi)
    }

    /// `Σ_n |Ψᴴ(m, n)|²` for every sub-channel `m`.
    pub fn demod_row_energy(&self) -> Array1<T> {
        self.psi_h.rows().into_iter().map(|r| r.iter().map(|z| z.norm_sqr()).sum()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Modem<U> {
        Modem {
            phi: self.phi.mapv(cast_complex),
            psi_h: self.psi_h.mapv(cast_complex),
        }
    }

    /// Modulated frame `s = Φ x`.
    pub fn modulate(&self, symbols: &Array1<Complex<T>>) -> Array1<Complex<T>> {
        self.phi.dot(symbols)
    }

    /// Sub-channel outputs `y = Ψᴴ r`.
    pub fn demodulate(&self, received: &Array1<Complex<T>>) -> Array1<Complex<T>> {
        self.psi_h.dot(received)
    }
}

/// `H_e = Ψᴴ H Φ` together with the demodulator row energies that scale the
/// noise seen by each sub-channel.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivalentChannel<T> {
    pub matrix: Array2<Complex<T>>,
    pub demod_row_energy: Array1<T>,
}

pub fn equivalent_channel<T: Scalar>(modem: &Modem<T>, h: &Array2<Complex<T>>) -> Result<EquivalentChannel<T>> {
    let len = modem.frame_len();
    if h.dim() != (len, len) {
        return Err(Error::Dimension(format!(
            "channel matrix is {}x{} but the modem frame length is {}",
            h.nrows(),
            h.ncols(),
            len
        )));
    }
    Ok(EquivalentChannel {
        matrix: modem.psi_h.dot(h).dot(&modem.phi),
        demod_row_energy: modem.demod_row_energy(),
    })
}

/// Signal and noise powers. Symbols always have unit power; only the ratio
/// `σ_w² / σ_s²` enters the rate and equalizer formulas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnrSpec {
    pub signal_power: f64,
    pub noise_power: f64,
}

impl SnrSpec {
    pub fn from_db(snr_db: f64) -> Self {
        SnrSpec {
            signal_power: 1.0,
            noise_power: 10f64.powf(-snr_db / 10.0),
        }
    }

    pub fn snr_db(&self) -> f64 {
        10.0 * (self.signal_power / self.noise_power).log10()
    }

    /// `σ_w² / σ_s²`.
    pub fn noise_ratio(&self) -> f64 {
        self.noise_power / self.signal_power
    }
}

/// Sub-channel rate
/// `log2(1 + |H_e(m,m)|² / (Σ_{n≠m} |H_e(m,n)|² + (σ_w²/σ_s²) Σ_n |Ψᴴ(m,n)|²))`.
///
/// A sub-channel with zero signal, zero interference and a zero demodulator
/// row has rate 0.
pub fn subchannel_rates<T: Scalar>(eq: &EquivalentChannel<T>, snr: &SnrSpec) -> Array1<T> {
    let rho = T::lit(snr.noise_ratio());
    eq.matrix
        .rows()
        .into_iter()
        .zip(eq.demod_row_energy.iter())
        .enumerate()
        .map(|(m, (row, &energy))| {
            let total: T = row.iter().map(|z| z.norm_sqr()).sum();
            let signal = row[m].norm_sqr();
            rate_from_powers(signal, total - signal, rho * energy)
        })
        .collect()
}

#[inline]
pub(crate) fn rate_from_powers<T: Scalar>(signal: T, interference: T, noise: T) -> T {
    let denom = interference.max(T::zero()) + noise;
    if denom > T::zero() {
        (T::one() + signal / denom).log2()
    } else {
        T::zero()
    }
}

/// `-[Σ_m r_m + M min_m r_m]`, the rate objective minimized during training.
pub fn rate_objective<T: Scalar>(eq: &EquivalentChannel<T>, snr: &SnrSpec) -> T {
    objective_from_rates(&subchannel_rates(eq, snr))
}

pub(crate) fn objective_from_rates<T: Scalar>(rates: &Array1<T>) -> T {
    let sum: T = rates.iter().copied().sum();
    let min = rates.iter().copied().fold(T::infinity(), T::min);
    -(sum + T::count(rates.len()) * min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ChannelRealization, ChannelSpec, PathComponent};
    use approx::assert_abs_diff_eq;

    fn spec(m: usize, mp: usize) -> ChannelSpec {
        ChannelSpec {
            num_subcarriers: m,
            prefix_len: mp,
            max_delay_grid: mp,
            ..ChannelSpec::default()
        }
    }

    fn eye(n: usize) -> Array2<Complex<f64>> {
        Array2::eye(n).mapv(|v: f64| Complex::new(v, 0.0))
    }

    #[test]
    fn ofdm_dimensions_and_energy() {
        let modem = Modem::<f64>::ofdm(128, 24);
        assert_eq!(modem.phi().dim(), (152, 128));
        assert_eq!(modem.psi_h().dim(), (128, 152));
        let (e_phi, e_psi) = modem.energies();
        assert_abs_diff_eq!(e_phi, 152.0, epsilon = 1e-9);
        assert_abs_diff_eq!(e_psi, 128.0, epsilon = 1e-9);
    }

    #[test]
    fn ofdm_flat_channel_is_identity() {
        let modem = Modem::<f64>::ofdm(16, 4);
        let eq = equivalent_channel(&modem, &eye(20)).unwrap();
        for ((r, c), v) in eq.matrix.indexed_iter() {
            let target = if r == c { 1.0 } else { 0.0 };
            assert!((v - Complex::new(target, 0.0)).norm() < 1e-10);
        }
    }

    #[test]
    fn ofdm_diagonalizes_static_delay() {
        let s = spec(32, 8);
        let real = ChannelRealization::new(s.clone(), vec![PathComponent::new(&s, Complex::new(1.0, 0.0), 3, 0.0)])
            .unwrap();
        let modem = Modem::<f64>::ofdm(32, 8);
        let eq = equivalent_channel(&modem, &real.matrix()).unwrap();
        for ((r, c), v) in eq.matrix.indexed_iter() {
            let target = if r == c {
                Complex::from_polar(1.0, -std::f64::consts::TAU * (r * 3) as f64 / 32.0)
            } else {
                Complex::new(0.0, 0.0)
            };
            assert!((v - target).norm() < 1e-10, "({r},{c})");
        }
    }

    #[test]
    fn normalization_is_idempotent_and_scale_invariant() {
        let modem = Modem::<f64>::ofdm(16, 4);
        let again = modem.clone().normalized().unwrap();
        for (a, b) in modem.phi().iter().zip(again.phi()) {
            assert!((a - b).norm() < 1e-12);
        }
        let scaled = Modem::new(modem.phi().mapv(|z| z * 7.0), modem.psi_h().clone()).unwrap();
        let renorm = scaled.normalized().unwrap();
        for (a, b) in modem.phi().iter().zip(renorm.phi()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn all_ones_modulator_normalizes_to_closed_form() {
        let ones = Array2::from_elem((152, 128), Complex::new(1.0, 0.0));
        let modem = Modem::new(ones, Modem::<f64>::ofdm(128, 24).psi_h().clone()).unwrap().normalized().unwrap();
        let expected = 1.0 / 128f64.sqrt();
        assert!(modem.phi().iter().all(|z| (z.re - expected).abs() < 1e-12 && z.im == 0.0));
    }

    #[test]
    fn zero_matrix_cannot_be_normalized() {
        let ofdm = Modem::<f64>::ofdm(8, 2);
        let zero = Modem::new(Array2::zeros((10, 8)), ofdm.psi_h().clone()).unwrap();
        assert!(matches!(zero.normalized(), Err(Error::Degenerate(_))));
    }

    #[test]
    fn shape_checks() {
        assert!(Modem::<f64>::new(Array2::zeros((10, 8)), Array2::zeros((8, 9))).is_err());
        let modem = Modem::<f64>::ofdm(8, 2);
        assert!(matches!(equivalent_channel(&modem, &eye(9)), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_demodulator_gives_zero_equivalent_channel_and_rates() {
        let ofdm = Modem::<f64>::ofdm(8, 2);
        let modem = Modem::new(ofdm.phi().clone(), Array2::zeros((8, 10))).unwrap();
        let eq = equivalent_channel(&modem, &eye(10)).unwrap();
        assert!(eq.matrix.iter().all(|z| z.norm() == 0.0));
        let rates = subchannel_rates(&eq, &SnrSpec::from_db(20.0));
        assert!(rates.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn flat_channel_rates_and_objective() {
        let modem = Modem::<f64>::ofdm(128, 24);
        let eq = equivalent_channel(&modem, &eye(152)).unwrap();
        let rates = subchannel_rates(&eq, &SnrSpec::from_db(20.0));
        for r in rates.iter() {
            assert!((r - 101f64.log2()).abs() < 1e-9);
            assert!((r - 6.6582).abs() < 1e-4);
        }
        let loss = rate_objective(&eq, &SnrSpec::from_db(20.0));
        assert!((loss + 256.0 * 101f64.log2()).abs() < 1e-6);
        assert!((loss + 1704.5).abs() < 0.05);
    }

    #[test]
    fn more_noise_raises_the_objective() {
        let s = spec(16, 4);
        let h = crate::channel::sample_channel(&s, 3).unwrap().matrix::<f64>();
        let eq = equivalent_channel(&Modem::ofdm(16, 4), &h).unwrap();
        let base = SnrSpec::from_db(15.0);
        let noisier = SnrSpec {
            noise_power: base.noise_power * 2.0,
            ..base
        };
        assert!(rate_objective(&eq, &noisier) > rate_objective(&eq, &base));
        assert!(rate_objective(&eq, &base) <= 0.0);
    }

    #[test]
    fn snr_round_trip() {
        let snr = SnrSpec::from_db(17.5);
        assert!((snr.snr_db() - 17.5).abs() < 1e-12);
        assert_eq!(snr.signal_power, 1.0);
    }
}
