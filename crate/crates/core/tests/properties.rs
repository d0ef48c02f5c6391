use ndarray::{Array1, Array2};
use num_complex::Complex64;
use proptest::prelude::*;

use modnet_core::channel::{build_channel_matrix, sample_channel, ChannelSpec};
use modnet_core::io;
use modnet_core::link::{demap_symbols, map_symbols, Alphabet};
use modnet_core::modem::{equivalent_channel, rate_objective, subchannel_rates, SnrSpec};
use modnet_core::stats::{wilson_interval, Z95};
use modnet_core::Modem64;

const M: usize = 6;
const MP: usize = 2;

fn small_spec() -> ChannelSpec {
    ChannelSpec {
        num_subcarriers: M,
        prefix_len: MP,
        max_delay_grid: MP,
        num_paths: 3,
        ..ChannelSpec::default()
    }
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<Complex64>> {
    prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), rows * cols).prop_map(move |v| {
        Array2::from_shape_vec((rows, cols), v.into_iter().map(|(re, im)| Complex64::new(re, im)).collect()).unwrap()
    })
}

fn modem() -> impl Strategy<Value = Modem64> {
    (matrix(M + MP, M), matrix(M, M + MP))
        .prop_filter("non-degenerate", |(p, q)| p.iter().any(|z| z.norm() > 1e-3) && q.iter().any(|z| z.norm() > 1e-3))
        .prop_map(|(p, q)| Modem64::new(p, q).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalization_fixes_energies(m in modem()) {
        let n = m.normalized().unwrap();
        let (e_phi, e_psi) = n.energies();
        prop_assert!((e_phi - (M + MP) as f64).abs() < 1e-9);
        prop_assert!((e_psi - M as f64).abs() < 1e-9);
        let again = n.clone().normalized().unwrap();
        prop_assert!((again.phi() - n.phi()).iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn rate_objective_ignores_subcarrier_order(m in modem(), seed in any::<u64>(), shift in 1..M) {
        let h = build_channel_matrix::<f64>(&sample_channel(&small_spec(), seed).unwrap());
        let snr = SnrSpec::from_db(15.0);
        let perm: Vec<usize> = (0..M).map(|k| (k + shift) % M).collect();
        let phi = Array2::from_shape_fn((M + MP, M), |(r, k)| m.phi()[(r, perm[k])]);
        let psi_h = Array2::from_shape_fn((M, M + MP), |(k, r)| m.psi_h()[(perm[k], r)]);
        let permuted = Modem64::new(phi, psi_h).unwrap();
        let a = rate_objective(&equivalent_channel(&m, &h).unwrap(), &snr);
        let b = rate_objective(&equivalent_channel(&permuted, &h).unwrap(), &snr);
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn rates_are_finite_and_nonnegative(m in modem(), seed in any::<u64>(), snr_db in -10.0..40.0f64) {
        let h = build_channel_matrix::<f64>(&sample_channel(&small_spec(), seed).unwrap());
        let rates = subchannel_rates(&equivalent_channel(&m, &h).unwrap(), &SnrSpec::from_db(snr_db));
        prop_assert!(rates.iter().all(|r| r.is_finite() && *r >= 0.0));
    }

    #[test]
    fn channel_matrix_is_lower_banded(seed in any::<u64>()) {
        let h = build_channel_matrix::<f64>(&sample_channel(&small_spec(), seed).unwrap());
        for ((r, c), z) in h.indexed_iter() {
            if c > r || r - c > MP {
                prop_assert_eq!(*z, Complex64::new(0.0, 0.0));
            }
        }
    }

    #[test]
    fn symbol_mapping_round_trips(bits in prop::collection::vec(any::<bool>(), 4 * M), qam in any::<bool>()) {
        let alphabet = if qam { Alphabet::Qam16 } else { Alphabet::Qpsk };
        let bits = &bits[..M * alphabet.bits_per_symbol()];
        let symbols = map_symbols(bits, alphabet).unwrap();
        prop_assert_eq!(demap_symbols(&symbols, alphabet), bits.to_vec());
        let noisy: Array1<Complex64> = symbols.mapv(|z| z * 1.1 + Complex64::new(0.02, -0.02));
        prop_assert_eq!(demap_symbols(&noisy, alphabet), bits.to_vec());
    }

    #[test]
    fn wilson_interval_contains_estimate(trials in 1u64..1_000_000, frac in 0.0..=1.0f64) {
        let errors = (frac * trials as f64) as u64;
        let (lo, hi) = wilson_interval(errors, trials, Z95);
        let p = errors as f64 / trials as f64;
        prop_assert!(0.0 <= lo && lo <= p + 1e-12 && p <= hi + 1e-12 && hi <= 1.0);
    }

    #[test]
    fn modem_files_round_trip(m in modem()) {
        let m = m.normalized().unwrap();
        let bytes = io::encode_modem(&m, None).unwrap();
        let (back, prov) = io::decode_modem(&bytes).unwrap();
        prop_assert!(prov.is_none());
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(io::encode_modem(&back, None).unwrap(), bytes);
    }
}
