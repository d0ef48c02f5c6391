//! Training objectives and their gradients with respect to the modem entries.
//!
//! Gradients of a real loss `L` with respect to a complex entry `z` are
//! returned as `∂L/∂Re z + j ∂L/∂Im z`. With that convention the gradient of
//! `|z|²` is `2z`, and for a product `C = A B` the gradients pull back as
//! `G_A = G_C Bᴴ` and `G_B = Aᴴ G_C`.

use ndarray::{Array1, Array2, Zip};
use num_complex::Complex;

use crate::modem::{frobenius_sqr, objective_from_rates, rate_from_powers, Modem};
use crate::scalar::Scalar;

/// Rate objective value plus gradients for a single channel.
#[derive(Clone, Debug)]
pub struct RateGrad<T> {
    pub loss: T,
    pub rates: Array1<T>,
    pub grad_phi: Array2<Complex<T>>,
    pub grad_psi_h: Array2<Complex<T>>,
}

fn herm<T: Scalar>(a: &Array2<Complex<T>>) -> Array2<Complex<T>> {
    a.t().mapv(|z| z.conj())
}

/// Index of the smallest rate; ties go to the lowest index.
pub fn argmin_rate<T: Scalar>(rates: &Array1<T>) -> usize {
    let mut best = 0;
    for (i, &r) in rates.iter().enumerate() {
        if r < rates[best] {
            best = i;
        }
    }
    best
}

/// `-[Σ_m r_m + M min_m r_m]` evaluated on `Ψᴴ H Φ` with its gradient.
///
/// The `min` term routes its gradient to the lowest-index minimizer only.
pub fn rate_objective_grad<T: Scalar>(modem: &Modem<T>, h: &Array2<Complex<T>>, noise_ratio: T) -> RateGrad<T> {
    let phi = modem.phi();
    let psi_h = modem.psi_h();
    let m = modem.num_subcarriers();
    let a = psi_h.dot(h);
    let he = a.dot(phi);
    let row_energy = modem.demod_row_energy();

    let ln2 = T::LN_2();
    let mut rates = Array1::<T>::zeros(m);
    // d r_m / d|H_e(m,n)|² on and off the diagonal, and d r_m / d noise_m
    let mut d_diag = Array1::<T>::zeros(m);
    let mut d_off = Array1::<T>::zeros(m);
    let mut d_noise = Array1::<T>::zeros(m);
    for (i, row) in he.rows().into_iter().enumerate() {
        let total: T = row.iter().map(|z| z.norm_sqr()).sum();
        let signal = row[i].norm_sqr();
        let interference = total - signal;
        let noise = noise_ratio * row_energy[i];
        rates[i] = rate_from_powers(signal, interference, noise);
        let denom = interference.max(T::zero()) + noise;
        if denom > T::zero() {
            let dp = T::one() / ((total + noise) * ln2);
            let di = -T::one() / (denom * ln2);
            d_diag[i] = dp;
            d_off[i] = dp + di;
            d_noise[i] = dp + di;
        }
    }
    let loss = objective_from_rates(&rates);
    let worst = argmin_rate(&rates);
    let weight = |i: usize| -> T {
        if i == worst {
            -(T::one() + T::count(m))
        } else {
            -T::one()
        }
    };

    let two = T::lit(2.0);
    let mut g_he = Array2::<Complex<T>>::zeros((m, m));
    for ((i, j), g) in g_he.indexed_iter_mut() {
        let coef = if i == j { d_diag[i] } else { d_off[i] };
        *g = he[(i, j)] * (two * weight(i) * coef);
    }
    let grad_phi = herm(&a).dot(&g_he);
    let g_a = g_he.dot(&herm(phi));
    let mut grad_psi_h = g_a.dot(&herm(h));
    for (i, mut row) in grad_psi_h.rows_mut().into_iter().enumerate() {
        let c = two * weight(i) * noise_ratio * d_noise[i];
        Zip::from(&mut row).and(psi_h.row(i)).for_each(|g, &p| *g += p * c);
    }

    RateGrad {
        loss,
        rates,
        grad_phi,
        grad_psi_h,
    }
}

/// `‖Φ₁ − Φ₂‖_F² + ‖Ψ₁ᴴ − Ψ₂ᴴ‖_F²`.
pub fn modem_distance<T: Scalar>(a: &Modem<T>, b: &Modem<T>) -> T {
    frobenius_sqr(&(a.phi() - b.phi())) + frobenius_sqr(&(a.psi_h() - b.psi_h()))
}

/// Value and gradients of the siamese objective for one channel pair.
#[derive(Clone, Debug)]
pub struct PairGrad<T> {
    pub loss: T,
    /// Mean of the two branches' rate objectives.
    pub rate_term: T,
    pub distance_term: T,
    /// `(∂/∂Φ, ∂/∂Ψᴴ)` for each branch.
    pub grads: [(Array2<Complex<T>>, Array2<Complex<T>>); 2],
}

/// `α · ½(loss₁(branch 1) + loss₁(branch 2)) + (1 − α) · distance`.
pub fn siamese_objective_grad<T: Scalar>(
    first: (&Modem<T>, &Array2<Complex<T>>),
    second: (&Modem<T>, &Array2<Complex<T>>),
    noise_ratio: T,
    alpha: T,
) -> PairGrad<T> {
    let g1 = rate_objective_grad(first.0, first.1, noise_ratio);
    let g2 = rate_objective_grad(second.0, second.1, noise_ratio);
    let half = T::lit(0.5);
    let rate_term = half * (g1.loss + g2.loss);
    let distance_term = modem_distance(first.0, second.0);
    let beta = T::one() - alpha;
    let d_phi = (first.0.phi() - second.0.phi()).mapv(|z| z * (T::lit(2.0) * beta));
    let d_psi = (first.0.psi_h() - second.0.psi_h()).mapv(|z| z * (T::lit(2.0) * beta));
    let w = alpha * half;
    let branch = |g: RateGrad<T>, sign: T| {
        (
            &g.grad_phi.mapv(|z| z * w) + &d_phi.mapv(|z| z * sign),
            &g.grad_psi_h.mapv(|z| z * w) + &d_psi.mapv(|z| z * sign),
        )
    };
    PairGrad {
        loss: alpha * rate_term + beta * distance_term,
        rate_term,
        distance_term,
        grads: [branch(g1, T::one()), branch(g2, -T::one())],
    }
}
