//! Exact results for the square-lattice Ising model in zero field.
//!
//! Elliptic integrals use the modulus convention: `K(k) = ∫ dθ / √(1 − k² sin²θ)`
//! over `[0, π/2]`, not the parameter `m = k²`.
//!
//! Anisotropic quantities take the dimensionless couplings `K = βJ`
//! (horizontal) and `L = βJ'` (vertical) together with the temperature in
//! units where `k_B = 1`.

use crate::error::{Error, Result};
use crate::quadrature;
use crate::scalar::Scalar;

const AGM_MAX_ITER: usize = 64;

/// Arithmetic–geometric mean of two non-negative numbers.
pub fn agm<T: Scalar>(mut a: T, mut b: T) -> T {
    let tol = T::epsilon() * T::lit(4.0);
    for _ in 0..AGM_MAX_ITER {
        if (a - b).abs() <= tol * a {
            break;
        }
        let next = T::lit(0.5) * (a + b);
        b = (a * b).sqrt();
        a = next;
    }
    T::lit(0.5) * (a + b)
}

/// Complete elliptic integral of the first kind for modulus `0 <= k < 1`.
pub fn elliptic_k<T: Scalar>(k: T) -> Result<T> {
    if !(k >= T::zero()) || k >= T::one() {
        return Err(Error::Domain(format!(
            "elliptic modulus must satisfy 0 <= k < 1, got {k}"
        )));
    }
    elliptic_k_complementary(((T::one() - k) * (T::one() + k)).sqrt())
}

/// `K` expressed through the complementary modulus `k' = √(1 − k²)`.
///
/// Keeps full relative accuracy when `k` is within rounding of 1.
pub fn elliptic_k_complementary<T: Scalar>(kp: T) -> Result<T> {
    if !(kp > T::zero()) || kp > T::one() {
        return Err(Error::Domain(format!(
            "complementary modulus must satisfy 0 < k' <= 1, got {kp}"
        )));
    }
    Ok(T::FRAC_PI_2() / agm(T::one(), kp))
}

/// Inverse critical temperature `ln(1 + √2) / (2J)`.
pub fn critical_beta<T: Scalar>(j: T) -> Result<T> {
    if !(j > T::zero()) {
        return Err(Error::Domain(format!("coupling must be positive, got {j}")));
    }
    Ok((T::one() + T::SQRT_2()).ln() / (T::lit(2.0) * j))
}

/// Exact internal energy per site of the isotropic model,
/// `u = −J coth(2βJ) [1 + (2/π)(2 tanh²(2βJ) − 1) K(k)]`,
/// `k = 2 sinh(2βJ) / cosh²(2βJ)`.
///
/// At the critical point the product `(2 tanh² − 1) K(k)` is `0 · ∞`; the
/// value there is the average of evaluations at `β_c (1 ± 10⁻⁹)`.
pub fn internal_energy_exact<T: Scalar>(beta: T, j: T) -> Result<T> {
    if !(beta > T::zero()) {
        return Err(Error::Domain(format!("inverse temperature must be > 0, got {beta}")));
    }
    let bc = critical_beta(j)?;
    if (beta - bc).abs() <= T::lit(1e-12) * bc {
        let d = T::lit(1e-9);
        let lo = reduced_energy((bc * (T::one() - d)) * j)?;
        let hi = reduced_energy((bc * (T::one() + d)) * j)?;
        return Ok(j * T::lit(0.5) * (lo + hi));
    }
    Ok(j * reduced_energy(beta * j)?)
}

/// Energy per site in units of `J` at reduced coupling `x = βJ`.
fn reduced_energy<T: Scalar>(x: T) -> Result<T> {
    let two = T::lit(2.0);
    let s = (two * x).sinh();
    let c = (two * x).cosh();
    let c2 = c * c;
    // 2 tanh² − 1 = (s² − 1)/c² and √(1 − k²) = |1 − s²|/c²
    let s2m1 = s * s - T::one();
    let kp = s2m1.abs() / c2;
    let elliptic = if kp > T::zero() {
        elliptic_k_complementary(kp.min(T::one()))?
    } else {
        return Err(Error::Domain("elliptic integral diverges at the critical point".into()));
    };
    let bracket = T::one() + (two / T::PI()) * (s2m1 / c2) * elliptic;
    Ok(-(c / s) * bracket)
}

/// Horizontal and vertical reduced couplings `K = βJ`, `L = βJ'`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnisotropicCouplings<T> {
    pub big_k: T,
    pub big_l: T,
}

impl<T: Scalar> AnisotropicCouplings<T> {
    pub fn new(big_k: T, big_l: T) -> Result<Self> {
        if !(big_k > T::zero() && big_l > T::zero()) {
            return Err(Error::Domain(format!(
                "couplings must be positive, got K = {big_k}, L = {big_l}"
            )));
        }
        Ok(Self { big_k, big_l })
    }

    pub fn isotropic(k: T) -> Result<Self> {
        Self::new(k, k)
    }

    /// `k = (sinh 2K sinh 2L)⁻¹`.
    pub fn modulus(&self) -> T {
        let two = T::lit(2.0);
        T::one() / ((two * self.big_k).sinh() * (two * self.big_l).sinh())
    }

    /// `cosh 2K cosh 2L`.
    pub fn cosh_product(&self) -> T {
        let two = T::lit(2.0);
        (two * self.big_k).cosh() * (two * self.big_l).cosh()
    }

    /// `ln[2(cosh 2K cosh 2L + k⁻¹ (1 + k² − 2k cos 2θ)^{1/2})]`.
    ///
    /// The radicand is evaluated as `(1 − k)² + 4k sin²θ`, which stays
    /// accurate near `k = 1, θ = 0`.
    pub fn log_eigen_factor(&self, theta: T) -> T {
        let k = self.modulus();
        let one = T::one();
        let sin = theta.sin();
        let radicand = (one - k) * (one - k) + T::lit(4.0) * k * sin * sin;
        (T::lit(2.0) * (self.cosh_product() + radicand.sqrt() / k)).ln()
    }
}

/// Free energy per site from the thermodynamic-limit integral
/// `f = −(T / 2π) ∫₀^π F(θ) dθ`.
pub fn free_energy_integral<T: Scalar>(c: &AnisotropicCouplings<T>, temperature: T) -> Result<T> {
    let abs_tol = T::lit(1e-10).max(T::epsilon() * T::lit(64.0));
    let integral = quadrature::integrate(
        |theta| c.log_eigen_factor(theta),
        T::zero(),
        T::PI(),
        abs_tol,
        T::epsilon() * T::lit(16.0),
        4096,
    )?;
    Ok(-temperature / (T::lit(2.0) * T::PI()) * integral)
}

/// Characteristic angles `θ_j = π (j − ½) / (2p)`, `j = 1..=2p`.
pub fn characteristic_angles<T: Scalar>(p: usize) -> Vec<T> {
    let denom = T::lit(2.0) * T::from_usize(p).unwrap();
    (1..=2 * p)
        .map(|j| T::PI() * (T::from_usize(j).unwrap() - T::lit(0.5)) / denom)
        .collect()
}

/// `c_j = k⁻¹ (1 + k² − 2k cos 2θ_j)^{1/2}` for each characteristic angle.
pub fn auxiliary_coefficients<T: Scalar>(c: &AnisotropicCouplings<T>, p: usize) -> Vec<T> {
    let k = c.modulus();
    characteristic_angles::<T>(p)
        .into_iter()
        .map(|theta| {
            let sin = theta.sin();
            ((T::one() - k) * (T::one() - k) + T::lit(4.0) * k * sin * sin).sqrt() / k
        })
        .collect()
}

/// `ln Λ_max = ½ Σ_j ln[2(cosh 2K cosh 2L + c_j)]` for `2p` columns.
pub fn log_max_eigenvalue<T: Scalar>(c: &AnisotropicCouplings<T>, p: usize) -> T {
    let cp = c.cosh_product();
    let sum: T = auxiliary_coefficients(c, p)
        .into_iter()
        .map(|cj| (T::lit(2.0) * (cp + cj)).ln())
        .sum();
    T::lit(0.5) * sum
}

/// Free energy per site from the largest transfer-matrix eigenvalue of a
/// strip `2p` sites wide: `f = −(T / 2p) ln Λ_max`.
pub fn free_energy_finite<T: Scalar>(c: &AnisotropicCouplings<T>, temperature: T, p: usize) -> Result<T> {
    if p == 0 {
        return Err(Error::Domain("half-row count p must be >= 1".into()));
    }
    let width = T::lit(2.0) * T::from_usize(p).unwrap();
    Ok(-temperature / width * log_max_eigenvalue(c, p))
}

/// Closed-form singular part of the free energy,
/// `f_s = −T (1+k)(1−k) / (4π k cosh 2K cosh 2L) · ln((1+k)/(1−k))`.
///
/// Returns 0 on the critical manifold `k = 1`. For `k > 1` the logarithm
/// is taken of the absolute ratio.
pub fn singular_free_energy<T: Scalar>(c: &AnisotropicCouplings<T>, temperature: T) -> Result<T> {
    singular_free_energy_at(c.modulus(), c.cosh_product(), temperature)
}

/// [`singular_free_energy`] with `k` and `cosh 2K cosh 2L` supplied directly.
pub fn singular_free_energy_at<T: Scalar>(k: T, cosh_product: T, temperature: T) -> Result<T> {
    if !(k > T::zero()) {
        return Err(Error::Domain(format!("modulus must be positive, got {k}")));
    }
    if k == T::one() {
        return Ok(T::zero());
    }
    let one = T::one();
    let log = ((one + k) / (one - k)).abs().ln();
    Ok(-temperature * (one + k) * (one - k) / (T::lit(4.0) * T::PI() * k * cosh_product) * log)
}
