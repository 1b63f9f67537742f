//! Black-Scholes closed forms for the complete-market special case.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::scalar::Real;

fn std_normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

fn d1_d2(s: f64, k: f64, r: f64, sigma: f64, tau: f64) -> (f64, f64) {
    let sd = sigma * tau.sqrt();
    let d1 = ((s / k).ln() + (r + 0.5 * sigma * sigma) * tau) / sd;
    (d1, d1 - sd)
}

/// Call price `S N(d₁) - K e^{-rτ} N(d₂)`.
pub fn call_price<T: Real>(s: T, k: T, r: T, sigma: T, tau: T) -> T {
    let (s, k, r, sigma, tau) = (s.as_f64(), k.as_f64(), r.as_f64(), sigma.as_f64(), tau.as_f64());
    if tau <= 0.0 {
        return T::lit((s - k).max(0.0));
    }
    let (d1, d2) = d1_d2(s, k, r, sigma, tau);
    T::lit(s * std_normal_cdf(d1) - k * (-r * tau).exp() * std_normal_cdf(d2))
}

/// Put price by parity.
pub fn put_price<T: Real>(s: T, k: T, r: T, sigma: T, tau: T) -> T {
    call_price(s, k, r, sigma, tau) - s + k * (-r * tau).exp()
}

/// `∂C/∂S = N(d₁)`.
pub fn call_delta<T: Real>(s: T, k: T, r: T, sigma: T, tau: T) -> T {
    let (s, k, r, sigma, tau) = (s.as_f64(), k.as_f64(), r.as_f64(), sigma.as_f64(), tau.as_f64());
    if tau <= 0.0 {
        return T::lit(if s > k { 1.0 } else { 0.0 });
    }
    T::lit(std_normal_cdf(d1_d2(s, k, r, sigma, tau).0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_value() {
        // S = K = 100, r = 5%, σ = 20%, one year
        let c: f64 = call_price(100.0, 100.0, 0.05, 0.2, 1.0);
        assert!((c - 10.450_583_572_185_565).abs() < 1e-9);
        let d: f64 = call_delta(100.0, 100.0, 0.05, 0.2, 1.0);
        assert!((d - 0.636_830_651_175_619).abs() < 1e-9);
    }

    #[test]
    fn parity_and_expiry() {
        let p: f64 = put_price(90.0, 100.0, 0.03, 0.25, 0.5);
        let c: f64 = call_price(90.0, 100.0, 0.03, 0.25, 0.5);
        assert!((c - p - 90.0 + 100.0 * (-0.015f64).exp()).abs() < 1e-12);
        assert_eq!(call_price(120.0, 100.0, 0.0, 0.2, 0.0), 20.0);
    }
}
