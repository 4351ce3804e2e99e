//! Margin-based selection of preference pairs for iterative direct
//! preference learning.
//!
//! The crate has two faces. The selection core ([`margin`], [`select`]) ranks
//! unordered response pairs by their implicit reward margin and picks which
//! ones to send for annotation, either in-process or from log-probability dump
//! files written by an external training stack ([`dump`]). Around it sits an
//! exact desk-scale simulator: a synthetic [`world`] with a gold oracle,
//! softmax [`policy`] tables, DPO/IPO/SLiC training ([`dpo`]), the
//! multi-iteration annotate-select-train loop ([`experiment`]) and its
//! diagnostics ([`metrics`]).

pub mod cli;
pub mod dpo;
pub mod dump;
pub mod error;
pub mod experiment;
pub mod margin;
pub mod metrics;
pub mod plan;
pub mod policy;
pub mod report;
pub mod rng;
pub mod select;
pub mod stats;
pub mod world;

pub use error::{Error, Result};

/// Logistic function, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Formats a real in scientific notation with 17 significant digits, which
/// round-trips every finite `f64` exactly.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reals_round_trip() {
        for x in [0.1, -2.0 / 3.0, 1e-300, 123456789.12345679, f64::MIN_POSITIVE] {
            assert_eq!(fmt_real(x).parse::<f64>().unwrap(), x);
        }
    }
}
