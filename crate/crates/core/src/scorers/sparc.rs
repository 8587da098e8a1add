//! Spectral arc length of the proprio speed profile.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub const SPARC_WINDOW: usize = 50;
pub const MIN_STATES: usize = 8;
const AMP_THRESHOLD: f64 = 0.05;
/// Band edge as a fraction of the Nyquist frequency.
const CUTOFF: f64 = 0.375;

/// Speed magnitudes between consecutive positions.
pub fn speeds(positions: &[[f64; 2]]) -> Vec<f64> {
    positions
        .windows(2)
        .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
        .collect()
}

/// Negated spectral arc length of a speed signal: larger means less smooth.
///
/// The window rarely starts and ends at rest, so the speed is mean-removed
/// and Hann-tapered before the transform; otherwise truncation leakage
/// dominates the spectrum. A constant speed scores 0.
pub fn sparc_of_speed(speed: &[f64]) -> f64 {
    let n = speed.len();
    if n < 2 {
        return 0.0;
    }
    let mean = speed.iter().sum::<f64>() / n as f64;
    let spread = speed.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    if spread <= 1e-9 * mean.abs() + 1e-12 {
        return 0.0;
    }
    let taper = |i: usize| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos();
    let nfft = (4 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = speed.iter().enumerate().map(|(i, &v)| Complex::new((v - mean) * taper(i), 0.0)).collect();
    buf.resize(nfft, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);
    let mag: Vec<f64> = buf.iter().map(|c| c.norm()).collect();
    let peak = mag.iter().copied().fold(0.0, f64::max);
    // bins 0..=kc cover frequencies up to CUTOFF x Nyquist (Nyquist is bin nfft/2)
    let kc = ((CUTOFF * (nfft / 2) as f64).floor() as usize).max(1);
    let band: Vec<f64> = mag[..=kc].iter().map(|m| m / peak).collect();
    let above: Vec<usize> = (0..band.len()).filter(|&k| band[k] >= AMP_THRESHOLD).collect();
    let (lo, hi) = match (above.first(), above.last()) {
        (Some(&lo), Some(&hi)) if hi > lo => (lo, hi),
        _ => return 0.0,
    };
    let span = (hi - lo) as f64;
    let arc: f64 = (lo..hi)
        .map(|k| ((1.0 / span).powi(2) + (band[k + 1] - band[k]).powi(2)).sqrt())
        .sum();
    arc
}

/// Score of a window of positions; fewer than `MIN_STATES` positions score 0.
pub fn score_sparc(positions: &[[f64; 2]]) -> f64 {
    if positions.len() < MIN_STATES {
        return 0.0;
    }
    sparc_of_speed(&speeds(positions))
}
