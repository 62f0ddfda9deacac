//! Slow, obviously-correct reference implementations used as test oracles.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Frequency of the largest spectral peak of `x`, in Hz.
///
/// The signal is Hann-windowed and zero-padded to at least 16 times its
/// length; the peak bin is refined by a parabola through the log magnitudes
/// of its neighbours.
pub fn peak_frequency(x: &[f64], sample_rate: f64) -> f64 {
    let n = x.len();
    assert!(n >= 4, "signal too short for a spectrum");
    let size = (16 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos();
            Complex::new(v * w, 0.0)
        })
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    FftPlanner::new().plan_fft_forward(size).process(&mut buf);
    let mag: Vec<f64> = buf[..size / 2].iter().map(|c| c.norm().max(1e-300).ln()).collect();
    let k = (1..mag.len() - 1).max_by(|&a, &b| mag[a].total_cmp(&mag[b])).unwrap();
    let (a, b, c) = (mag[k - 1], mag[k], mag[k + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom != 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
    (k as f64 + shift) * sample_rate / size as f64
}

/// Miss and false-alarm rates at one threshold, counted directly.
pub fn rates_at(scores: &[f64], labels: &[bool], threshold: f64) -> (f64, f64) {
    let (mut tar, mut miss, mut non, mut fa) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        if l {
            tar += 1;
            if s < threshold {
                miss += 1;
            }
        } else {
            non += 1;
            if s >= threshold {
                fa += 1;
            }
        }
    }
    (miss as f64 / tar as f64, fa as f64 / non as f64)
}

/// Every distinct score plus `+inf`, ascending.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut t = scores.to_vec();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t.push(f64::INFINITY);
    t
}

/// Exhaustive-sweep EER: the crossing of `P_miss` and `P_fa`, linearly
/// interpolated between the two thresholds that bracket it.
pub fn sweep_eer(scores: &[f64], labels: &[bool]) -> f64 {
    let pts: Vec<(f64, f64)> = candidate_thresholds(scores).iter().map(|&t| rates_at(scores, labels, t)).collect();
    for i in 0..pts.len() {
        let (pm, pf) = pts[i];
        if pm >= pf {
            if pm == pf || i == 0 {
                return pm;
            }
            let (pm0, pf0) = pts[i - 1];
            let (dm, df) = (pm - pm0, pf - pf0);
            return pm0 + (pf0 - pm0) / (dm - df) * dm;
        }
    }
    unreachable!("P_miss reaches 1 at +inf")
}

/// Exhaustive-sweep minimum of the normalized detection cost with unit costs.
pub fn sweep_min_dcf(scores: &[f64], labels: &[bool], p_target: f64) -> f64 {
    let norm = p_target.min(1.0 - p_target);
    candidate_thresholds(scores)
        .iter()
        .map(|&t| {
            let (pm, pf) = rates_at(scores, labels, t);
            (p_target * pm + (1.0 - p_target) * pf) / norm
        })
        .fold(f64::INFINITY, f64::min)
}

/// Mean power of a signal.
pub fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_of_a_pure_tone() {
        let x: Vec<f64> = (0..4000).map(|i| (2.0 * std::f64::consts::PI * 437.0 * i as f64 / 16000.0).sin()).collect();
        assert!((peak_frequency(&x, 16000.0) - 437.0).abs() < 0.2);
    }

    #[test]
    fn sweep_examples() {
        assert_eq!(sweep_eer(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]), 0.0);
        assert_eq!(sweep_eer(&[0.1, 0.9], &[true, false]), 1.0);
        assert_eq!(sweep_eer(&[0.8, 0.4, 0.6, 0.2], &[true, true, false, false]), 0.5);
        assert_eq!(sweep_min_dcf(&[0.5, 0.5], &[true, false], 0.05), 1.0);
    }
}
