//! Differential-entropy feature pipeline.
//!
//! Raw multichannel time series -> per-second Hann-tapered DFT band
//! energies -> log energies -> LDS (Kalman + RTS) smoothing -> fixed-length
//! sequence windows.

use crate::error::{Error, Result};
use rustfft::{num_complex::Complex, FftPlanner};

/// Floor applied inside the logarithm of the differential entropy.
pub const DE_ENERGY_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct BandSpec {
    pub name: String,
    pub lo_hz: f64,
    pub hi_hz: f64,
}

impl BandSpec {
    pub fn new(name: &str, lo_hz: f64, hi_hz: f64) -> Result<Self> {
        if !(lo_hz > 0.0 && lo_hz <= hi_hz) {
            return Err(Error::invalid(format!(
                "band {name}: need 0 < lo <= hi, got [{lo_hz}, {hi_hz}]"
            )));
        }
        Ok(BandSpec { name: name.to_string(), lo_hz, hi_hz })
    }
}

/// The five standard EEG bands: delta 1-3, theta 4-7, alpha 8-13,
/// beta 14-30, gamma 31-50 Hz.
pub fn default_bands() -> Vec<BandSpec> {
    vec![
        BandSpec::new("delta", 1.0, 3.0).unwrap(),
        BandSpec::new("theta", 4.0, 7.0).unwrap(),
        BandSpec::new("alpha", 8.0, 13.0).unwrap(),
        BandSpec::new("beta", 14.0, 30.0).unwrap(),
        BandSpec::new("gamma", 31.0, 50.0).unwrap(),
    ]
}

#[derive(Clone, Debug)]
pub struct FeatureFrame {
    /// channels x bands differential-entropy values, flattened row-major.
    pub values: Vec<f64>,
    pub timestamp_s: f64,
}

/// Periodic Hann window of length n: w[k] = 0.5 (1 - cos(2 pi k / n)).
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos()))
        .collect()
}

/// Per-channel, per-band spectral energy of one 1-second window.
///
/// The window is Hann-tapered, transformed with a length-fs DFT, and the
/// one-sided energies 2|X[k]|^2 / N are summed over bins whose frequency
/// lies in [lo, hi] (inclusive both ends).
pub fn stft_band_energy(
    window: &[Vec<f64>],
    fs: usize,
    bands: &[BandSpec],
) -> Result<Vec<Vec<f64>>> {
    let max_hi = bands.iter().map(|b| b.hi_hz).fold(0.0, f64::max);
    if (fs as f64) < 2.0 * max_hi {
        return Err(Error::invalid(format!(
            "sampling rate {fs} Hz too low for bands up to {max_hi} Hz"
        )));
    }
    let taper = hann_periodic(fs);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fs);
    let mut out = Vec::with_capacity(window.len());
    for (ch, samples) in window.iter().enumerate() {
        if samples.len() != fs {
            return Err(Error::invalid(format!(
                "channel {ch}: window length {} != fs {fs}",
                samples.len()
            )));
        }
        let mut buf: Vec<Complex<f64>> = samples
            .iter()
            .zip(taper.iter())
            .map(|(&x, &w)| Complex::new(x * w, 0.0))
            .collect();
        fft.process(&mut buf);
        let mut energies = Vec::with_capacity(bands.len());
        for band in bands {
            let lo = band.lo_hz.ceil() as usize;
            let hi = band.hi_hz.floor() as usize;
            let mut e = 0.0;
            for k in lo..=hi.min(fs / 2) {
                // bin k is exactly k Hz for a 1-second window; the Nyquist
                // bin has no mirror and gets no doubling
                let fold = if 2 * k == fs { 1.0 } else { 2.0 };
                e += fold * buf[k].norm_sqr() / fs as f64;
            }
            energies.push(e);
        }
        out.push(energies);
    }
    Ok(out)
}

/// Total one-sided spectral energy of a tapered window; used by the
/// Parseval consistency check.
pub fn total_spectral_energy(samples: &[f64], fs: usize) -> f64 {
    let taper = hann_periodic(fs);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fs);
    let mut buf: Vec<Complex<f64>> = samples
        .iter()
        .zip(taper.iter())
        .map(|(&x, &w)| Complex::new(x * w, 0.0))
        .collect();
    fft.process(&mut buf);
    buf.iter().map(|c| c.norm_sqr()).sum::<f64>() / fs as f64
}

/// Differential entropy of a band: ln(max(energy, 1e-12)).
pub fn differential_entropy(energy: f64) -> Result<f64> {
    if energy < 0.0 {
        return Err(Error::invalid(format!("negative band energy {energy}")));
    }
    Ok(energy.max(DE_ENERGY_FLOOR).ln())
}

#[derive(Clone, Copy, Debug)]
pub struct LdsParams {
    pub transition: f64,
    pub observation: f64,
    pub process_var: f64,
    pub obs_var: f64,
}

impl Default for LdsParams {
    fn default() -> Self {
        LdsParams { transition: 1.0, observation: 1.0, process_var: 1e-4, obs_var: 1e-2 }
    }
}

/// Scalar Kalman filter + RTS smoother on x_t = a x_{t-1} + w,
/// y_t = c x_t + v. The state is initialized at the first observation
/// with variance r.
pub fn lds_smooth(series: &[f64], params: &LdsParams) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::invalid("empty series"));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in series"));
    }
    let (a, c) = (params.transition, params.observation);
    let (q, r) = (params.process_var, params.obs_var);
    if q <= 0.0 || r <= 0.0 {
        return Err(Error::invalid("process and observation variances must be positive"));
    }
    let n = series.len();
    let mut x_filt = vec![0.0; n];
    let mut p_filt = vec![0.0; n];
    let mut x_pred = vec![0.0; n];
    let mut p_pred = vec![0.0; n];
    x_filt[0] = series[0] / c;
    p_filt[0] = r;
    x_pred[0] = x_filt[0];
    p_pred[0] = p_filt[0];
    for t in 1..n {
        x_pred[t] = a * x_filt[t - 1];
        p_pred[t] = a * a * p_filt[t - 1] + q;
        let k = p_pred[t] * c / (c * c * p_pred[t] + r);
        x_filt[t] = x_pred[t] + k * (series[t] - c * x_pred[t]);
        p_filt[t] = (1.0 - k * c) * p_pred[t];
    }
    let mut x_smooth = x_filt.clone();
    for t in (0..n - 1).rev() {
        let g = p_filt[t] * a / p_pred[t + 1];
        x_smooth[t] = x_filt[t] + g * (x_smooth[t + 1] - x_pred[t + 1]);
    }
    Ok(x_smooth.iter().map(|&x| c * x).collect())
}

/// Smooths every feature dimension of a frame sequence independently.
pub fn lds_smooth_frames(frames: &mut [FeatureFrame], params: &LdsParams) -> Result<()> {
    if frames.is_empty() {
        return Ok(());
    }
    let dim = frames[0].values.len();
    for d in 0..dim {
        let series: Vec<f64> = frames.iter().map(|f| f.values[d]).collect();
        let smoothed = lds_smooth(&series, params)?;
        for (f, v) in frames.iter_mut().zip(smoothed) {
            f.values[d] = v;
        }
    }
    Ok(())
}

/// Slices a frame sequence into overlapping windows of `step` frames,
/// advancing by `stride`. N < step yields an empty list. Window k, row j
/// is frame k*stride + j, copied bit-for-bit.
pub fn make_sequences(
    frames: &[FeatureFrame],
    step: usize,
    stride: usize,
) -> Result<Vec<Vec<f64>>> {
    if step < 1 {
        return Err(Error::invalid("step must be >= 1"));
    }
    if stride < 1 || stride > step {
        return Err(Error::invalid(format!("stride must be in [1, step], got {stride}")));
    }
    let n = frames.len();
    if n < step {
        return Ok(Vec::new());
    }
    let count = (n - step) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut window = Vec::new();
        for j in 0..step {
            window.extend_from_slice(&frames[k * stride + j].values);
        }
        out.push(window);
    }
    Ok(out)
}

/// Full pipeline for one recording: raw channels-major samples to windowed
/// differential-entropy sequences. `raw[ch][t]` is sample t of channel ch.
pub fn extract_features(
    raw: &[Vec<f64>],
    fs: usize,
    bands: &[BandSpec],
    lds: &LdsParams,
    step: usize,
    stride: usize,
) -> Result<Vec<Vec<f64>>> {
    if raw.is_empty() {
        return Err(Error::invalid("no channels"));
    }
    let n_samples = raw[0].len();
    let n_seconds = n_samples / fs;
    let mut frames = Vec::with_capacity(n_seconds);
    for s in 0..n_seconds {
        let window: Vec<Vec<f64>> = raw
            .iter()
            .map(|ch| ch[s * fs..(s + 1) * fs].to_vec())
            .collect();
        let energies = stft_band_energy(&window, fs, bands)?;
        let mut values = Vec::with_capacity(raw.len() * bands.len());
        for ch in &energies {
            for &e in ch {
                values.push(differential_entropy(e)?);
            }
        }
        frames.push(FeatureFrame { values, timestamp_s: s as f64 });
    }
    lds_smooth_frames(&mut frames, lds)?;
    make_sequences(&frames, step, stride)
}
