//! RSSI trace conditioning and frame pairing.
//!
//! Stages run in a fixed order: gap interpolation, MAD outlier removal,
//! Gaussian smoothing, then block-average downsampling to the camera rate.
//! Each stage appends a [`Stage`] tag to the trace it returns.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Interpolated,
    OutliersRemoved,
    Smoothed,
    Downsampled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RssiTrace {
    pub timestamps_us: Vec<i64>,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    pub nominal_rate_hz: f64,
    /// Stages applied so far, oldest first.
    pub stages: Vec<Stage>,
}

impl RssiTrace {
    pub fn new(timestamps_us: Vec<i64>, values: Vec<f64>, valid: Vec<bool>, nominal_rate_hz: f64) -> Result<Self> {
        if timestamps_us.len() != values.len() || values.len() != valid.len() {
            return Err(Error::Data(format!(
                "trace columns differ in length: {} / {} / {}",
                timestamps_us.len(),
                values.len(),
                valid.len()
            )));
        }
        if let Some(i) = timestamps_us.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Data(format!(
                "timestamps not strictly increasing at sample {}",
                i + 1
            )));
        }
        if !(nominal_rate_hz > 0.0) {
            return Err(Error::Data(format!("nominal rate must be positive, got {nominal_rate_hz}")));
        }
        Ok(Self {
            timestamps_us,
            values,
            valid,
            nominal_rate_hz,
            stages: Vec::new(),
        })
    }

    /// Every sample valid.
    pub fn from_values(timestamps_us: Vec<i64>, values: Vec<f64>, nominal_rate_hz: f64) -> Result<Self> {
        let valid = vec![true; values.len()];
        Self::new(timestamps_us, values, valid, nominal_rate_hz)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    fn with_values(&self, values: Vec<f64>, valid: Vec<bool>, stage: Stage) -> Self {
        let mut stages = self.stages.clone();
        stages.push(stage);
        Self {
            timestamps_us: self.timestamps_us.clone(),
            values,
            valid,
            nominal_rate_hz: self.nominal_rate_hz,
            stages,
        }
    }
}

/// Fill invalid samples by linear interpolation in time between the nearest
/// valid neighbours; samples outside the valid span hold the boundary value.
pub fn interpolate_missing(trace: &RssiTrace) -> Result<RssiTrace> {
    let valid_idx: Vec<usize> = (0..trace.len()).filter(|&i| trace.valid[i]).collect();
    let (Some(&first), Some(&last)) = (valid_idx.first(), valid_idx.last()) else {
        return Err(Error::Data("trace has no valid samples".into()));
    };
    let ts = &trace.timestamps_us;
    let mut values = trace.values.clone();
    let mut next = 0usize;
    for i in 0..trace.len() {
        if trace.valid[i] {
            next += 1;
            continue;
        }
        values[i] = if i < first {
            trace.values[first]
        } else if i > last {
            trace.values[last]
        } else {
            let (lo, hi) = (valid_idx[next - 1], valid_idx[next]);
            let frac = (ts[i] - ts[lo]) as f64 / (ts[hi] - ts[lo]) as f64;
            trace.values[lo] + frac * (trace.values[hi] - trace.values[lo])
        };
    }
    Ok(trace.with_values(values, vec![true; trace.len()], Stage::Interpolated))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MadConfig {
    /// Centered window length in samples, truncated at the edges.
    pub window: usize,
    pub threshold: f64,
    /// Lower bound on the MAD, in dB. Integer-valued RSSI often has MAD 0.
    pub floor_db: f64,
}

impl Default for MadConfig {
    fn default() -> Self {
        Self {
            window: 40,
            threshold: 5.0,
            floor_db: 0.25,
        }
    }
}

fn median_in_place(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Indices whose deviation from the local median exceeds
/// `threshold · max(MAD, floor)`. Invalid samples are ignored.
pub fn detect_outliers_mad(trace: &RssiTrace, cfg: &MadConfig) -> Result<Vec<usize>> {
    if cfg.window < 3 {
        return Err(Error::Param(format!("MAD window must be >= 3, got {}", cfg.window)));
    }
    if !(cfg.threshold > 0.0) {
        return Err(Error::Param(format!("MAD threshold must be > 0, got {}", cfg.threshold)));
    }
    let n = trace.len();
    let half = cfg.window / 2;
    let mut flagged = Vec::new();
    let mut buf = Vec::with_capacity(cfg.window);
    let mut dev = Vec::with_capacity(cfg.window);
    for i in 0..n {
        if !trace.valid[i] {
            continue;
        }
        let lo = i.saturating_sub(half);
        let hi = (lo + cfg.window).min(n);
        buf.clear();
        buf.extend((lo..hi).filter(|&j| trace.valid[j]).map(|j| trace.values[j]));
        let m = median_in_place(&mut buf);
        dev.clear();
        dev.extend(buf.iter().map(|v| (v - m).abs()));
        let mad = median_in_place(&mut dev).max(cfg.floor_db);
        if (trace.values[i] - m).abs() > cfg.threshold * mad {
            flagged.push(i);
        }
    }
    Ok(flagged)
}

/// Invalidate MAD outliers and re-interpolate them. Returns the cleaned trace
/// and the flagged indices.
pub fn remove_outliers_mad(trace: &RssiTrace, cfg: &MadConfig) -> Result<(RssiTrace, Vec<usize>)> {
    let flagged = detect_outliers_mad(trace, cfg)?;
    let mut marked = trace.clone();
    for &i in &flagged {
        marked.valid[i] = false;
    }
    let mut out = interpolate_missing(&marked)?;
    out.stages = trace.stages.clone();
    out.stages.push(Stage::OutliersRemoved);
    Ok((out, flagged))
}

/// Normalized Gaussian taps for a support of `support` samples:
/// σ = support/4, radius ⌈support/2⌉.
pub fn gaussian_kernel(support: usize) -> Result<Vec<f64>> {
    if support == 0 {
        return Err(Error::Param("smoothing support must be >= 1".into()));
    }
    let sigma = support as f64 / 4.0;
    let radius = support.div_ceil(2) as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|w| w / total).collect())
}

/// FIR Gaussian smoothing; near the edges the kernel is renormalized over
/// the taps that land inside the trace.
pub fn gaussian_smooth(trace: &RssiTrace, support: usize) -> Result<RssiTrace> {
    let kernel = gaussian_kernel(support)?;
    let radius = (kernel.len() / 2) as i64;
    let n = trace.len() as i64;
    let mut values = Vec::with_capacity(trace.len());
    let mut valid = Vec::with_capacity(trace.len());
    for i in 0..n {
        let mut acc = 0.0;
        let mut weight = 0.0;
        for (k, &w) in kernel.iter().enumerate() {
            let j = i + k as i64 - radius;
            if (0..n).contains(&j) && trace.valid[j as usize] {
                acc += w * trace.values[j as usize];
                weight += w;
            }
        }
        valid.push(weight > 0.0);
        values.push(if weight > 0.0 { acc / weight } else { trace.values[i as usize] });
    }
    Ok(trace.with_values(values, valid, Stage::Smoothed))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Downsampled {
    pub trace: RssiTrace,
    /// Trailing samples that did not fill a block.
    pub dropped: usize,
}

/// Average consecutive blocks of `factor` samples, aligned from the first
/// sample. Block timestamps are the block mean.
pub fn downsample_average(trace: &RssiTrace, factor: usize) -> Result<Downsampled> {
    if factor == 0 {
        return Err(Error::Param("downsampling factor must be >= 1".into()));
    }
    let blocks = trace.len() / factor;
    let dropped = trace.len() - blocks * factor;
    if dropped > 0 {
        log::warn!("downsampling dropped {dropped} trailing sample(s)");
    }
    let mut ts = Vec::with_capacity(blocks);
    let mut values = Vec::with_capacity(blocks);
    let mut valid = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let r = b * factor..(b + 1) * factor;
        let t_sum: i128 = trace.timestamps_us[r.clone()].iter().map(|&t| t as i128).sum();
        ts.push((t_sum / factor as i128) as i64);
        values.push(trace.values[r.clone()].iter().sum::<f64>() / factor as f64);
        valid.push(trace.valid[r].iter().all(|&v| v));
    }
    let mut stages = trace.stages.clone();
    stages.push(Stage::Downsampled);
    Ok(Downsampled {
        trace: RssiTrace {
            timestamps_us: ts,
            values,
            valid,
            nominal_rate_hz: trace.nominal_rate_hz / factor as f64,
            stages,
        },
        dropped,
    })
}

/// Pairwise averaging, e.g. 40 Hz → 20 Hz.
pub fn downsample_pair_average(trace: &RssiTrace) -> Result<Downsampled> {
    downsample_average(trace, 2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub r: f64,
    pub band: (f64, f64),
    pub within_band: bool,
}

/// Pearson r between the downsampled raw trace and the preprocessed trace.
pub fn trend_check(raw_downsampled: &RssiTrace, preprocessed: &RssiTrace, band: (f64, f64)) -> Result<TrendCheck> {
    if raw_downsampled.len() != preprocessed.len() {
        return Err(Error::shape(
            "trend_check",
            format!("{} vs {} samples", raw_downsampled.len(), preprocessed.len()),
        ));
    }
    let r = metrics::pearson_r(&raw_downsampled.values, &preprocessed.values)?;
    Ok(TrendCheck {
        r,
        band,
        within_band: r >= band.0 && r <= band.1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub rate_in_hz: f64,
    pub rate_out_hz: f64,
    pub mad: MadConfig,
    pub smooth_support: usize,
    pub trend_band: (f64, f64),
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rate_in_hz: 40.0,
            rate_out_hz: 20.0,
            mad: MadConfig::default(),
            smooth_support: 4,
            trend_band: (0.90, 0.95),
        }
    }
}

impl PipelineConfig {
    pub fn factor(&self) -> Result<usize> {
        let ratio = self.rate_in_hz / self.rate_out_hz;
        if !(ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::Param(format!(
                "rate {} Hz -> {} Hz is not an integer reduction",
                self.rate_in_hz, self.rate_out_hz
            )));
        }
        Ok(ratio.round() as usize)
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub preprocessed: RssiTrace,
    /// Gap-filled raw trace at the output rate, the trend-check reference.
    pub raw_downsampled: RssiTrace,
    pub flagged: Vec<usize>,
    pub dropped_tail: usize,
    /// `None` when either series has zero variance.
    pub trend: Option<TrendCheck>,
}

/// interpolate → MAD removal → smoothing → downsampling.
pub fn run_pipeline(raw: &RssiTrace, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let factor = cfg.factor()?;
    if (raw.nominal_rate_hz - cfg.rate_in_hz).abs() > 1e-9 {
        return Err(Error::Data(format!(
            "trace is {} Hz but the pipeline expects {} Hz",
            raw.nominal_rate_hz, cfg.rate_in_hz
        )));
    }
    let filled = interpolate_missing(raw)?;
    let (cleaned, flagged) = remove_outliers_mad(&filled, &cfg.mad)?;
    let smoothed = gaussian_smooth(&cleaned, cfg.smooth_support)?;
    let down = downsample_average(&smoothed, factor)?;
    let raw_down = downsample_average(&filled, factor)?.trace;
    let trend = trend_check(&raw_down, &down.trace, cfg.trend_band).ok();
    Ok(PipelineOutput {
        preprocessed: down.trace,
        raw_downsampled: raw_down,
        flagged,
        dropped_tail: down.dropped,
        trend,
    })
}

pub const CSV_HEADER: &str = "timestamp_us,rssi_dbm";

/// Parse `timestamp_us,rssi_dbm` rows; an empty value marks an invalid sample.
pub fn parse_rssi_csv(text: &str, nominal_rate_hz: f64) -> Result<RssiTrace> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        Some((_, h)) => return Err(Error::Format(format!("line 1: expected header {CSV_HEADER:?}, got {h:?}"))),
        None => return Err(Error::Format("empty RSSI file".into())),
    }
    let mut ts = Vec::new();
    let mut values = Vec::new();
    let mut valid = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (t, v) = line
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("line {lineno}: expected two fields")))?;
        let t: i64 = t
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("line {lineno}: bad timestamp {t:?}")))?;
        let v = v.trim();
        if v.is_empty() {
            values.push(f64::NAN);
            valid.push(false);
        } else {
            let x: f64 = v
                .parse()
                .map_err(|_| Error::Format(format!("line {lineno}: bad RSSI value {v:?}")))?;
            if !x.is_finite() {
                return Err(Error::Format(format!("line {lineno}: non-finite RSSI value")));
            }
            values.push(x);
            valid.push(true);
        }
        ts.push(t);
    }
    RssiTrace::new(ts, values, valid, nominal_rate_hz)
}

pub fn read_rssi_csv(path: &Path, nominal_rate_hz: f64) -> Result<RssiTrace> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rssi_csv(&text, nominal_rate_hz).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn format_rssi_csv(trace: &RssiTrace) -> String {
    let mut out = String::with_capacity(trace.len() * 20);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for i in 0..trace.len() {
        if trace.valid[i] {
            let _ = writeln!(out, "{},{}", trace.timestamps_us[i], trace.values[i]);
        } else {
            let _ = writeln!(out, "{},", trace.timestamps_us[i]);
        }
    }
    out
}

pub fn write_rssi_csv(path: &Path, trace: &RssiTrace) -> Result<()> {
    std::fs::write(path, format_rssi_csv(trace)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraFrames {
    pub timestamps_us: Vec<i64>,
    pub refs: Vec<String>,
}

/// Per-camera frame streams on a shared clock.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameIndex {
    pub cameras: Vec<CameraFrames>,
    pub nominal_rate_hz: f64,
}

impl FrameIndex {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Data("frame index has no cameras".into()));
        }
        for (k, c) in self.cameras.iter().enumerate() {
            if c.timestamps_us.len() != c.refs.len() {
                return Err(Error::Data(format!("camera {k}: timestamps and refs differ in length")));
            }
            if c.timestamps_us.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Data(format!("camera {k}: timestamps not strictly increasing")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    /// One frame reference per camera.
    pub frames: Vec<String>,
    pub label_dbm: f64,
    pub timestamp_us: i64,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairedDataset {
    pub samples: Vec<PairedSample>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }
}

#[derive(Clone, Debug)]
pub struct Alignment {
    pub dataset: PairedDataset,
    pub dropped: usize,
}

fn nearest(ts: &[i64], t: i64) -> Option<usize> {
    let i = ts.partition_point(|&x| x < t);
    let cands = [i.checked_sub(1), (i < ts.len()).then_some(i)];
    cands
        .into_iter()
        .flatten()
        .min_by_key(|&j| ((ts[j] - t).abs(), j))
}

/// Pair every camera-0 frame with the nearest frame of each other camera and
/// the nearest valid RSSI sample. A pair is kept only when all its legs lie
/// within `tolerance_us` of each other.
pub fn align_frames_rssi(frames: &FrameIndex, trace: &RssiTrace, tolerance_us: i64) -> Result<Alignment> {
    frames.validate()?;
    let rssi_idx: Vec<usize> = (0..trace.len()).filter(|&i| trace.valid[i]).collect();
    let rssi_ts: Vec<i64> = rssi_idx.iter().map(|&i| trace.timestamps_us[i]).collect();
    let reference = &frames.cameras[0];
    let mut samples = Vec::new();
    let mut dropped = 0;
    for (i, &t0) in reference.timestamps_us.iter().enumerate() {
        let mut legs = vec![t0];
        let mut refs = vec![reference.refs[i].clone()];
        let mut complete = true;
        for cam in &frames.cameras[1..] {
            match nearest(&cam.timestamps_us, t0) {
                Some(j) => {
                    legs.push(cam.timestamps_us[j]);
                    refs.push(cam.refs[j].clone());
                }
                None => complete = false,
            }
        }
        let label = nearest(&rssi_ts, t0).map(|j| {
            legs.push(rssi_ts[j]);
            trace.values[rssi_idx[j]]
        });
        let skew = legs.iter().max().unwrap() - legs.iter().min().unwrap();
        match label {
            Some(label_dbm) if complete && skew <= tolerance_us => samples.push(PairedSample {
                frames: refs,
                label_dbm,
                timestamp_us: t0,
                split: Split::Train,
            }),
            _ => dropped += 1,
        }
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("no frame/RSSI pairs within {tolerance_us} us")));
    }
    Ok(Alignment {
        dataset: PairedDataset { samples },
        dropped,
    })
}
