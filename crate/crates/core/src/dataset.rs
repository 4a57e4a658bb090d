//! On-disk datasets: frame blobs, PNM ingestion, the JSON manifest, synthetic
//! generation and train/val/test splitting.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::{map_indexed, Execution};
use crate::rssi::{self, CameraFrames, FrameIndex, PairedDataset, PipelineConfig, RssiTrace, Split};
use crate::scene::{render_view, rssi_ground_truth, simulate_trajectory, Point, SceneSpec};
use crate::tensor::Tensor;

pub const FRAME_MAGIC: &[u8; 4] = b"MVTF";
pub const FRAME_VERSION: u8 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RAW_RSSI_FILE: &str = "rssi_raw.csv";
/// Overrides the dataset root when no directory is given explicitly.
pub const DATA_ROOT_ENV: &str = "MULVIT_DATA_ROOT";

pub const FRAME_RATE_HZ: f64 = 20.0;
pub const FRAME_PERIOD_US: i64 = 50_000;
pub const START_US: i64 = 1_000_000;
pub const PAIR_TOLERANCE_US: i64 = 25_000;

/// Per-channel normalization applied when frames are loaded for a model.
pub const IMAGE_MEAN: f32 = 0.5;
pub const IMAGE_STD: f32 = 0.5;

/// `MVTF`, version byte, `C H W` as u32 LE, then `C·H·W` f32 LE.
pub fn encode_frame(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape("encode_frame", format!("expected [C,H,W], got {:?}", image.shape())));
    };
    let mut out = Vec::with_capacity(17 + 4 * image.numel());
    out.extend_from_slice(FRAME_MAGIC);
    out.push(FRAME_VERSION);
    for e in [c, h, w] {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_frame(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 17 || &bytes[..4] != FRAME_MAGIC {
        return Err(Error::Format("not a frame blob (bad magic)".into()));
    }
    if bytes[4] != FRAME_VERSION {
        return Err(Error::Format(format!("unsupported frame version {}", bytes[4])));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let shape = vec![dim(0), dim(1), dim(2)];
    let n: usize = shape.iter().product();
    let body = &bytes[17..];
    if body.len() != 4 * n {
        return Err(Error::Format(format!(
            "frame {shape:?} needs {} payload bytes, found {}",
            4 * n,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_frame(path: &Path, image: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_frame(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_frame(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_frame(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Binary PGM (`P5`) or PPM (`P6`) to `[3, H, W]` in [0, 1]; grey images are
/// replicated across channels.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PNM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported PNM type {m:?}"))),
    };
    let num = |s: String| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM header field {s:?}")));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if !(1..=65535).contains(&maxval) {
        return Err(Error::Format(format!("bad PNM maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = w * h * channels * bps;
    let raster = bytes
        .get(start..start + need)
        .ok_or_else(|| Error::Format(format!("PNM raster needs {need} bytes")))?;
    let sample = |i: usize| -> f32 {
        let v = if bps == 1 {
            raster[i] as u32
        } else {
            u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as u32
        };
        v as f32 / maxval as f32
    };
    let mut data = vec![0.0f32; 3 * h * w];
    for p in 0..h * w {
        for ch in 0..3 {
            let src = if channels == 1 { p } else { 3 * p + ch };
            data[ch * h * w + p] = sample(src);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn read_pnm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Bilinear resize of a `[C, H, W]` image with half-pixel centers.
pub fn resize_bilinear(image: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape("resize_bilinear", format!("expected [C,H,W], got {:?}", image.shape())));
    };
    if height == 0 || width == 0 {
        return Err(Error::Param("resize target must be nonzero".into()));
    }
    let src = image.data();
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f32) {
        let x = ((o as f32 + 0.5) * inp as f32 / out as f32 - 0.5).clamp(0.0, (inp - 1) as f32);
        let x0 = x.floor() as usize;
        (x0, (x0 + 1).min(inp - 1), x - x0 as f32)
    };
    let mut data = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for r in 0..height {
            let (y0, y1, fy) = coord(r, height, h);
            for col in 0..width {
                let (x0, x1, fx) = coord(col, width, w);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, height, width], data)
}

pub fn normalize_image(image: &Tensor<f32>) -> Tensor<f32> {
    let data = image.data().iter().map(|v| (v - IMAGE_MEAN) / IMAGE_STD).collect();
    Tensor::new(image.shape().to_vec(), data).expect("shape unchanged")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// The timeline is cut into `blocks` contiguous chunks; each chunk is
    /// split train, then val, then test.
    #[default]
    ChronologicalBlocks,
    Shuffled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub mode: SplitMode,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    pub seed: u64,
}

fn default_blocks() -> usize {
    10
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            mode: SplitMode::ChronologicalBlocks,
            blocks: default_blocks(),
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn issues(&self) -> Vec<String> {
        let mut issues = Vec::new();
        let f = [self.train, self.val, self.test];
        if f.iter().any(|v| !(*v >= 0.0)) {
            issues.push("split fractions must be >= 0".into());
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            issues.push(format!("split fractions sum to {}, not 1", f.iter().sum::<f64>()));
        }
        if self.blocks == 0 {
            issues.push("split blocks must be >= 1".into());
        }
        issues
    }

    /// `(train, val, test)` counts: val and test are floored, train takes the
    /// remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let val = (self.val * n as f64).floor() as usize;
        let test = (self.test * n as f64).floor() as usize;
        (n - val - test, val, test)
    }
}

/// Tag every sample with a split. Needs at least ten samples and a nonempty
/// share for each split.
pub fn split_dataset(ds: &mut PairedDataset, cfg: &SplitConfig) -> Result<()> {
    let mut issues = cfg.issues();
    let n = ds.len();
    if n < 10 {
        issues.push(format!("need at least 10 samples to split, have {n}"));
    }
    let (n_train, n_val, n_test) = cfg.sizes(n);
    if n >= 10 {
        for (name, k) in [("train", n_train), ("val", n_val), ("test", n_test)] {
            if k == 0 {
                issues.push(format!("{name} split would be empty"));
            }
        }
    }
    if !issues.is_empty() {
        return Err(Error::Config(issues));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let blocks = match cfg.mode {
        SplitMode::ChronologicalBlocks => {
            order.sort_by_key(|&i| (ds.samples[i].timestamp_us, i));
            cfg.blocks.min(n_val.min(n_test)).max(1)
        }
        SplitMode::Shuffled => {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
            1
        }
    };
    // Per-block shares are differences of floors, so the totals stay exact.
    let share = |total: usize, b: usize| total * (b + 1) / blocks - total * b / blocks;
    for b in 0..blocks {
        let (start, end) = (n * b / blocks, n * (b + 1) / blocks);
        let (val, test) = (share(n_val, b), share(n_test, b));
        let train = end - start - val - test;
        for (rank, &i) in order[start..end].iter().enumerate() {
            ds.samples[i].split = if rank < train {
                Split::Train
            } else if rank < train + val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(())
}

/// Simulator state behind a sample, kept for diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTruth {
    pub x: f64,
    pub y: f64,
    pub visible: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub cameras: usize,
    pub frame_rate_hz: f64,
    pub tolerance_us: i64,
    pub pipeline: PipelineConfig,
    pub scene: Option<SceneSpec>,
    pub dropped_pairs: usize,
    /// Frame paths are relative to the manifest's directory.
    pub samples: Vec<rssi::PairedSample>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub truth: Vec<SampleTruth>,
}

impl Manifest {
    pub fn dataset(&self) -> PairedDataset {
        PairedDataset {
            samples: self.samples.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }

    /// Parse `dir/manifest.json`, checking the version and that every frame
    /// file exists.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "{}: manifest version {} (expected {MANIFEST_VERSION})",
                path.display(),
                m.format_version
            )));
        }
        for s in &m.samples {
            if s.frames.len() != m.cameras {
                return Err(Error::Format(format!(
                    "sample at {} us has {} frames for {} cameras",
                    s.timestamp_us,
                    s.frames.len(),
                    m.cameras
                )));
            }
            for f in &s.frames {
                let p = dir.join(f);
                if !p.is_file() {
                    return Err(Error::Data(format!("missing frame {}", p.display())));
                }
            }
        }
        Ok(m)
    }
}

/// `explicit`, else `$MULVIT_DATA_ROOT`.
pub fn resolve_data_root(explicit: Option<&Path>) -> Result<PathBuf> {
    match explicit {
        Some(p) => Ok(p.to_path_buf()),
        None => std::env::var_os(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Data(format!("no dataset directory given and {DATA_ROOT_ENV} is unset"))),
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// Normalized `[3, H, W]` image per camera.
    pub images: Vec<Tensor<f32>>,
    pub label_dbm: f64,
    pub timestamp_us: i64,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.samples[i].label_dbm).collect()
    }

    /// Keep only camera `k`, for single-view models.
    pub fn camera(&self, k: usize) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let img = s
                    .images
                    .get(k)
                    .ok_or_else(|| Error::Param(format!("camera {k} out of range")))?;
                Ok(Sample {
                    images: vec![img.clone()],
                    ..s.clone()
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { samples })
    }

    /// Re-tag splits in place.
    pub fn apply_split(&mut self, cfg: &SplitConfig) -> Result<()> {
        let mut paired = PairedDataset {
            samples: self
                .samples
                .iter()
                .map(|s| rssi::PairedSample {
                    frames: Vec::new(),
                    label_dbm: s.label_dbm,
                    timestamp_us: s.timestamp_us,
                    split: s.split,
                })
                .collect(),
        };
        split_dataset(&mut paired, cfg)?;
        for (s, p) in self.samples.iter_mut().zip(paired.samples) {
            s.split = p.split;
        }
        Ok(())
    }
}

/// Read every frame referenced by the manifest and normalize it.
pub fn load_dataset(dir: &Path, manifest: &Manifest, exec: Execution) -> Result<Dataset> {
    let loaded = map_indexed(exec, manifest.samples.len(), |i| -> Result<Sample> {
        let s = &manifest.samples[i];
        let images = s
            .frames
            .iter()
            .map(|f| read_frame(&dir.join(f)).map(|t| normalize_image(&t)))
            .collect::<Result<_>>()?;
        Ok(Sample {
            images,
            label_dbm: s.label_dbm,
            timestamp_us: s.timestamp_us,
            split: s.split,
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(Dataset { samples: loaded })
}

#[derive(Clone, Debug)]
pub struct GenerationSummary {
    pub frames: usize,
    pub cameras: usize,
    pub rssi_rows: usize,
    pub samples: usize,
    pub dropped_pairs: usize,
    pub split_counts: (usize, usize, usize),
    pub trend_r: Option<f64>,
}

fn frame_ref(camera: usize, index: usize) -> String {
    format!("cam{camera}/{index:06}.mvtf")
}

/// Raw 40 Hz trace for a trajectory sampled at 40 Hz: two draws per frame
/// step at `t ± 12.5 ms`, with dropouts, spikes and integer quantization.
fn measure(spec: &SceneSpec, positions: &[Point], rng: &mut ChaCha8Rng) -> Result<RssiTrace> {
    let m = &spec.measurement;
    let half = FRAME_PERIOD_US / 4;
    let mut ts = Vec::with_capacity(positions.len());
    let mut values = Vec::with_capacity(positions.len());
    let mut valid = Vec::with_capacity(positions.len());
    for (j, p) in positions.iter().enumerate() {
        let frame_t = START_US + (j / 2) as i64 * FRAME_PERIOD_US;
        ts.push(if j % 2 == 0 { frame_t - half } else { frame_t + half });
        let mut v = rssi_ground_truth(spec, *p, rng);
        if rng.random::<f64>() < m.spike_prob {
            v += if rng.random::<bool>() { m.spike_db } else { -m.spike_db };
        }
        if m.quantize {
            v = v.round();
        }
        let ok = rng.random::<f64>() >= m.dropout_prob;
        values.push(if ok { v } else { f64::NAN });
        valid.push(ok);
    }
    RssiTrace::new(ts, values, valid, 2.0 * FRAME_RATE_HZ)
}

/// Simulate `frames` frame steps and write frame blobs, the raw RSSI CSV and
/// the manifest under `out`. Output bytes depend only on `spec`.
pub fn generate_dataset(spec: &SceneSpec, frames: usize, out: &Path, exec: Execution) -> Result<GenerationSummary> {
    spec.validate()?;
    if frames == 0 {
        return Err(Error::Param("frames must be >= 1".into()));
    }
    let m = spec.cameras.len();
    let positions = simulate_trajectory(spec, 2 * frames, 0.5 / FRAME_RATE_HZ)?;
    let mut noise = ChaCha8Rng::seed_from_u64(spec.trajectory.seed);
    noise.set_stream(1);
    let raw = measure(spec, &positions, &mut noise)?;

    let midpoints: Vec<Point> = (0..frames)
        .map(|i| {
            let (a, b) = (positions[2 * i], positions[2 * i + 1]);
            Point::new(0.5 * (a.x + b.x), 0.5 * (a.y + b.y))
        })
        .collect();
    let frame_ts: Vec<i64> = (0..frames).map(|i| START_US + i as i64 * FRAME_PERIOD_US).collect();

    for k in 0..m {
        let dir = out.join(format!("cam{k}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let blobs = map_indexed(exec, frames * m, |j| {
        let (i, k) = (j / m, j % m);
        render_view(spec, k, midpoints[i], frame_ts[i]).and_then(|f| encode_frame(&f.image))
    });
    for (j, blob) in blobs.into_iter().enumerate() {
        let path = out.join(frame_ref(j % m, j / m));
        std::fs::write(&path, blob?).map_err(|e| Error::io(&path, e))?;
    }
    rssi::write_rssi_csv(&out.join(RAW_RSSI_FILE), &raw)?;

    let pipeline = PipelineConfig::default();
    let processed = rssi::run_pipeline(&raw, &pipeline)?;
    let index = FrameIndex {
        cameras: (0..m)
            .map(|k| CameraFrames {
                timestamps_us: frame_ts.clone(),
                refs: (0..frames).map(|i| frame_ref(k, i)).collect(),
            })
            .collect(),
        nominal_rate_hz: FRAME_RATE_HZ,
    };
    let aligned = rssi::align_frames_rssi(&index, &processed.preprocessed, PAIR_TOLERANCE_US)?;
    let mut paired = aligned.dataset;
    let split = SplitConfig::default();
    if paired.len() >= 10 {
        split_dataset(&mut paired, &split)?;
    }
    let truth = paired
        .samples
        .iter()
        .map(|s| {
            let i = ((s.timestamp_us - START_US) / FRAME_PERIOD_US) as usize;
            let p = midpoints[i];
            SampleTruth {
                x: p.x,
                y: p.y,
                visible: (0..m).map(|k| spec.visible(k, p)).collect(),
            }
        })
        .collect();
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        cameras: m,
        frame_rate_hz: FRAME_RATE_HZ,
        tolerance_us: PAIR_TOLERANCE_US,
        pipeline,
        scene: Some(spec.clone()),
        dropped_pairs: aligned.dropped,
        samples: paired.samples,
        truth,
    };
    manifest.write(out)?;
    let ds = manifest.dataset();
    Ok(GenerationSummary {
        frames,
        cameras: m,
        rssi_rows: raw.len(),
        samples: ds.len(),
        dropped_pairs: aligned.dropped,
        split_counts: (ds.count(Split::Train), ds.count(Split::Val), ds.count(Split::Test)),
        trend_r: processed.trend.map(|t| t.r),
    })
}
