//! Helpers shared by integration test targets: finite-difference checks, toy
//! models and a loop-based reference forward pass that never touches the tape.
#![allow(dead_code)]

use mulvit::model::{Architecture, Model, ModelOverrides, ModelSpec, Preset};
use mulvit::tape::{GeluMode, Tape, Var};
use mulvit::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Loss `Σ f(inputs) ⊙ R` for a fixed random `R`.
fn weighted_loss(inputs: &[Tensor<f64>], f: &Build, weights: &Tensor<f64>) -> (Tape<f64>, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let l = tape.sum(prod);
    (tape, vars, l)
}

/// Worst relative error over all inputs of one op on one seed.
pub fn op_error(inputs: &[Tensor<f64>], seed: u64, f: &Build) -> f64 {
    let shape = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
        let out = f(&mut t, &vars).unwrap();
        t.shape(out).to_vec()
    };
    let weights = random(&shape, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc));
    let (mut tape, vars, l) = weighted_loss(inputs, f, &weights);
    tape.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map_or_else(|| vec![0.0; inputs[k].numel()], |g| g.data().to_vec());
        let numeric: Vec<f64> = (0..inputs[k].numel())
            .map(|i| {
                let eval = |delta: f64| {
                    let mut moved = inputs.to_vec();
                    moved[k].data_mut()[i] += delta;
                    let (t, _, l) = weighted_loss(&moved, f, &weights);
                    t.value(l).data()[0]
                };
                (eval(H) - eval(-H)) / (2.0 * H)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Worst error of `f` over `seeds` random draws of inputs with `shapes`.
pub fn op_error_over_seeds(shapes: &[&[usize]], seeds: u64, f: &Build) -> f64 {
    (0..seeds)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            op_error(&inputs, seed, f)
        })
        .fold(0.0, f64::max)
}

pub fn toy_overrides() -> ModelOverrides {
    ModelOverrides {
        image_height: Some(4),
        image_width: Some(4),
        patch_size: Some(4),
        embed_dim: Some(4),
        depth: Some(1),
        heads: Some(2),
        ffn_ratio: Some(2),
        fusion_depth: Some(1),
        fusion_ffn_ratio: Some(2),
        twdnn_blocks: Some(1),
        twdnn_hidden: Some(6),
        head_hidden: Some(3),
        ..ModelOverrides::default()
    }
}

/// Overwrite every parameter with uniform values in `[-scale, scale)`.
pub fn randomize<T: mulvit::tensor::Scalar>(m: &mut Model<T>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = m.params.entries().iter().map(|e| e.name.clone()).collect();
    for n in names {
        for v in m.params.get_mut(&n).unwrap().data_mut() {
            *v = T::from_f64_lossy((rng.random::<f64>() * 2.0 - 1.0) * scale);
        }
    }
}

/// Tiny model with one patch per camera, so each sequence has two tokens.
pub fn toy(preset: Preset, seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::new(preset.spec().with_overrides(&toy_overrides()).unwrap(), seed).unwrap();
    randomize(&mut m, seed + 100, 0.5);
    m
}

/// Worst relative error of all parameter gradients of `model` on `images`.
pub fn model_error(model: &Model<f64>, images: &[Tensor<f64>]) -> f64 {
    let refs: Vec<&Tensor<f64>> = images.iter().collect();
    let mut s = model.session(|_| true, false, 0.0, 0);
    let out = model.forward(&mut s, &refs).unwrap();
    let l = s.tape.sum(out.prediction);
    s.tape.backward(l).unwrap();
    let grads = s.take_param_grads();
    let mut worst: f64 = 0.0;
    for (k, e) in model.params.entries().iter().enumerate() {
        let analytic = grads[k].as_ref().map_or_else(|| vec![0.0; e.value.numel()], |g| g.data().to_vec());
        let numeric: Vec<f64> = (0..e.value.numel())
            .map(|i| {
                let mut m = model.clone();
                m.params.get_mut(&e.name).unwrap().data_mut()[i] += H;
                let up = m.predict(&refs).unwrap();
                m.params.get_mut(&e.name).unwrap().data_mut()[i] -= 2.0 * H;
                (up - m.predict(&refs).unwrap()) / (2.0 * H)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub fn toy_model_error(preset: Preset, seed: u64) -> f64 {
    let model = toy(preset, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
    let images: Vec<Tensor<f64>> = (0..model.spec.camera_count()).map(|_| random(&[3, 4, 4], &mut rng)).collect();
    model_error(&model, &images)
}

// ---------------------------------------------------------------------------
// Reference forward pass over nested vectors.

type Mat = Vec<Vec<f64>>;

fn p(m: &Model<f64>, name: &str) -> Vec<f64> {
    m.params.get(name).unwrap_or_else(|| panic!("missing {name}")).data().to_vec()
}

fn mat(m: &Model<f64>, name: &str) -> Mat {
    let t = m.params.get(name).unwrap_or_else(|| panic!("missing {name}"));
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect())
        .collect()
}

fn linear(m: &Model<f64>, x: &Mat, prefix: &str) -> Mat {
    let w = mat(m, &format!("{prefix}.weight"));
    let b = p(m, &format!("{prefix}.bias"));
    matmul(x, &w)
        .into_iter()
        .map(|row| row.iter().zip(&b).map(|(v, b)| v + b).collect())
        .collect()
}

fn layer_norm(m: &Model<f64>, x: &Mat, prefix: &str, eps: f64) -> Mat {
    let g = p(m, &format!("{prefix}.weight"));
    let b = p(m, &format!("{prefix}.bias"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + eps).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64, mode: GeluMode) -> f64 {
    match mode {
        GeluMode::Tanh => 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh()),
        GeluMode::Exact => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
    }
}

fn map(x: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    x.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

/// Attention computed one query/key pair at a time.
pub fn brute_force_attention(x: &Mat, qkv_w: &Mat, qkv_b: &[f64], heads: usize) -> Mat {
    let d = x[0].len();
    let dh = d / heads;
    let t = x.len();
    let qkv: Mat = x
        .iter()
        .map(|row| (0..3 * d).map(|j| qkv_b[j] + (0..d).map(|i| row[i] * qkv_w[i][j]).sum::<f64>()).collect())
        .collect();
    let mut out = vec![vec![0.0; d]; t];
    for h in 0..heads {
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| (0..dh).map(|c| qkv[i][h * dh + c] * qkv[j][d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, w) in e.iter().enumerate() {
                for c in 0..dh {
                    out[i][h * dh + c] += w / z * qkv[j][2 * d + h * dh + c];
                }
            }
        }
    }
    out
}

fn block(m: &Model<f64>, z: &Mat, prefix: &str, heads: usize, spec: &ModelSpec) -> Mat {
    let eps = spec.layer_norm_eps;
    let h = layer_norm(m, z, &format!("{prefix}.norm1"), eps);
    let a = brute_force_attention(&h, &mat(m, &format!("{prefix}.attn.qkv.weight")), &p(m, &format!("{prefix}.attn.qkv.bias")), heads);
    let a = linear(m, &a, &format!("{prefix}.attn.proj"));
    let z1 = add(z, &a);
    let h = layer_norm(m, &z1, &format!("{prefix}.norm2"), eps);
    let f = linear(m, &h, &format!("{prefix}.mlp.fc1"));
    let f = map(&f, |v| gelu(v, spec.gelu));
    let f = linear(m, &f, &format!("{prefix}.mlp.fc2"));
    add(&z1, &f)
}

/// Image `[C,H,W]` to patch rows, pixel-major then channel.
pub fn patches(image: &Tensor<f64>, patch: usize) -> Mat {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let px = |ch: usize, y: usize, x: usize| image.data()[(ch * h + y) * w + x];
    let mut rows = Vec::new();
    for gy in 0..h / patch {
        for gx in 0..w / patch {
            let mut r = Vec::new();
            for y in 0..patch {
                for x in 0..patch {
                    for ch in 0..c {
                        r.push(px(ch, gy * patch + y, gx * patch + x));
                    }
                }
            }
            rows.push(r);
        }
    }
    rows
}

pub fn encoder_tokens(m: &Model<f64>, k: usize, image: &Tensor<f64>) -> Mat {
    let spec = &m.spec;
    let cfg = &spec.encoders[k];
    let pre = format!("encoder{k}");
    let proj = linear(m, &patches(image, cfg.patch_size), &format!("{pre}.patch_embed"));
    let mut z = vec![p(m, &format!("{pre}.cls_token"))];
    z.extend(proj);
    let z = add(&z, &mat(m, &format!("{pre}.pos_embed")));
    (0..cfg.depth).fold(z, |z, i| block(m, &z, &format!("{pre}.blocks.{i}"), cfg.heads, spec))
}

pub struct Reference {
    pub prediction: f64,
    pub cls: Vec<Vec<f64>>,
}

/// Evaluation-mode forward pass of any architecture.
pub fn reference_forward(m: &Model<f64>, images: &[Tensor<f64>]) -> Reference {
    let spec = &m.spec;
    let tokens: Vec<Mat> = images.iter().enumerate().map(|(k, img)| encoder_tokens(m, k, img)).collect();
    let seq = tokens[0].len();
    let fused: Mat = match spec.architecture {
        Architecture::SinVit => tokens[0].clone(),
        Architecture::MulVitTf => {
            let z: Mat = tokens.concat();
            (0..spec.fusion_depth).fold(z, |z, i| block(m, &z, &format!("fusion.blocks.{i}"), spec.encoders[0].heads, spec))
        }
        Architecture::MulVitTwdnn => {
            let z: Mat = tokens
                .iter()
                .enumerate()
                .flat_map(|(k, t)| {
                    let seg = p(m, &format!("twdnn.segment{k}"));
                    t.iter().map(move |r| r.iter().zip(&seg).map(|(a, b)| a + b).collect::<Vec<f64>>()).collect::<Vec<_>>()
                })
                .collect();
            (0..spec.twdnn_blocks).fold(z, |z, i| {
                let pre = format!("twdnn.blocks.{i}");
                let h = layer_norm(m, &z, &format!("{pre}.norm"), spec.layer_norm_eps);
                let h = map(&linear(m, &h, &format!("{pre}.fc1")), |v| gelu(v, spec.gelu));
                let h = map(&linear(m, &h, &format!("{pre}.fc2")), |v| gelu(v, spec.gelu));
                let h = linear(m, &h, &format!("{pre}.fc3"));
                add(&z, &h)
            })
        }
    };
    let cls: Vec<Vec<f64>> = (0..tokens.len()).map(|k| fused[k * seq].clone()).collect();
    let f = vec![cls.concat()];
    let h = if spec.head_hidden > 0 {
        map(&linear(m, &f, "head.fc1"), |v| gelu(v, spec.gelu))
    } else {
        f
    };
    let prediction = linear(m, &h, "head.out")[0][0];
    Reference { prediction, cls }
}

/// Two random images for a toy model, plus the model itself.
pub fn toy_inputs(model: &Model<f64>, seed: u64) -> Vec<Tensor<f64>> {
    let e = &model.spec.encoders[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..model.spec.camera_count())
        .map(|_| random(&[e.channels, e.image_height, e.image_width], &mut rng))
        .collect()
}

/// CLS vectors from the tape-based forward pass.
pub fn tape_cls(model: &Model<f64>, images: &[Tensor<f64>]) -> (f64, Vec<Vec<f64>>) {
    let refs: Vec<&Tensor<f64>> = images.iter().collect();
    let mut s = model.inference_session();
    let out = model.forward(&mut s, &refs).unwrap();
    let cls = out.cls.iter().map(|&c| s.tape.value(c).data().to_vec()).collect();
    (s.tape.value(out.prediction).data()[0], cls)
}

/// Relative change of camera A's CLS vector when one patch of camera B is
/// replaced by fresh noise. Zero means bitwise unchanged.
pub fn cross_view_change(preset: Preset, seed: u64) -> (bool, f64) {
    let o = ModelOverrides {
        image_height: Some(8),
        image_width: Some(8),
        patch_size: Some(4),
        embed_dim: Some(8),
        depth: Some(1),
        heads: Some(2),
        ..toy_overrides()
    };
    let mut model = Model::<f64>::new(preset.spec().with_overrides(&o).unwrap(), seed).unwrap();
    randomize(&mut model, seed + 1, 0.5);
    let mut images = toy_inputs(&model, seed + 2);
    let (_, before) = tape_cls(&model, &images);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    let patch = rng.random_range(0..4usize);
    let (gy, gx) = (patch / 2, patch % 2);
    for ch in 0..3 {
        for y in 0..4 {
            for x in 0..4 {
                let i = (ch * 8 + gy * 4 + y) * 8 + gx * 4 + x;
                images[1].data_mut()[i] = rng.random::<f64>() * 2.0 - 1.0;
            }
        }
    }
    let (_, after) = tape_cls(&model, &images);
    let bitwise_same = before[0].iter().zip(&after[0]).all(|(a, b)| a.to_bits() == b.to_bits());
    (bitwise_same, rel_err(&after[0], &before[0]))
}

/// Small f32 model config used by the training-level tests.
pub fn small_overrides(cameras: Vec<usize>) -> ModelOverrides {
    ModelOverrides {
        image_height: Some(16),
        image_width: Some(16),
        patch_size: Some(8),
        embed_dim: Some(8),
        depth: Some(1),
        heads: Some(2),
        fusion_depth: Some(1),
        twdnn_blocks: Some(1),
        twdnn_hidden: Some(8),
        head_hidden: Some(8),
        cameras: Some(cameras),
        ..ModelOverrides::default()
    }
}

pub struct SpikeOutcome {
    pub injected: usize,
    pub caught: usize,
    pub false_positives: usize,
    pub clean_samples: usize,
    /// Pearson r between the clean trace (pair-averaged to the output rate)
    /// and the pipeline output.
    pub r: f64,
}

impl SpikeOutcome {
    pub fn recall(&self) -> f64 {
        self.caught as f64 / self.injected as f64
    }

    pub fn false_positive_rate(&self) -> f64 {
        self.false_positives as f64 / self.clean_samples as f64
    }
}

/// 40 Hz trace along a simulated walk through the default scene: clean
/// path-loss mean, plus 2 dB shadowing, integer quantization, and ±20 dB
/// spikes on `fraction` of the samples.
pub fn spike_injection(seed: u64, n: usize, fraction: f64) -> SpikeOutcome {
    use mulvit::rssi::{run_pipeline, PipelineConfig, RssiTrace};
    use mulvit::scene::{simulate_trajectory, SceneSpec};
    use rand_distr::{Distribution, Normal};

    let mut spec = SceneSpec::default();
    spec.trajectory.seed = seed;
    let path = simulate_trajectory(&spec, n, 1.0 / 40.0).unwrap();
    let clean: Vec<f64> = path.iter().map(|&q| spec.mean_rssi(q)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let noise = Normal::new(0.0, 2.0).unwrap();
    let mut observed: Vec<f64> = clean.iter().map(|c| (c + noise.sample(&mut rng)).round()).collect();
    let mut spiked = vec![false; n];
    let count = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    for &i in &order[..count] {
        spiked[i] = true;
        observed[i] += if rng.random::<bool>() { 20.0 } else { -20.0 };
    }
    let ts: Vec<i64> = (0..n as i64).map(|i| i * 25_000).collect();
    let trace = RssiTrace::from_values(ts, observed, 40.0).unwrap();
    let out = run_pipeline(&trace, &PipelineConfig::default()).unwrap();
    let caught = out.flagged.iter().filter(|&&i| spiked[i]).count();
    let clean_ds: Vec<f64> = clean.chunks_exact(2).map(|p| (p[0] + p[1]) / 2.0).collect();
    SpikeOutcome {
        injected: count,
        caught,
        false_positives: out.flagged.len() - caught,
        clean_samples: n - count,
        r: mulvit::metrics::pearson_r(&clean_ds, &out.preprocessed.values).unwrap(),
    }
}

/// Worst deviation of the library metrics from textbook formulas over
/// `cases` fuzzed prediction/label vectors, and the number of cases with
/// rmse < mae.
pub fn metrics_fuzz(cases: usize, seed: u64) -> (f64, usize) {
    use mulvit::metrics;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut violations = 0;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
    for _ in 0..cases {
        let n = rng.random_range(2..60usize);
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let truth: Vec<f64> = (0..n).map(|_| -60.0 + rng.random_range(-1.0..1.0) * 20.0).collect();
        let pred: Vec<f64> = truth.iter().map(|t| t + rng.random_range(-1.0..1.0) * scale).collect();
        let nf = n as f64;
        let err: Vec<f64> = pred.iter().zip(&truth).map(|(p, t)| p - t).collect();

        let rmse = (err.iter().map(|e| e.powi(2)).sum::<f64>() / nf).sqrt();
        let mae = err.iter().map(|e| e.abs()).sum::<f64>() / nf;
        let zs = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / nf;
            let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / nf).sqrt();
            v.iter().map(|x| (x - m) / sd).collect::<Vec<f64>>()
        };
        let r = zs(&pred).iter().zip(zs(&truth)).map(|(a, b)| a * b).sum::<f64>() / nf;
        let tm = truth.iter().sum::<f64>() / nf;
        let r2 = 1.0 - err.iter().map(|e| e * e).sum::<f64>() / truth.iter().map(|t| (t - tm).powi(2)).sum::<f64>();
        let threshold = rng.random_range(0.0..2.0) * scale;
        let mut abs: Vec<f64> = err.iter().map(|e| e.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let coverage = abs.partition_point(|&e| e <= threshold) as f64 / nf;

        let rep = metrics::report(&pred, &truth, threshold).unwrap();
        worst = worst
            .max(rel(rep.rmse, rmse))
            .max(rel(rep.mae, mae))
            .max(rel(rep.pearson_r.unwrap(), r))
            .max(rel(rep.r_squared.unwrap(), r2))
            .max((rep.coverage - coverage).abs());
        if rep.rmse < rep.mae {
            violations += 1;
        }
    }
    (worst, violations)
}

/// Generate the default scene at `width`×`height` into `dir` and load it.
pub fn scene_dataset(dir: &std::path::Path, frames: usize, width: usize, height: usize) -> mulvit::dataset::Dataset {
    use mulvit::dataset::{generate_dataset, load_dataset, Manifest};
    use mulvit::parallel::Execution;
    let mut spec = mulvit::scene::SceneSpec::default();
    spec.render.width = width;
    spec.render.height = height;
    generate_dataset(&spec, frames, dir, Execution::default()).unwrap();
    let manifest = Manifest::load(dir).unwrap();
    load_dataset(dir, &manifest, Execution::default()).unwrap()
}

/// Relative path and SHA-256 of every file under `dir`, sorted by path.
pub fn tree_digest(dir: &std::path::Path) -> Vec<(String, String)> {
    use sha2::{Digest, Sha256};
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut Vec<(String, String)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let bytes = std::fs::read(&p).unwrap();
                let hex = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
                out.push((p.strip_prefix(root).unwrap().display().to_string(), hex));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
