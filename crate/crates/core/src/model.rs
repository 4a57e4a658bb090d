//! Model variants: single-camera SinViT, MulViT-TF (transformer fusion over
//! concatenated camera tokens) and MulViT-TWDNN (token-wise residual DNN with
//! segment embeddings). All share the same regression head.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamEntry, ParamGroup, ParamId, ParamStore};
use crate::session::{ForwardOptions, Session};
use crate::tape::{GeluMode, Var};
use crate::tensor::{Scalar, Tensor};
use crate::vit::{self, BlockParams, EncoderConfig, EncoderParams, INIT_STD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    SinVit,
    MulVitTf,
    MulVitTwdnn,
}

/// Named configurations from the reference experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    SinvitD,
    SinvitW,
    MulvitTf,
    MulvitTwdnn,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::SinvitD,
        Preset::SinvitW,
        Preset::MulvitTf,
        Preset::MulvitTwdnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::SinvitD => "sinvit-d",
            Preset::SinvitW => "sinvit-w",
            Preset::MulvitTf => "mulvit-tf",
            Preset::MulvitTwdnn => "mulvit-twdnn",
        }
    }

    pub fn spec(self) -> ModelSpec {
        let enc = |d, depth| EncoderConfig {
            image_height: 240,
            image_width: 320,
            patch_size: 16,
            channels: 3,
            embed_dim: d,
            depth,
            heads: 3,
            ffn_ratio: 4,
        };
        let (architecture, encoders) = match self {
            Preset::SinvitD => (Architecture::SinVit, vec![enc(96, 12)]),
            Preset::SinvitW => (Architecture::SinVit, vec![enc(192, 6)]),
            Preset::MulvitTf => (Architecture::MulVitTf, vec![enc(96, 6), enc(96, 6)]),
            Preset::MulvitTwdnn => (Architecture::MulVitTwdnn, vec![enc(96, 6), enc(96, 6)]),
        };
        let cameras = (0..encoders.len()).collect();
        ModelSpec {
            name: self.name().to_string(),
            architecture,
            encoders,
            cameras,
            fusion_depth: if architecture == Architecture::MulVitTf { 2 } else { 0 },
            fusion_ffn_ratio: 2,
            twdnn_blocks: if architecture == Architecture::MulVitTwdnn { 4 } else { 0 },
            twdnn_hidden: 192,
            head_hidden: 128,
            gelu: GeluMode::Tanh,
            layer_norm_eps: 1e-6,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == norm)
            .ok_or_else(|| Error::Spec(format!("unknown preset {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub architecture: Architecture,
    /// One per camera.
    pub encoders: Vec<EncoderConfig>,
    /// Dataset camera index feeding each encoder.
    pub cameras: Vec<usize>,
    pub fusion_depth: usize,
    pub fusion_ffn_ratio: usize,
    pub twdnn_blocks: usize,
    pub twdnn_hidden: usize,
    /// Hidden width of the head; 0 means a single affine map.
    pub head_hidden: usize,
    pub gelu: GeluMode,
    pub layer_norm_eps: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        for (i, e) in self.encoders.iter().enumerate() {
            if let Err(Error::Config(list)) = e.validate() {
                issues.extend(list.into_iter().map(|m| format!("encoder {i}: {m}")));
            }
        }
        if self.cameras.len() != self.encoders.len() {
            issues.push(format!(
                "{} camera indices for {} encoders",
                self.cameras.len(),
                self.encoders.len()
            ));
        }
        match self.architecture {
            Architecture::SinVit if self.encoders.len() != 1 => {
                issues.push("sinvit takes exactly one encoder".to_string())
            }
            Architecture::MulVitTf | Architecture::MulVitTwdnn => {
                if self.encoders.len() < 2 {
                    issues.push("multi-view variants need at least two encoders".to_string());
                } else {
                    let first = &self.encoders[0];
                    for (i, e) in self.encoders.iter().enumerate().skip(1) {
                        if e.patch_count() != first.patch_count() || e.embed_dim != first.embed_dim {
                            issues.push(format!("encoder {i} differs from encoder 0 in (N, D)"));
                        }
                        if e.heads != first.heads {
                            issues.push(format!("encoder {i} differs from encoder 0 in heads"));
                        }
                    }
                }
            }
            _ => {}
        }
        if self.architecture == Architecture::MulVitTf && self.fusion_ffn_ratio == 0 {
            issues.push("fusion_ffn_ratio must be positive".to_string());
        }
        if self.architecture == Architecture::MulVitTwdnn && self.twdnn_blocks > 0 && self.twdnn_hidden == 0 {
            issues.push("twdnn_hidden must be positive".to_string());
        }
        if !(self.layer_norm_eps > 0.0) {
            issues.push("layer_norm_eps must be positive".to_string());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.encoders[0].embed_dim
    }

    pub fn camera_count(&self) -> usize {
        self.encoders.len()
    }

    /// Width of the head input: `D` for single view, `M·D` otherwise.
    pub fn head_input(&self) -> usize {
        match self.architecture {
            Architecture::SinVit => self.embed_dim(),
            _ => self.encoders.len() * self.embed_dim(),
        }
    }
}

/// Optional replacements for preset fields, e.g. from a training config
/// file. Encoder fields apply to every encoder.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub image_height: Option<usize>,
    pub image_width: Option<usize>,
    pub patch_size: Option<usize>,
    pub embed_dim: Option<usize>,
    pub depth: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_ratio: Option<usize>,
    pub fusion_depth: Option<usize>,
    pub fusion_ffn_ratio: Option<usize>,
    pub twdnn_blocks: Option<usize>,
    pub twdnn_hidden: Option<usize>,
    pub head_hidden: Option<usize>,
    pub cameras: Option<Vec<usize>>,
    pub gelu: Option<GeluMode>,
}

impl ModelSpec {
    /// Apply `o` and validate the result.
    pub fn with_overrides(mut self, o: &ModelOverrides) -> Result<Self> {
        for e in &mut self.encoders {
            e.image_height = o.image_height.unwrap_or(e.image_height);
            e.image_width = o.image_width.unwrap_or(e.image_width);
            e.patch_size = o.patch_size.unwrap_or(e.patch_size);
            e.embed_dim = o.embed_dim.unwrap_or(e.embed_dim);
            e.depth = o.depth.unwrap_or(e.depth);
            e.heads = o.heads.unwrap_or(e.heads);
            e.ffn_ratio = o.ffn_ratio.unwrap_or(e.ffn_ratio);
        }
        let arch = self.architecture;
        if let Some(v) = o.fusion_depth.filter(|_| arch == Architecture::MulVitTf) {
            self.fusion_depth = v;
        }
        self.fusion_ffn_ratio = o.fusion_ffn_ratio.unwrap_or(self.fusion_ffn_ratio);
        if let Some(v) = o.twdnn_blocks.filter(|_| arch == Architecture::MulVitTwdnn) {
            self.twdnn_blocks = v;
        }
        self.twdnn_hidden = o.twdnn_hidden.unwrap_or(self.twdnn_hidden);
        self.head_hidden = o.head_hidden.unwrap_or(self.head_hidden);
        if let Some(c) = &o.cameras {
            self.cameras = c.clone();
        }
        self.gelu = o.gelu.unwrap_or(self.gelu);
        self.validate()?;
        Ok(self)
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub hidden: Option<(ParamId, ParamId)>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct TokenWiseBlock {
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub fc3_w: ParamId,
    pub fc3_b: ParamId,
}

#[derive(Clone, Debug)]
pub enum FusionParams {
    None,
    Transformer(Vec<BlockParams>),
    TokenWise {
        segments: Vec<ParamId>,
        blocks: Vec<TokenWiseBlock>,
    },
}

#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub encoders: Vec<EncoderParams>,
    pub fusion: FusionParams,
    pub head: HeadParams,
}

/// Values produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[1,1]`, in normalized label units.
    pub prediction: Var,
    /// Extracted CLS vectors, `[1, D]` each, one per camera.
    pub cls: Vec<Var>,
    /// Encoder outputs `z_L`, one per camera.
    pub tokens: Vec<Var>,
    /// Concatenated CLS vectors fed to the head.
    pub features: Var,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub layout: ModelLayout,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layout = build_layout(&spec, &mut store, &mut rng);
        Ok(Self {
            spec,
            layout,
            params: store,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    pub fn session(&self, trainable: impl Fn(&ParamEntry<T>) -> bool, training: bool, dropout: f64, seed: u64) -> Session<T> {
        Session::new(
            &self.params,
            trainable,
            ForwardOptions {
                training,
                dropout,
                seed,
                gelu: self.spec.gelu,
                ln_eps: self.spec.layer_norm_eps,
            },
        )
    }

    pub fn inference_session(&self) -> Session<T> {
        Session::inference(&self.params, self.spec.gelu, self.spec.layer_norm_eps)
    }

    /// Dispatch on the architecture. `images` holds one `[C,H,W]` image per
    /// encoder, in encoder order.
    pub fn forward(&self, s: &mut Session<T>, images: &[&Tensor<T>]) -> Result<ForwardOutput> {
        match self.spec.architecture {
            Architecture::SinVit => forward_sinvit(s, images, &self.spec, &self.layout),
            Architecture::MulVitTf => forward_mulvit_tf(s, images, &self.spec, &self.layout),
            Architecture::MulVitTwdnn => forward_twdnn(s, images, &self.spec, &self.layout),
        }
    }

    /// Evaluation-mode prediction in normalized label units.
    pub fn predict(&self, images: &[&Tensor<T>]) -> Result<T> {
        let mut s = self.inference_session();
        let out = self.forward(&mut s, images)?;
        Ok(s.tape.value(out.prediction).data()[0])
    }
}

fn build_layout<T: Scalar>(spec: &ModelSpec, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> ModelLayout {
    let encoders = spec
        .encoders
        .iter()
        .enumerate()
        .map(|(i, cfg)| EncoderParams::register(store, &format!("encoder{i}"), cfg, rng))
        .collect();
    let d = spec.embed_dim();
    let fusion = match spec.architecture {
        Architecture::SinVit => FusionParams::None,
        Architecture::MulVitTf => FusionParams::Transformer(
            (0..spec.fusion_depth)
                .map(|i| {
                    BlockParams::register(
                        store,
                        &format!("fusion.blocks.{i}"),
                        d,
                        spec.fusion_ffn_ratio * d,
                        ParamGroup::Task,
                        rng,
                    )
                })
                .collect(),
        ),
        Architecture::MulVitTwdnn => {
            let segments = (0..spec.encoders.len())
                .map(|i| {
                    store.push(
                        format!("twdnn.segment{i}"),
                        trunc_normal(&[d], INIT_STD, rng),
                        ParamGroup::Task,
                        false,
                    )
                })
                .collect();
            let blocks = (0..spec.twdnn_blocks)
                .map(|i| register_token_wise(store, &format!("twdnn.blocks.{i}"), d, spec.twdnn_hidden, rng))
                .collect();
            FusionParams::TokenWise { segments, blocks }
        }
    };
    let head = register_head(store, spec.head_input(), spec.head_hidden, rng);
    ModelLayout {
        encoders,
        fusion,
        head,
    }
}

fn linear<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> (ParamId, ParamId) {
    let w = store.push(
        format!("{prefix}.weight"),
        trunc_normal(&[fan_in, fan_out], INIT_STD, rng),
        ParamGroup::Task,
        true,
    );
    let b = store.push(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]), ParamGroup::Task, false);
    (w, b)
}

fn register_token_wise<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
    hidden: usize,
    rng: &mut R,
) -> TokenWiseBlock {
    let ln_gamma = store.push(
        format!("{prefix}.norm.weight"),
        Tensor::full(&[d], T::one()),
        ParamGroup::Task,
        false,
    );
    let ln_beta = store.push(format!("{prefix}.norm.bias"), Tensor::zeros(&[d]), ParamGroup::Task, false);
    let (fc1_w, fc1_b) = linear(store, &format!("{prefix}.fc1"), d, hidden, rng);
    let (fc2_w, fc2_b) = linear(store, &format!("{prefix}.fc2"), hidden, hidden, rng);
    let (fc3_w, fc3_b) = linear(store, &format!("{prefix}.fc3"), hidden, d, rng);
    TokenWiseBlock {
        ln_gamma,
        ln_beta,
        fc1_w,
        fc1_b,
        fc2_w,
        fc2_b,
        fc3_w,
        fc3_b,
    }
}

fn register_head<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    input: usize,
    hidden: usize,
    rng: &mut R,
) -> HeadParams {
    if hidden == 0 {
        let (out_w, out_b) = linear(store, "head.out", input, 1, rng);
        return HeadParams {
            hidden: None,
            out_w,
            out_b,
        };
    }
    let fc1 = linear(store, "head.fc1", input, hidden, rng);
    let (out_w, out_b) = linear(store, "head.out", hidden, 1, rng);
    HeadParams {
        hidden: Some(fc1),
        out_w,
        out_b,
    }
}

/// `affine(k→hidden) → GELU → affine(hidden→1)`; no output activation.
pub fn mlp_head<T: Scalar>(s: &mut Session<T>, f: Var, head: &HeadParams) -> Result<Var> {
    let expected = s.tape.shape(s.param(head.hidden.map_or(head.out_w, |(w, _)| w)))[0];
    let (rows, width) = s.tape.value(f).dims2("mlp_head")?;
    if rows != 1 || width != expected {
        return Err(Error::shape("mlp_head", format!("features [{rows},{width}], head expects [1,{expected}]")));
    }
    let mut x = f;
    if let Some((w, b)) = head.hidden {
        x = s.affine(x, w, b)?;
        x = s.gelu(x);
    }
    s.affine(x, head.out_w, head.out_b)
}

fn check_images<T: Scalar>(images: &[&Tensor<T>], spec: &ModelSpec) -> Result<()> {
    if images.len() != spec.encoders.len() {
        return Err(Error::Spec(format!(
            "{} images for {} encoders",
            images.len(),
            spec.encoders.len()
        )));
    }
    Ok(())
}

fn encode_all<T: Scalar>(
    s: &mut Session<T>,
    images: &[&Tensor<T>],
    spec: &ModelSpec,
    layout: &ModelLayout,
) -> Result<Vec<Var>> {
    check_images(images, spec)?;
    images
        .iter()
        .zip(&spec.encoders)
        .zip(&layout.encoders)
        .map(|((img, cfg), p)| vit::encode(s, img, cfg, p))
        .collect()
}

/// Rows `0, N+1, 2(N+1), …` of the fused token matrix.
fn extract_cls<T: Scalar>(s: &mut Session<T>, z: Var, cameras: usize, seq: usize) -> Result<Vec<Var>> {
    (0..cameras).map(|k| s.tape.slice_rows(z, k * seq, 1)).collect()
}

pub fn forward_sinvit<T: Scalar>(
    s: &mut Session<T>,
    images: &[&Tensor<T>],
    spec: &ModelSpec,
    layout: &ModelLayout,
) -> Result<ForwardOutput> {
    if spec.architecture != Architecture::SinVit {
        return Err(Error::Spec("forward_sinvit on a multi-view spec".to_string()));
    }
    let tokens = encode_all(s, images, spec, layout)?;
    let cls = s.tape.slice_rows(tokens[0], 0, 1)?;
    let prediction = mlp_head(s, cls, &layout.head)?;
    Ok(ForwardOutput {
        prediction,
        cls: vec![cls],
        tokens,
        features: cls,
    })
}

pub fn forward_mulvit_tf<T: Scalar>(
    s: &mut Session<T>,
    images: &[&Tensor<T>],
    spec: &ModelSpec,
    layout: &ModelLayout,
) -> Result<ForwardOutput> {
    let FusionParams::Transformer(blocks) = &layout.fusion else {
        return Err(Error::Spec("forward_mulvit_tf needs transformer fusion".to_string()));
    };
    let tokens = encode_all(s, images, spec, layout)?;
    let mut z = s.tape.concat_rows(&tokens)?;
    let heads = spec.encoders[0].heads;
    for bp in blocks {
        z = vit::transformer_block(s, z, bp, heads)?;
    }
    let cls = extract_cls(s, z, tokens.len(), spec.encoders[0].seq_len())?;
    let features = s.tape.concat_cols(&cls)?;
    let prediction = mlp_head(s, features, &layout.head)?;
    Ok(ForwardOutput {
        prediction,
        cls,
        tokens,
        features,
    })
}

pub fn forward_twdnn<T: Scalar>(
    s: &mut Session<T>,
    images: &[&Tensor<T>],
    spec: &ModelSpec,
    layout: &ModelLayout,
) -> Result<ForwardOutput> {
    let FusionParams::TokenWise { segments, blocks } = &layout.fusion else {
        return Err(Error::Spec("forward_twdnn needs token-wise fusion".to_string()));
    };
    let tokens = encode_all(s, images, spec, layout)?;
    let tagged = tokens
        .iter()
        .zip(segments)
        .map(|(&z, &seg)| {
            let seg = s.param(seg);
            s.tape.add_row_bias(z, seg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut z = s.tape.concat_rows(&tagged)?;
    for b in blocks {
        let h = s.layer_norm(z, b.ln_gamma, b.ln_beta)?;
        let h = s.affine(h, b.fc1_w, b.fc1_b)?;
        let h = s.gelu(h);
        let h = s.affine(h, b.fc2_w, b.fc2_b)?;
        let h = s.gelu(h);
        let h = s.affine(h, b.fc3_w, b.fc3_b)?;
        let h = s.dropout(h)?;
        z = s.tape.add(z, h)?;
    }
    let cls = extract_cls(s, z, tokens.len(), spec.encoders[0].seq_len())?;
    let features = s.tape.concat_cols(&cls)?;
    let prediction = mlp_head(s, features, &layout.head)?;
    Ok(ForwardOutput {
        prediction,
        cls,
        tokens,
        features,
    })
}
