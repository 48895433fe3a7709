//! The tangent-image saliency transformer.
//!
//! A clip of F ERP frames is projected onto T tangent planes, each patch is
//! reduced to a viewport token by a frozen conv encoder, a learnable
//! spherical position embedding is added, and `depth` attention blocks mix
//! tokens. The last frame's tokens are decoded per plane and blended back
//! onto the sphere.

mod attention;
mod decoder;
mod encoder;
mod fusion;

pub use attention::{attention_pair_count, AttentionScheme};
pub use decoder::UPSAMPLE_STAGES;
pub use encoder::Encoder;
pub use fusion::{ema_baseline, entropy, late_fuse, seam_discrepancy};

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{
    angular_coordinate_maps, backprojection_matrix, build_forward_grid, build_inverse_grid,
    project_erp_to_tangent, ForwardGrid, GeomError, GridCache, InverseGrid, OverlapWeights,
    TangentLayout,
};
use crate::raster::ErpImage;
use crate::tensor::{read_checkpoint, write_checkpoint, Graph, NamedTensor, SparseMatrix, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("fusion: {0}")]
    Fusion(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Temporal window F.
    pub frames: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub patch_px: usize,
    pub feat_hw: usize,
    pub decoder_out: usize,
    pub in_channels: usize,
    pub mlp_ratio: usize,
    pub rotary_base: f64,
    pub ln_eps: f64,
    pub scheme: AttentionScheme,
    pub rotary: bool,
    pub pos_embed: bool,
    /// Start attention/MLP output projections at zero.
    pub zero_init_out: bool,
    /// Start the position-embedding projection at zero.
    pub zero_init_pos: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            dim: 64,
            heads: 4,
            depth: 2,
            patch_px: 32,
            feat_hw: 4,
            decoder_out: 32,
            in_channels: 3,
            mlp_ratio: 4,
            rotary_base: 10_000.0,
            ln_eps: 1e-5,
            scheme: AttentionScheme::Vsta,
            rotary: true,
            pos_embed: true,
            zero_init_out: false,
            zero_init_pos: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Full-size configuration: 224 px patches, 7x7 features, six blocks of
    /// width 512 with 8 heads over 8-frame windows.
    pub fn paper() -> Self {
        Self {
            frames: 8,
            dim: 512,
            heads: 8,
            depth: 6,
            patch_px: 224,
            feat_hw: 7,
            decoder_out: 56,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.frames == 0 || self.depth == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return fail("frames, depth, heads and mlp_ratio must be positive".into());
        }
        if self.dim % self.heads != 0 || (self.dim / self.heads) % 2 != 0 {
            return fail(format!(
                "dim {} must split into {} heads of even width",
                self.dim, self.heads
            ));
        }
        if self.dim % 8 != 0 {
            return fail(format!("dim {} must be divisible by 8", self.dim));
        }
        if self.decoder_out != self.feat_hw << UPSAMPLE_STAGES {
            return fail(format!(
                "decoder_out {} must be feat_hw {} x {}",
                self.decoder_out,
                self.feat_hw,
                1 << UPSAMPLE_STAGES
            ));
        }
        if encoder::downsample_steps(self.patch_px, self.feat_hw).is_none() {
            return fail(format!(
                "patch {} is not feat_hw {} times a power of two",
                self.patch_px, self.feat_hw
            ));
        }
        if self.in_channels == 0 {
            return fail("in_channels must be positive".into());
        }
        Ok(())
    }
}

/// Trainable parameters in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Params {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, name: String, t: Tensor) {
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Adds every parameter to `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound<'_> {
        let vars = self
            .values
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect();
        Bound { params: self, vars }
    }

    /// Binds caller-made graph handles, one per parameter in order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Bound<'_> {
        assert_eq!(vars.len(), self.len(), "one handle per parameter");
        Bound { params: self, vars }
    }

    /// Gradients of bound parameters; zeros where no gradient reached.
    pub fn grads(&self, g: &Graph, bound: &Bound<'_>) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .zip(&self.values)
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Graph handles for a [`Params`] set.
pub struct Bound<'a> {
    params: &'a Params,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Var {
        let i = self.params.index.get(name).unwrap_or_else(|| panic!("no parameter {name}"));
        self.vars[*i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Runtime counters for one forward pass.
#[derive(Debug, Default)]
pub struct Instrument {
    /// (query, key) pairs scored, summed over heads-independent groups.
    pub pairs: u64,
    /// Record each attention-weight tensor (groups * heads, L, L).
    pub record_attention: bool,
    pub attention: Vec<Var>,
}

/// A layout prepared for one ERP size: resampling grids, the
/// backprojection operator and the pooled angular inputs of the position
/// embedding.
static SETS_BUILT: AtomicU64 = AtomicU64::new(0);

pub struct TangentSet {
    pub layout: TangentLayout,
    pub erp_h: usize,
    pub erp_w: usize,
    pub forward: ForwardGrid,
    /// Inverse grid at the decoder's output resolution.
    pub inverse: InverseGrid,
    pub weights: OverlapWeights,
    pub backprojection: Arc<SparseMatrix>,
    /// (T, 2 * feat_hw^2): pooled latitude block then pooled longitude block.
    pub pos_input: Tensor,
}

impl TangentSet {
    pub fn new(layout: &TangentLayout, cfg: &ModelConfig, erp_h: usize, erp_w: usize) -> Result<Self> {
        Self::build(layout, cfg, erp_h, erp_w, None)
    }

    pub fn with_cache(
        layout: &TangentLayout,
        cfg: &ModelConfig,
        erp_h: usize,
        erp_w: usize,
        cache: &GridCache,
    ) -> Result<Self> {
        Self::build(layout, cfg, erp_h, erp_w, Some(cache))
    }

    /// Tangent sets constructed so far in this process.
    pub fn constructed() -> u64 {
        SETS_BUILT.load(Ordering::Relaxed)
    }

    fn build(
        layout: &TangentLayout,
        cfg: &ModelConfig,
        erp_h: usize,
        erp_w: usize,
        cache: Option<&GridCache>,
    ) -> Result<Self> {
        if layout.patch_px() != cfg.patch_px {
            return Err(ModelError::Config(format!(
                "layout patch {} differs from model patch {}",
                layout.patch_px(),
                cfg.patch_px
            )));
        }
        let out_layout = layout.with_patch(cfg.decoder_out)?;
        let (forward, inverse) = match cache {
            Some(c) => (c.forward(layout, erp_h, erp_w)?, c.inverse(&out_layout, erp_h, erp_w)?),
            None => (
                build_forward_grid(layout, erp_h, erp_w)?,
                build_inverse_grid(&out_layout, erp_h, erp_w)?.0,
            ),
        };
        let weights = inverse.weights(crate::geom::WeightMode::Normalized);
        let backprojection = Arc::new(backprojection_matrix(&inverse, &weights)?);
        let pos_input = pooled_angles(&angular_coordinate_maps(layout), cfg.feat_hw)?;
        SETS_BUILT.fetch_add(1, Ordering::Relaxed);
        Ok(Self {
            layout: layout.clone(),
            erp_h,
            erp_w,
            forward,
            inverse,
            weights,
            backprojection,
            pos_input,
        })
    }

    pub fn planes(&self) -> usize {
        self.layout.planes()
    }

    pub fn covered_mask(&self) -> Vec<bool> {
        self.inverse.covered_mask()
    }
}

/// Pools (T, 2, p, p) angular maps to (T, 2 * s^2): plain mean for
/// latitude, circular mean for longitude.
pub fn pooled_angles(maps: &Tensor, s: usize) -> Result<Tensor> {
    let &[t, two, p, p2] = maps.shape() else {
        return Err(ModelError::Config(format!("angular maps shape {:?}", maps.shape())));
    };
    if two != 2 || p != p2 || s == 0 || p % s != 0 {
        return Err(ModelError::Config(format!(
            "angular maps {:?} cannot pool to {s}x{s}",
            maps.shape()
        )));
    }
    let k = p / s;
    let d = maps.data();
    let mut out = Vec::with_capacity(t * 2 * s * s);
    for plane in 0..t {
        let phi = &d[(plane * 2) * p * p..(plane * 2 + 1) * p * p];
        let theta = &d[(plane * 2 + 1) * p * p..(plane * 2 + 2) * p * p];
        let cells = |f: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
            (0..s * s).map(|c| f(c / s, c % s)).collect()
        };
        let block = |r: usize, c: usize| (0..k * k).map(move |q| (r * k + q / k) * p + c * k + q % k);
        out.extend(cells(&|r, c| block(r, c).map(|i| phi[i]).sum::<f64>() / (k * k) as f64));
        out.extend(cells(&|r, c| {
            let (sn, cs) = block(r, c).fold((0.0, 0.0), |(a, b), i| {
                let (sv, cv) = theta[i].sin_cos();
                (a + sv, b + cv)
            });
            sn.atan2(cs)
        }));
    }
    Ok(Tensor::new(vec![t, 2 * s * s], out)?)
}

/// Frozen-encoder outputs for one F-frame window.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    /// (F, T, D)
    pub tokens: Tensor,
    /// Last frame's feature maps (T, D, feat_hw, feat_hw).
    pub skip: Tensor,
}

pub struct SalVit {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub params: Params,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let n = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| n.sample(rng))
}

impl SalVit {
    /// Randomly initialises encoder and trainable weights from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut enc_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xe1c0_de00);
        let encoder = Encoder::new(&config, &mut enc_rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = Params::new();
        let d = config.dim;
        let fh2 = 2 * config.feat_hw * config.feat_hw;
        let pos_std = if config.zero_init_pos { 0.0 } else { 0.02 };
        if config.pos_embed {
            p.insert("pos.weight".into(), normal_tensor(&mut rng, &[fh2, d], pos_std));
            p.insert("pos.bias".into(), Tensor::zeros(&[d]));
        }
        let lin_std = (1.0 / d as f64).sqrt();
        let out_std = if config.zero_init_out { 0.0 } else { lin_std };
        for i in 0..config.depth {
            for stage in config.scheme.stages() {
                let pre = format!("blocks.{i}.{stage}");
                p.insert(format!("{pre}.ln.gamma"), Tensor::ones(&[d]));
                p.insert(format!("{pre}.ln.beta"), Tensor::zeros(&[d]));
                for m in ["q", "k", "v"] {
                    p.insert(format!("{pre}.w{m}"), normal_tensor(&mut rng, &[d, d], lin_std));
                    p.insert(format!("{pre}.b{m}"), Tensor::zeros(&[d]));
                }
                p.insert(format!("{pre}.wo"), normal_tensor(&mut rng, &[d, d], out_std));
                p.insert(format!("{pre}.bo"), Tensor::zeros(&[d]));
            }
            let pre = format!("blocks.{i}.mlp");
            let hid = d * config.mlp_ratio;
            p.insert(format!("{pre}.ln.gamma"), Tensor::ones(&[d]));
            p.insert(format!("{pre}.ln.beta"), Tensor::zeros(&[d]));
            p.insert(format!("{pre}.w1"), normal_tensor(&mut rng, &[d, hid], lin_std));
            p.insert(format!("{pre}.b1"), Tensor::zeros(&[hid]));
            let w2_std = if config.zero_init_out { 0.0 } else { (1.0 / hid as f64).sqrt() };
            p.insert(format!("{pre}.w2"), normal_tensor(&mut rng, &[hid, d], w2_std));
            p.insert(format!("{pre}.b2"), Tensor::zeros(&[d]));
        }
        let w = decoder::widths(&config);
        for s in 0..=UPSAMPLE_STAGES {
            let (cin, cout) = (w[s.min(UPSAMPLE_STAGES)], w[(s + 1).min(UPSAMPLE_STAGES)]);
            let std = (2.0 / (cin * 9) as f64).sqrt();
            p.insert(format!("decoder.{s}.weight"), normal_tensor(&mut rng, &[cout, cin, 3, 3], std));
            p.insert(format!("decoder.{s}.bias"), Tensor::zeros(&[cout]));
        }
        let c = w[UPSAMPLE_STAGES];
        p.insert(
            "decoder.out.weight".into(),
            normal_tensor(&mut rng, &[1, c, 1, 1], (1.0 / c as f64).sqrt()),
        );
        p.insert("decoder.out.bias".into(), Tensor::zeros(&[1]));
        Ok(Self {
            config,
            encoder,
            params: p,
        })
    }

    pub fn tangent_set(&self, layout: &TangentLayout, erp_h: usize, erp_w: usize) -> Result<TangentSet> {
        TangentSet::new(layout, &self.config, erp_h, erp_w)
    }

    /// Projects and encodes a window of exactly F frames.
    pub fn encode_clip(&self, frames: &[ErpImage], set: &TangentSet) -> Result<Encoded> {
        let cfg = &self.config;
        if frames.len() != cfg.frames {
            return Err(ModelError::Config(format!(
                "window has {} frames, model expects {}",
                frames.len(),
                cfg.frames
            )));
        }
        let t = set.planes();
        let (d, fh) = (cfg.dim, cfg.feat_hw);
        let mut tokens = Vec::with_capacity(cfg.frames * t * d);
        let mut skip = Tensor::zeros(&[t, d, fh, fh]);
        for (i, frame) in frames.iter().enumerate() {
            let frame = match_channels(frame, cfg.in_channels)?;
            let stack = project_erp_to_tangent(&frame, &set.forward)?;
            let (tok, maps) = self.encoder.encode(&stack)?;
            tokens.extend_from_slice(tok.data());
            if i + 1 == frames.len() {
                skip = maps;
            }
        }
        Ok(Encoded {
            tokens: Tensor::new(vec![cfg.frames, t, d], tokens)?,
            skip,
        })
    }

    /// Position embedding for a tangent set's planes, (T, D).
    pub fn position_embedding(&self, g: &mut Graph, b: &Bound<'_>, set: &TangentSet) -> Result<Option<Var>> {
        if !self.config.pos_embed {
            return Ok(None);
        }
        let x = g.constant(set.pos_input.clone());
        Ok(Some(g.linear(x, b.get("pos.weight"), Some(b.get("pos.bias")))?))
    }

    /// Runs the attention blocks over tokens (F, T, D).
    pub fn transformer(&self, g: &mut Graph, b: &Bound<'_>, tokens: Var, instr: &mut Instrument) -> Result<Var> {
        let mut x = tokens;
        for i in 0..self.config.depth {
            x = attention::block(g, b, i, x, &self.config, instr)?;
        }
        Ok(x)
    }

    /// Per-plane saliency (T, decoder_out, decoder_out) for the window's
    /// last frame.
    pub fn forward_tangent(
        &self,
        g: &mut Graph,
        b: &Bound<'_>,
        enc: &Encoded,
        set: &TangentSet,
        instr: &mut Instrument,
    ) -> Result<Var> {
        let cfg = &self.config;
        let [f, t, d] = [enc.tokens.shape()[0], enc.tokens.shape()[1], enc.tokens.shape()[2]];
        if t != set.planes() {
            return Err(ModelError::Config(format!(
                "encoded {t} planes, tangent set has {}",
                set.planes()
            )));
        }
        let mut x = g.constant(enc.tokens.clone());
        if let Some(pe) = self.position_embedding(g, b, set)? {
            x = g.add(x, pe)?;
        }
        let x = self.transformer(g, b, x, instr)?;
        let last = g.slice(x, 0, f - 1, 1)?;
        let last = g.reshape(last, &[t, d])?;
        let skip = g.constant(enc.skip.clone());
        decoder::decode(g, b, cfg, last, skip)
    }

    /// Blends per-plane maps onto the ERP raster and normalises to sum 1
    /// over covered pixels; output (H, W).
    pub fn backproject(&self, g: &mut Graph, tangent: Var, set: &TangentSet) -> Result<Var> {
        let erp = g.sparse_map(tangent, Arc::clone(&set.backprojection), &[set.erp_h, set.erp_w])?;
        let total = g.sum(erp);
        Ok(g.div(erp, total)?)
    }

    /// Full pipeline from a window of frames to a normalised ERP map (H, W).
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound<'_>,
        enc: &Encoded,
        set: &TangentSet,
        instr: &mut Instrument,
    ) -> Result<Var> {
        let tangent = self.forward_tangent(g, b, enc, set, instr)?;
        self.backproject(g, tangent, set)
    }

    /// Inference: ERP saliency for the last frame plus the per-plane maps.
    pub fn predict(&self, frames: &[ErpImage], set: &TangentSet) -> Result<Prediction> {
        let enc = self.encode_clip(frames, set)?;
        self.predict_encoded(&enc, set)
    }

    pub fn predict_encoded(&self, enc: &Encoded, set: &TangentSet) -> Result<Prediction> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let mut instr = Instrument::default();
        let tangent = self.forward_tangent(&mut g, &b, enc, set, &mut instr)?;
        let erp = self.backproject(&mut g, tangent, set)?;
        let map = ErpImage::new(1, set.erp_h, set.erp_w, g.value(erp).data().to_vec())?;
        Ok(Prediction {
            erp: map,
            tangent: g.value(tangent).clone(),
            pairs: instr.pairs,
        })
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        let mut out = self.encoder.named_tensors();
        out.extend(self.params.names.iter().zip(&self.params.values).map(|(n, t)| NamedTensor {
            name: n.clone(),
            tensor: t.clone(),
        }));
        out
    }

    /// Writes encoder and trainable weights; the config goes to a JSON file
    /// alongside (`<path>.json`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = BufWriter::new(fs::File::create(path)?);
        write_checkpoint(f, &self.named_tensors())?;
        let cfg = serde_json::to_string_pretty(&self.config).expect("config serializes");
        fs::write(config_path(path), cfg)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`SalVit::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let cfg_text = fs::read_to_string(config_path(path))?;
        let config: ModelConfig = serde_json::from_str(&cfg_text)
            .map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
        let tensors = read_checkpoint(BufReader::new(fs::File::open(path)?))?;
        Self::from_tensors(config, &tensors)
    }

    pub fn from_tensors(config: ModelConfig, tensors: &[NamedTensor]) -> Result<Self> {
        let mut model = Self::new(config)?;
        model.encoder.load(tensors)?;
        let expected = model.encoder.named_tensors().len() + model.params.len();
        if tensors.len() != expected {
            return Err(ModelError::Checkpoint(format!(
                "{} tensors, expected {expected}",
                tensors.len()
            )));
        }
        for (name, slot) in model.params.names.iter().zip(model.params.values.iter_mut()) {
            let t = tensors
                .iter()
                .find(|t| &t.name == name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing {name}")))?;
            if t.tensor.shape() != slot.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = t.tensor.clone();
        }
        Ok(model)
    }
}

pub fn config_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut s = checkpoint.as_os_str().to_os_string();
    s.push(".json");
    s.into()
}

fn match_channels(frame: &ErpImage, channels: usize) -> Result<std::borrow::Cow<'_, ErpImage>> {
    use std::borrow::Cow;
    match (frame.channels(), channels) {
        (a, b) if a == b => Ok(Cow::Borrowed(frame)),
        (1, c) => {
            let data = frame.data().repeat(c);
            Ok(Cow::Owned(ErpImage::new(c, frame.height(), frame.width(), data)?))
        }
        (3, 1) => {
            let n = frame.height() * frame.width();
            let d = frame.data();
            let grey = (0..n).map(|i| (d[i] + d[n + i] + d[2 * n + i]) / 3.0).collect();
            Ok(Cow::Owned(ErpImage::new(1, frame.height(), frame.width(), grey)?))
        }
        (a, b) => Err(ModelError::Config(format!("frame has {a} channels, model expects {b}"))),
    }
}

/// Output of [`SalVit::predict`].
#[derive(Clone, Debug)]
pub struct Prediction {
    pub erp: ErpImage,
    /// (T, decoder_out, decoder_out)
    pub tangent: Tensor,
    pub pairs: u64,
}
