//! Encoder stack: phonetic attention in the lower layers, vanilla attention
//! above, positional encoding only when a vanilla layer exists.
//!
//! Each layer is a plain pre-norm transformer block (normalize, block,
//! residual add) with a two-layer Swish feed-forward. Only the attention
//! score function differs between the lower and upper parts of the stack,
//! so any quality difference is attributable to the score variant.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    multi_head_forward_ablated, xavier, MultiHeadParams, TermDrop, VariantId,
};
use crate::error::{Error, Result};
use crate::numeric::{real, Matrix, Scalar, Tape, ValueId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_h: usize,
    pub ffn_dim: usize,
    /// Lower layers running the phonetic variant (M5); the rest run
    /// `variant_for_upper`.
    pub num_phsa_layers: usize,
    pub variant_for_upper: VariantId,
    /// Sinusoidal absolute PE, added once before layer 1, and only when at
    /// least one non-phonetic layer exists.
    pub use_abs_pe: bool,
    /// Divide variant scores by sqrt(d_h) before softmax.
    pub scale_scores: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 4,
            num_heads: 4,
            d_model: 64,
            d_h: 16,
            ffn_dim: 128,
            num_phsa_layers: 2,
            variant_for_upper: VariantId::M2,
            use_abs_pe: true,
            scale_scores: true,
            seed: 7,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.num_heads * self.d_h {
            return Err(Error::Config(format!(
                "d_model {} must equal num_heads {} x d_h {}",
                self.d_model, self.num_heads, self.d_h
            )));
        }
        if self.num_phsa_layers > self.num_layers {
            return Err(Error::Config(format!(
                "num_phsa_layers {} exceeds num_layers {}",
                self.num_phsa_layers, self.num_layers
            )));
        }
        if self.num_layers > 0 && (self.d_model == 0 || self.ffn_dim == 0 || self.num_heads == 0) {
            return Err(Error::Config("zero-sized layer dimension".to_string()));
        }
        Ok(())
    }

    pub fn layer_variant(&self, layer: usize) -> VariantId {
        if layer < self.num_phsa_layers {
            VariantId::M5
        } else {
            self.variant_for_upper
        }
    }

    /// PE applies only when some layer still uses positional information.
    pub fn applies_pe(&self) -> bool {
        self.use_abs_pe && self.num_phsa_layers < self.num_layers
    }
}

#[derive(Clone, Debug)]
pub struct NormParams<T> {
    pub gain: T,
    pub bias: T,
}

impl<T> NormParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> NormParams<U> {
        NormParams {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FfnParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> FfnParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> FfnParams<U> {
        FfnParams {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerParams<T> {
    pub norm_attn: NormParams<T>,
    pub attn: MultiHeadParams<T>,
    pub norm_ffn: NormParams<T>,
    pub ffn: FfnParams<T>,
}

impl<T> LayerParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> LayerParams<U> {
        LayerParams {
            norm_attn: self.norm_attn.map(&mut f),
            attn: self.attn.map(&mut f),
            norm_ffn: self.norm_ffn.map(&mut f),
            ffn: self.ffn.map(&mut f),
        }
    }

    pub fn for_each(&self, mut f: impl FnMut(String, &T)) {
        f("norm_attn.gain".to_string(), &self.norm_attn.gain);
        f("norm_attn.bias".to_string(), &self.norm_attn.bias);
        for (h, head) in self.attn.heads.iter().enumerate() {
            head.for_each(|name, t| f(format!("head{h}.{name}"), t));
        }
        f("attn.w_o".to_string(), &self.attn.w_o);
        f("attn.b_o".to_string(), &self.attn.b_o);
        f("norm_ffn.gain".to_string(), &self.norm_ffn.gain);
        f("norm_ffn.bias".to_string(), &self.norm_ffn.bias);
        f("ffn.w1".to_string(), &self.ffn.w1);
        f("ffn.b1".to_string(), &self.ffn.b1);
        f("ffn.w2".to_string(), &self.ffn.w2);
        f("ffn.b2".to_string(), &self.ffn.b2);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(String, &mut T)) {
        f("norm_attn.gain".to_string(), &mut self.norm_attn.gain);
        f("norm_attn.bias".to_string(), &mut self.norm_attn.bias);
        for (h, head) in self.attn.heads.iter_mut().enumerate() {
            head.for_each_mut(|name, t| f(format!("head{h}.{name}"), t));
        }
        f("attn.w_o".to_string(), &mut self.attn.w_o);
        f("attn.b_o".to_string(), &mut self.attn.b_o);
        f("norm_ffn.gain".to_string(), &mut self.norm_ffn.gain);
        f("norm_ffn.bias".to_string(), &mut self.norm_ffn.bias);
        f("ffn.w1".to_string(), &mut self.ffn.w1);
        f("ffn.b1".to_string(), &mut self.ffn.b1);
        f("ffn.w2".to_string(), &mut self.ffn.w2);
        f("ffn.b2".to_string(), &mut self.ffn.b2);
    }

    /// Trainables under the given score variant, in a fixed order shared by
    /// the optimizer, checkpointing, and gradient checks.
    pub fn for_each_trainable(&self, variant: VariantId, mut f: impl FnMut(String, &T)) {
        f("norm_attn.gain".to_string(), &self.norm_attn.gain);
        f("norm_attn.bias".to_string(), &self.norm_attn.bias);
        for (h, head) in self.attn.heads.iter().enumerate() {
            head.for_each_trainable(variant, |name, t| f(format!("head{h}.{name}"), t));
        }
        f("attn.w_o".to_string(), &self.attn.w_o);
        f("attn.b_o".to_string(), &self.attn.b_o);
        f("norm_ffn.gain".to_string(), &self.norm_ffn.gain);
        f("norm_ffn.bias".to_string(), &self.norm_ffn.bias);
        f("ffn.w1".to_string(), &self.ffn.w1);
        f("ffn.b1".to_string(), &self.ffn.b1);
        f("ffn.w2".to_string(), &self.ffn.w2);
        f("ffn.b2".to_string(), &self.ffn.b2);
    }

    pub fn for_each_trainable_mut(
        &mut self,
        variant: VariantId,
        mut f: impl FnMut(String, &mut T),
    ) {
        f("norm_attn.gain".to_string(), &mut self.norm_attn.gain);
        f("norm_attn.bias".to_string(), &mut self.norm_attn.bias);
        for (h, head) in self.attn.heads.iter_mut().enumerate() {
            head.for_each_trainable_mut(variant, |name, t| f(format!("head{h}.{name}"), t));
        }
        f("attn.w_o".to_string(), &mut self.attn.w_o);
        f("attn.b_o".to_string(), &mut self.attn.b_o);
        f("norm_ffn.gain".to_string(), &mut self.norm_ffn.gain);
        f("norm_ffn.bias".to_string(), &mut self.norm_ffn.bias);
        f("ffn.w1".to_string(), &mut self.ffn.w1);
        f("ffn.b1".to_string(), &mut self.ffn.b1);
        f("ffn.w2".to_string(), &mut self.ffn.w2);
        f("ffn.b2".to_string(), &mut self.ffn.b2);
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> EncoderParams<U> {
        EncoderParams {
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
        }
    }

    pub fn for_each(&self, mut f: impl FnMut(String, &T)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.for_each(|name, t| f(format!("layer{i}.{name}"), t));
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(String, &mut T)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.for_each_mut(|name, t| f(format!("layer{i}.{name}"), t));
        }
    }

    pub fn for_each_trainable(&self, cfg: &EncoderConfig, mut f: impl FnMut(String, &T)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.for_each_trainable(cfg.layer_variant(i), |name, t| {
                f(format!("layer{i}.{name}"), t)
            });
        }
    }

    pub fn for_each_trainable_mut(
        &mut self,
        cfg: &EncoderConfig,
        mut f: impl FnMut(String, &mut T),
    ) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.for_each_trainable_mut(cfg.layer_variant(i), |name, t| {
                f(format!("layer{i}.{name}"), t)
            });
        }
    }
}

fn init_norm<F: Scalar>(d: usize) -> NormParams<Matrix<F>> {
    NormParams {
        gain: Matrix::filled(1, d, F::one()),
        bias: Matrix::zeros(1, d),
    }
}

fn init_layer<F: Scalar>(
    cfg: &EncoderConfig,
    variant: VariantId,
    rng: &mut impl Rng,
) -> LayerParams<Matrix<F>> {
    LayerParams {
        norm_attn: init_norm(cfg.d_model),
        attn: MultiHeadParams::init(variant, cfg.d_model, cfg.num_heads, cfg.d_h, rng),
        norm_ffn: init_norm(cfg.d_model),
        ffn: FfnParams {
            w1: xavier(cfg.d_model, cfg.ffn_dim, rng),
            b1: Matrix::zeros(1, cfg.ffn_dim),
            w2: xavier(cfg.ffn_dim, cfg.d_model, rng),
            b2: Matrix::zeros(1, cfg.d_model),
        },
    }
}

impl<F: Scalar> EncoderParams<Matrix<F>> {
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self::init_with_rng(cfg, &mut rng)
    }

    /// Initialization drawing from a caller-owned stream, so a surrounding
    /// model can keep all of its parameters on one seed.
    pub fn init_with_rng(cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(EncoderParams {
            layers: (0..cfg.num_layers)
                .map(|i| init_layer(cfg, cfg.layer_variant(i), rng))
                .collect(),
        })
    }

    pub fn stage(&self, tape: &mut Tape<F>) -> EncoderParams<ValueId> {
        self.map(|m| tape.leaf(m.clone()))
    }
}

/// Classic fixed sinusoidal position table, T x d_model.
pub fn sinusoidal_pe<F: Scalar>(t: usize, d_model: usize) -> Matrix<F> {
    Matrix::from_fn(t, d_model, |pos, j| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d_model as f64);
        real(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Adds the position table when the config calls for it; otherwise returns
/// the input unchanged.
pub fn apply_positional_encoding<F: Scalar>(
    cfg: &EncoderConfig,
    x: &Matrix<F>,
) -> Result<Matrix<F>> {
    if cfg.applies_pe() {
        x.add(&sinusoidal_pe(x.rows(), x.cols()))
    } else {
        Ok(x.clone())
    }
}

/// Attention maps of one forward pass, `maps[layer][head]`, upcast to
/// check-grade for analysis.
pub type CollectedMaps = Vec<Vec<Matrix<f64>>>;

fn layer_forward<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &EncoderConfig,
    layer_index: usize,
    params: &LayerParams<ValueId>,
    x: ValueId,
    drop: Option<TermDrop>,
) -> Result<(ValueId, Vec<ValueId>)> {
    let variant = cfg.layer_variant(layer_index);
    let drop_here = if layer_index < cfg.num_phsa_layers {
        drop
    } else {
        None
    };

    let normed = tape.layer_norm_rows(x, params.norm_attn.gain, params.norm_attn.bias)?;
    let (attn_out, maps) = multi_head_forward_ablated(
        tape,
        variant,
        normed,
        &params.attn,
        cfg.scale_scores,
        drop_here,
    )?;
    let x = tape.add(x, attn_out)?;

    let normed = tape.layer_norm_rows(x, params.norm_ffn.gain, params.norm_ffn.bias)?;
    let h = tape.matmul(normed, params.ffn.w1)?;
    let h = tape.add_row_broadcast(h, params.ffn.b1)?;
    let h = tape.swish(h);
    let h = tape.matmul(h, params.ffn.w2)?;
    let ffn_out = tape.add_row_broadcast(h, params.ffn.b2)?;
    let x = tape.add(x, ffn_out)?;
    Ok((x, maps))
}

/// Tape-level encoder body. The caller owns positional encoding (see
/// [`apply_positional_encoding`]); training reuses this with parameter
/// leaves it wants gradients for.
pub fn encode_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &EncoderConfig,
    params: &EncoderParams<ValueId>,
    x: ValueId,
    collect_maps: bool,
    drop: Option<TermDrop>,
) -> Result<(ValueId, Option<Vec<Vec<ValueId>>>)> {
    cfg.validate()?;
    if tape.value(x).cols() != cfg.d_model {
        return Err(Error::ShapeMismatch {
            op: "encoder_forward",
            lhs: tape.value(x).shape(),
            rhs: (cfg.d_model, cfg.d_model),
        });
    }
    if params.layers.len() != cfg.num_layers {
        return Err(Error::Config(format!(
            "parameter set has {} layers, config expects {}",
            params.layers.len(),
            cfg.num_layers
        )));
    }
    let mut h = x;
    let mut collected = collect_maps.then(Vec::new);
    for (i, layer) in params.layers.iter().enumerate() {
        let (next, maps) = layer_forward(tape, cfg, i, layer, h, drop)?;
        h = next;
        if let Some(all) = collected.as_mut() {
            all.push(maps);
        }
    }
    Ok((h, collected))
}

fn run_eager<F: Scalar>(
    cfg: &EncoderConfig,
    params: &EncoderParams<Matrix<F>>,
    x: &Matrix<F>,
    collect_maps: bool,
    drop: Option<TermDrop>,
) -> Result<(Matrix<F>, Option<CollectedMaps>)> {
    let embedded = apply_positional_encoding(cfg, x)?;
    let mut tape = Tape::new();
    let xid = tape.leaf(embedded);
    let staged = params.stage(&mut tape);
    let (out, maps) = encode_on_tape(&mut tape, cfg, &staged, xid, collect_maps, drop)?;
    let features = tape.value(out).clone();
    let maps = maps.map(|layers| {
        layers
            .into_iter()
            .map(|heads| {
                heads
                    .into_iter()
                    .map(|id| tape.value(id).to_f64())
                    .collect()
            })
            .collect()
    });
    Ok((features, maps))
}

/// Full encoder pass over one utterance, with optional attention-map
/// collection.
pub fn encoder_forward<F: Scalar>(
    cfg: &EncoderConfig,
    params: &EncoderParams<Matrix<F>>,
    x: &Matrix<F>,
    collect_maps: bool,
) -> Result<(Matrix<F>, Option<CollectedMaps>)> {
    run_eager(cfg, params, x, collect_maps, None)
}

/// Replays a trained model with one score term of every phonetic layer
/// zeroed; parameters are untouched and upper layers run as usual.
pub fn term_ablated_forward<F: Scalar>(
    cfg: &EncoderConfig,
    params: &EncoderParams<Matrix<F>>,
    x: &Matrix<F>,
    drop: TermDrop,
    collect_maps: bool,
) -> Result<(Matrix<F>, Option<CollectedMaps>)> {
    if cfg.num_phsa_layers == 0 {
        return Err(Error::Config(
            "term ablation requires at least one phonetic layer".to_string(),
        ));
    }
    run_eager(cfg, params, x, collect_maps, Some(drop))
}

/// Layer flavor for parameter accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Vanilla attention with the full bias set (query, key, value).
    Vanilla,
    /// Phonetic attention: no query/key biases; adds the content projection,
    /// content bias, and PReLU slopes.
    Phonetic,
}

#[derive(Clone, Debug)]
pub struct ParamCount {
    pub kind: LayerKind,
    pub components: Vec<(&'static str, usize)>,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.components.iter().map(|(_, n)| n).sum()
    }

    pub fn component(&self, name: &str) -> usize {
        self.components
            .iter()
            .filter(|(n, _)| *n == name)
            .map(|(_, v)| v)
            .sum()
    }
}

/// Parameter count of one encoder layer, split by component. Positional
/// tables are excluded; the sinusoidal table is parameter-free anyway.
pub fn layer_param_count(
    kind: LayerKind,
    d_model: usize,
    num_heads: usize,
    d_h: usize,
    ffn_dim: usize,
) -> ParamCount {
    let mut components = vec![
        ("attn.projections", num_heads * 3 * d_model * d_h),
        ("attn.value_bias", num_heads * d_h),
    ];
    match kind {
        LayerKind::Vanilla => {
            components.push(("attn.query_bias", num_heads * d_h));
            components.push(("attn.key_bias", num_heads * d_h));
        }
        LayerKind::Phonetic => {
            components.push(("attn.content_proj", num_heads * d_model * d_h));
            components.push(("attn.content_bias", num_heads * d_h));
            components.push(("attn.prelu_slopes", num_heads * 2));
        }
    }
    components.push(("attn.output_proj", d_model * d_model + d_model));
    components.push(("norms", 4 * d_model));
    components.push((
        "ffn",
        d_model * ffn_dim + ffn_dim + ffn_dim * d_model + d_model,
    ));
    ParamCount { kind, components }
}
