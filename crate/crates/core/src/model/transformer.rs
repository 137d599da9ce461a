use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{check_window, document_from_text, document_to_text, ModelDocument, ModelError, NeuralClassifier};
use crate::autodiff::{Array, ParamId, ParamStore, Rng, Tape, TensorError, Var};

const ARCHITECTURE: &str = "transformer";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub dropout_rate: f64,
    pub input_channels: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    /// Feed-forward hidden width; `None` means `4 · d_model`.
    pub ffn_width: Option<usize>,
    /// Add sinusoidal position codes to the embeddings.
    pub positional_encoding: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            dropout_rate: 0.1,
            input_channels: 7,
            seq_len: 1250,
            n_classes: 2,
            ffn_width: None,
            positional_encoding: true,
        }
    }
}

impl TransformerConfig {
    pub fn ffn_width(&self) -> usize {
        self.ffn_width.unwrap_or(4 * self.d_model)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.n_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.input_channels == 0 || self.seq_len == 0 || self.ffn_width() == 0 {
            return fail("channels, sequence length and feed-forward width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(…)`, shape `T×d`.
pub fn positional_encoding(seq_len: usize, d_model: usize) -> Array {
    let mut data = vec![0.0; seq_len * d_model];
    for pos in 0..seq_len {
        for col in 0..d_model {
            let pair = (col / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / d_model as f64);
            data[pos * d_model + col] = if col % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Array::from_vec(&[seq_len, d_model], data).expect("encoding shape")
}

/// Scaled dot-product attention `softmax(Q·Kᵀ/√d_k)·V`.
/// Returns the output and the row-stochastic weight matrix.
pub fn attention(tape: &mut Tape<'_>, q: Var, k: Var, v: Var) -> Result<(Var, Var), TensorError> {
    let (_, d_k) = tape.value(q).dims2()?;
    let (t_k, d_k2) = tape.value(k).dims2()?;
    let (t_v, _) = tape.value(v).dims2()?;
    if d_k != d_k2 || t_k != t_v {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            detail: format!("Q has width {d_k}, K is {t_k}x{d_k2}, V has {t_v} rows"),
        });
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = tape.softmax(scaled);
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    weight: ParamId,
    bias: ParamId,
}

impl Affine {
    fn new(params: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Self {
            weight: params.add_xavier(format!("{name}.weight"), &[fan_in, fan_out], fan_in, fan_out, rng),
            bias: params.add(format!("{name}.bias"), Array::zeros(&[fan_out])),
        }
    }

    fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(params: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Array::full(&[width], 1.0)),
            beta: params.add(format!("{name}.beta"), Array::zeros(&[width])),
        }
    }

    fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, TensorError> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    query: Affine,
    key: Affine,
    value: Affine,
    output: Affine,
    attn_norm: Norm,
    ffn_in: Affine,
    ffn_out: Affine,
    ffn_norm: Norm,
}

/// Embedding, optional position codes, post-norm encoder layers, mean
/// pooling over time and a linear head.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    config: TransformerConfig,
    params: ParamStore,
    embed: Affine,
    layers: Vec<EncoderLayer>,
    head: Affine,
    position_codes: Array,
    trained: bool,
}

impl TransformerModel {
    /// Xavier-uniform weights and zero biases drawn from `seed`.
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.d_model;
        let embed = Affine::new(&mut params, "embed", config.input_channels, d, &mut rng);
        let layers = (0..config.n_layers)
            .map(|i| {
                let p = format!("layers.{i}");
                EncoderLayer {
                    query: Affine::new(&mut params, &format!("{p}.attn.query"), d, d, &mut rng),
                    key: Affine::new(&mut params, &format!("{p}.attn.key"), d, d, &mut rng),
                    value: Affine::new(&mut params, &format!("{p}.attn.value"), d, d, &mut rng),
                    output: Affine::new(&mut params, &format!("{p}.attn.output"), d, d, &mut rng),
                    attn_norm: Norm::new(&mut params, &format!("{p}.attn_norm"), d),
                    ffn_in: Affine::new(&mut params, &format!("{p}.ffn.in"), d, config.ffn_width(), &mut rng),
                    ffn_out: Affine::new(&mut params, &format!("{p}.ffn.out"), config.ffn_width(), d, &mut rng),
                    ffn_norm: Norm::new(&mut params, &format!("{p}.ffn_norm"), d),
                }
            })
            .collect();
        let head = Affine::new(&mut params, "head", d, config.n_classes, &mut rng);
        Ok(Self {
            config,
            position_codes: positional_encoding(config.seq_len, d),
            params,
            embed,
            layers,
            head,
            trained: false,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    /// Per-timestep embedding of a `C×T` window, shape `T×d_model`.
    pub fn embed<'p>(&'p self, tape: &mut Tape<'p>, window: &Array) -> Result<Var, ModelError> {
        check_window(window, self.config.input_channels, Some(self.config.seq_len))?;
        let x = tape.constant(window.clone());
        let xt = tape.transpose(x)?;
        Ok(self.embed.apply(tape, xt)?)
    }

    fn encoder_layer<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        layer: &EncoderLayer,
        x: Var,
        mut rng: Option<&mut Rng>,
        weights_out: &mut Vec<Var>,
    ) -> Result<Var, ModelError> {
        let q = layer.query.apply(tape, x)?;
        let k = layer.key.apply(tape, x)?;
        let v = layer.value.apply(tape, x)?;
        let dk = self.config.head_dim();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let (out, weights) = attention(tape, qh, kh, vh)?;
            weights_out.push(weights);
            heads.push(out);
        }
        let joined = tape.concat_cols(&heads)?;
        let attended = layer.output.apply(tape, joined)?;
        let attended = tape.dropout(attended, self.config.dropout_rate, rng.as_deref_mut())?;
        let residual = tape.add(x, attended)?;
        let x = layer.attn_norm.apply(tape, residual)?;

        let hidden = layer.ffn_in.apply(tape, x)?;
        let hidden = tape.relu(hidden);
        let projected = layer.ffn_out.apply(tape, hidden)?;
        let projected = tape.dropout(projected, self.config.dropout_rate, rng)?;
        let residual = tape.add(x, projected)?;
        Ok(layer.ffn_norm.apply(tape, residual)?)
    }

    fn encode_on_tape<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        window: &Array,
        mut rng: Option<&mut Rng>,
        weights_out: &mut Vec<Var>,
    ) -> Result<Var, ModelError> {
        let mut x = self.embed(tape, window)?;
        if self.config.positional_encoding {
            let pe = tape.constant(self.position_codes.clone());
            x = tape.add(x, pe)?;
        }
        for layer in &self.layers {
            x = self.encoder_layer(tape, layer, x, rng.as_deref_mut(), weights_out)?;
        }
        Ok(x)
    }

    /// Evaluation-mode encoder output, shape `T×d_model`.
    pub fn encode(&self, window: &Array) -> Result<Array, ModelError> {
        let mut tape = Tape::new(&self.params);
        let out = self.encode_on_tape(&mut tape, window, None, &mut Vec::new())?;
        Ok(tape.value(out).clone())
    }

    /// Evaluation-mode attention weights, one `T×T` matrix per layer and head.
    pub fn attention_maps(&self, window: &Array) -> Result<Vec<Array>, ModelError> {
        let mut tape = Tape::new(&self.params);
        let mut weights = Vec::new();
        self.encode_on_tape(&mut tape, window, None, &mut weights)?;
        Ok(weights.into_iter().map(|w| tape.value(w).clone()).collect())
    }

    pub fn to_text(&self) -> String {
        document_to_text(&ModelDocument {
            architecture: ARCHITECTURE.into(),
            config: self.config,
            trained: self.trained,
            weights: self.params.to_checkpoint(),
        })
    }

    /// Rebuilds the model from its configuration and loads the stored weights.
    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let doc: ModelDocument<TransformerConfig> = document_from_text(text, ARCHITECTURE)?;
        let mut model = Self::new(doc.config, 0)?;
        model
            .params
            .load_checkpoint(&doc.weights)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        model.trained = doc.trained;
        Ok(model)
    }
}

impl NeuralClassifier for TransformerModel {
    fn architecture(&self) -> &'static str {
        ARCHITECTURE
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    fn input_channels(&self) -> usize {
        self.config.input_channels
    }

    fn is_trained(&self) -> bool {
        self.trained
    }

    fn set_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    fn config_document(&self) -> String {
        serde_json::to_string(&self.config).expect("config serializes")
    }

    fn logits<'p>(&'p self, tape: &mut Tape<'p>, window: &Array, rng: Option<&mut Rng>) -> Result<Var, ModelError> {
        let encoded = self.encode_on_tape(tape, window, rng, &mut Vec::new())?;
        let pooled = tape.mean_axis(encoded, 0)?;
        Ok(self.head.apply(tape, pooled)?)
    }
}
