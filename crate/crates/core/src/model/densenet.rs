use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{check_window, document_from_text, document_to_text, ModelDocument, ModelError, NeuralClassifier};
use crate::autodiff::{Array, ParamId, ParamStore, Rng, Tape, Var};

const ARCHITECTURE: &str = "densenet";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenseNetConfig {
    pub n_conv_layers: usize,
    pub growth_rate: usize,
    pub dilations: Vec<usize>,
    pub kernel_size: usize,
    pub embedding_dim: usize,
    pub input_channels: usize,
    pub n_classes: usize,
    pub dropout_rate: f64,
}

impl Default for DenseNetConfig {
    fn default() -> Self {
        Self {
            n_conv_layers: 8,
            growth_rate: 32,
            dilations: vec![1, 2, 4, 8, 16, 32, 64, 1],
            kernel_size: 3,
            embedding_dim: 128,
            input_channels: 7,
            n_classes: 2,
            dropout_rate: 0.1,
        }
    }
}

impl DenseNetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        if self.dilations.len() != self.n_conv_layers {
            return fail(format!(
                "{} dilations for {} layers",
                self.dilations.len(),
                self.n_conv_layers
            ));
        }
        if self.kernel_size % 2 == 0 {
            return fail(format!("kernel size {} must be odd", self.kernel_size));
        }
        if self.dilations.contains(&0) {
            return fail("dilations must be positive".into());
        }
        if self.n_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.input_channels == 0 || self.growth_rate == 0 || self.embedding_dim == 0 {
            return fail("channel counts must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    /// Channels entering layer `i`: the input plus `i` earlier outputs.
    pub fn layer_input_channels(&self, layer: usize) -> usize {
        self.input_channels + layer * self.growth_rate
    }

    /// Channels after the last layer's output is concatenated.
    pub fn final_channels(&self) -> usize {
        self.layer_input_channels(self.n_conv_layers)
    }
}

/// `1 + Σ (kernel_size − 1)·dilation` samples.
pub fn receptive_field(config: &DenseNetConfig) -> usize {
    1 + config.dilations.iter().map(|d| (config.kernel_size - 1) * d).sum::<usize>()
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    kernel: ParamId,
    bias: ParamId,
    dilation: usize,
}

/// Densely connected dilated 1-D convolutions, global average pooling,
/// an embedding layer and a linear head.
#[derive(Debug, Clone)]
pub struct DenseNetModel {
    config: DenseNetConfig,
    params: ParamStore,
    convs: Vec<ConvLayer>,
    embed: (ParamId, ParamId),
    head: (ParamId, ParamId),
    trained: bool,
}

/// What to record during a forward pass.
#[derive(Default)]
struct Probe {
    /// Layer whose output is replaced by zeros before it is concatenated.
    ablate: Option<usize>,
    layer_inputs: Vec<Var>,
    layer_outputs: Vec<Var>,
    embedding: Option<Var>,
}

impl DenseNetModel {
    pub fn new(config: DenseNetConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let k = config.kernel_size;
        let convs = config
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &dilation)| {
                let c_in = config.layer_input_channels(i);
                let g = config.growth_rate;
                ConvLayer {
                    kernel: params.add_xavier(format!("conv.{i}.kernel"), &[g, c_in, k], c_in * k, g * k, &mut rng),
                    bias: params.add(format!("conv.{i}.bias"), Array::zeros(&[g])),
                    dilation,
                }
            })
            .collect();
        let (f, e, n) = (config.final_channels(), config.embedding_dim, config.n_classes);
        let embed = (
            params.add_xavier("embed.weight", &[f, e], f, e, &mut rng),
            params.add("embed.bias", Array::zeros(&[e])),
        );
        let head = (
            params.add_xavier("head.weight", &[e, n], e, n, &mut rng),
            params.add("head.bias", Array::zeros(&[n])),
        );
        Ok(Self {
            config,
            params,
            convs,
            embed,
            head,
            trained: false,
        })
    }

    pub fn config(&self) -> &DenseNetConfig {
        &self.config
    }

    fn affine(tape: &mut Tape<'_>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var, ModelError> {
        let w = tape.param(w);
        let b = tape.param(b);
        let xw = tape.matmul(x, w)?;
        Ok(tape.add_bias(xw, b)?)
    }

    fn run<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        window: &Array,
        mut rng: Option<&mut Rng>,
        probe: &mut Probe,
    ) -> Result<Var, ModelError> {
        let (_, t_len) = check_window(window, self.config.input_channels, None)?;
        let mut maps = vec![tape.constant(window.clone())];
        for (i, conv) in self.convs.iter().enumerate() {
            let input = tape.concat_rows(&maps)?;
            probe.layer_inputs.push(input);
            let kernel = tape.param(conv.kernel);
            let bias = tape.param(conv.bias);
            let out = tape.conv1d(input, kernel, Some(bias), conv.dilation)?;
            let out = tape.relu(out);
            let out = tape.dropout(out, self.config.dropout_rate, rng.as_deref_mut())?;
            probe.layer_outputs.push(out);
            if probe.ablate == Some(i) {
                maps.push(tape.constant(Array::zeros(&[self.config.growth_rate, t_len])));
            } else {
                maps.push(out);
            }
        }
        let all = tape.concat_rows(&maps)?;
        let pooled = tape.mean_axis(all, 1)?;
        let pooled = tape.reshape(pooled, &[1, self.config.final_channels()])?;
        let embedding = Self::affine(tape, pooled, self.embed)?;
        probe.embedding = Some(embedding);
        Self::affine(tape, embedding, self.head)
    }

    /// Evaluation-mode pre-head vector of length `embedding_dim`.
    pub fn embedding(&self, window: &Array) -> Result<Vec<f64>, ModelError> {
        if !self.trained {
            return Err(ModelError::UntrainedModel);
        }
        let mut tape = Tape::new(&self.params);
        let mut probe = Probe::default();
        self.run(&mut tape, window, None, &mut probe)?;
        Ok(tape.value(probe.embedding.expect("embedding recorded")).data().to_vec())
    }

    /// Evaluation-mode input seen by each layer (`(C + i·growth)×T`),
    /// optionally with one layer's output zeroed before concatenation.
    pub fn layer_inputs(&self, window: &Array, ablate: Option<usize>) -> Result<Vec<Array>, ModelError> {
        let mut tape = Tape::new(&self.params);
        let mut probe = Probe {
            ablate,
            ..Default::default()
        };
        self.run(&mut tape, window, None, &mut probe)?;
        Ok(probe.layer_inputs.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Evaluation-mode output of each convolution layer (`growth×T`).
    pub fn feature_maps(&self, window: &Array) -> Result<Vec<Array>, ModelError> {
        let mut tape = Tape::new(&self.params);
        let mut probe = Probe::default();
        self.run(&mut tape, window, None, &mut probe)?;
        Ok(probe.layer_outputs.iter().map(|&v| tape.value(v).clone()).collect())
    }

    pub fn to_text(&self) -> String {
        document_to_text(&ModelDocument {
            architecture: ARCHITECTURE.into(),
            config: self.config.clone(),
            trained: self.trained,
            weights: self.params.to_checkpoint(),
        })
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let doc: ModelDocument<DenseNetConfig> = document_from_text(text, ARCHITECTURE)?;
        let mut model = Self::new(doc.config, 0)?;
        model
            .params
            .load_checkpoint(&doc.weights)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        model.trained = doc.trained;
        Ok(model)
    }
}

impl NeuralClassifier for DenseNetModel {
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
        self.run(tape, window, rng, &mut Probe::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_param_gradients;
    use rand::Rng as _;

    fn random_window(c: usize, t: usize, seed: u64) -> Array {
        let mut rng = Rng::seed_from_u64(seed);
        Array::from_vec(&[c, t], (0..c * t).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small(layers: usize, growth: usize, dilations: Vec<usize>) -> DenseNetConfig {
        DenseNetConfig {
            n_conv_layers: layers,
            growth_rate: growth,
            dilations,
            embedding_dim: 6,
            n_classes: 3,
            ..Default::default()
        }
    }

    #[test]
    fn receptive_field_values() {
        assert_eq!(receptive_field(&DenseNetConfig::default()), 257);
        assert_eq!(receptive_field(&small(1, 4, vec![1])), 3);
        assert_eq!(receptive_field(&small(8, 4, vec![1; 8])), 17);
    }

    #[test]
    fn config_validation() {
        assert!(small(2, 4, vec![1]).validate().is_err());
        assert!(DenseNetConfig { kernel_size: 4, ..Default::default() }.validate().is_err());
        assert!(DenseNetConfig::default().validate().is_ok());
    }

    #[test]
    fn dense_wiring_channel_counts() {
        let model = DenseNetModel::new(DenseNetConfig { n_classes: 4, ..Default::default() }, 1).unwrap();
        let inputs = model.layer_inputs(&random_window(7, 20, 2), None).unwrap();
        for (i, x) in inputs.iter().enumerate() {
            assert_eq!(x.shape(), &[7 + i * 32, 20]);
        }
        assert_eq!(model.config.final_channels(), 263);
        assert_eq!(model.forward(&random_window(7, 20, 2)).unwrap().len(), 4);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut model = DenseNetModel::new(small(2, 4, vec![1, 2]), 3).unwrap();
        model.params_mut().iter_mut().for_each(|p| p.value.fill(0.0));
        assert!(model.forward(&random_window(7, 16, 4)).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_length_and_determinism() {
        let mut model = DenseNetModel::new(DenseNetConfig::default(), 5).unwrap();
        let w = random_window(7, 30, 6);
        assert_eq!(model.embedding(&w), Err(ModelError::UntrainedModel));
        model.set_trained(true);
        let e = model.embedding(&w).unwrap();
        assert_eq!(e.len(), 128);
        assert_eq!(e, model.embedding(&w).unwrap());
    }

    #[test]
    fn impulse_reaches_only_the_receptive_field() {
        let cfg = small(3, 4, vec![1, 2, 4]);
        let half = (receptive_field(&cfg) - 1) / 2;
        let model = DenseNetModel::new(cfg, 7).unwrap();
        let t_len = 40;
        let pos = 20;
        let base = model.feature_maps(&Array::zeros(&[7, t_len])).unwrap();
        let mut impulse = Array::zeros(&[7, t_len]);
        impulse.data_mut()[2 * t_len + pos] = 1.0;
        let hit = model.feature_maps(&impulse).unwrap();
        let last = hit.len() - 1;
        let mut touched = Vec::new();
        for t in 0..t_len {
            let changed = (0..4).any(|c| (hit[last].get2(c, t) - base[last].get2(c, t)).abs() > 0.0);
            if changed {
                touched.push(t);
            }
        }
        assert!(!touched.is_empty());
        assert!(touched.iter().all(|&t| t.abs_diff(pos) <= half), "{touched:?} beyond ±{half}");
    }

    #[test]
    fn zeroing_a_layer_changes_every_later_input() {
        let model = DenseNetModel::new(small(4, 3, vec![1, 2, 4, 1]), 8).unwrap();
        let w = random_window(7, 24, 9);
        let base = model.layer_inputs(&w, None).unwrap();
        for j in 0..3 {
            let ablated = model.layer_inputs(&w, Some(j)).unwrap();
            for i in 0..4 {
                let differs = ablated[i] != base[i];
                assert_eq!(differs, i > j, "ablate {j}, layer {i}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = DenseNetConfig {
            dropout_rate: 0.2,
            ..small(2, 4, vec![1, 2])
        };
        let model = DenseNetModel::new(cfg, 10).unwrap();
        let w = random_window(7, 16, 11);
        for seed in [None, Some(3u64)] {
            let worst = check_param_gradients(model.params(), 1e-5, |params| {
                let mut probe = model.clone();
                *probe.params_mut() = params.clone();
                let mut rng = seed.map(Rng::seed_from_u64);
                let mut tape = Tape::new(probe.params());
                let logits = probe.logits(&mut tape, &w, rng.as_mut()).unwrap();
                let loss = tape.cross_entropy(logits, &[2]).unwrap();
                let value = tape.value(loss).data()[0];
                (value, tape.backward(loss).unwrap())
            });
            assert!(worst < 1e-4, "relative error {worst}");
        }
    }

    #[test]
    fn eval_is_deterministic_and_checkpoint_round_trips() {
        let model = DenseNetModel::new(small(2, 4, vec![1, 2]), 12).unwrap();
        let w = random_window(7, 16, 13);
        assert_eq!(model.forward(&w).unwrap(), model.forward(&w).unwrap());
        let back = DenseNetModel::from_text(&model.to_text()).unwrap();
        assert_eq!(back.forward(&w).unwrap(), model.forward(&w).unwrap());
        assert!(crate::model::TransformerModel::from_text(&model.to_text()).is_err());
    }
}
