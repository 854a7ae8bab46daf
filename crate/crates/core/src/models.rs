//! The three benchmark architectures: MLP, 1-D CNN and LSTM feature layers,
//! each followed by the same two-layer dense classification head.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    ComputationSpec, GradientVector, Graph, LayerSpec, Nonlinearity, ParameterVector, Tape, Tensor,
};
use crate::checkpoint::{self, Checkpoint, NamedArray};
use crate::error::{Error, Result};
use crate::seed;

/// Temporal kernel width of every convolutional feature layer.
pub const CONV_KERNEL: usize = 3;
/// Bias of the LSTM forget gate at initialization.
pub const FORGET_GATE_BIAS: f64 = 1.0;
/// Number of output classes.
pub const N_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureKind {
    Mlp,
    Cnn1d,
    Lstm,
}

impl FromStr for ArchitectureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(Self::Mlp),
            "cnn" | "cnn1d" => Ok(Self::Cnn1d),
            "lstm" => Ok(Self::Lstm),
            other => Err(Error::Config(format!(
                "unsupported architecture `{other}` (expected mlp, cnn1d or lstm)"
            ))),
        }
    }
}

impl fmt::Display for ArchitectureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mlp => "mlp",
            Self::Cnn1d => "cnn1d",
            Self::Lstm => "lstm",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub kind: ArchitectureKind,
    pub n_feature_layers: usize,
    pub hidden_dim: usize,
    pub nonlinearity: Nonlinearity,
    #[serde(default)]
    pub bidirectional: bool,
}

impl ArchitectureSpec {
    pub fn new(kind: ArchitectureKind, n_feature_layers: usize, hidden_dim: usize, nonlinearity: Nonlinearity) -> Self {
        Self {
            kind,
            n_feature_layers,
            hidden_dim,
            nonlinearity,
            bidirectional: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.n_feature_layers) {
            return Err(Error::Config(format!(
                "n_feature_layers must be in 1..=4, got {}",
                self.n_feature_layers
            )));
        }
        if self.hidden_dim < 2 {
            return Err(Error::Config(format!("hidden_dim must be at least 2, got {}", self.hidden_dim)));
        }
        if self.nonlinearity == Nonlinearity::Sigmoid {
            return Err(Error::Config("nonlinearity must be relu or tanh".into()));
        }
        if self.bidirectional && self.kind != ArchitectureKind::Lstm {
            return Err(Error::Config(format!("{} cannot be bidirectional", self.kind)));
        }
        Ok(())
    }

    /// Width of the head's hidden layer.
    pub fn head_width(&self) -> usize {
        (self.hidden_dim / 2).max(1)
    }

    /// The layer stack for inputs of `timesteps x features`.
    pub fn computation(&self, timesteps: usize, features: usize) -> Result<ComputationSpec> {
        self.validate()?;
        if timesteps == 0 || features == 0 {
            return Err(Error::Config(format!(
                "input dimensions must be positive, got T={timesteps}, D={features}"
            )));
        }
        let h = self.hidden_dim;
        let act = LayerSpec::Activation {
            function: self.nonlinearity,
        };
        let mut layers = Vec::new();
        let readout_width = match self.kind {
            ArchitectureKind::Mlp => {
                layers.push(LayerSpec::Flatten);
                let mut input = timesteps * features;
                for i in 0..self.n_feature_layers {
                    layers.push(LayerSpec::Dense {
                        name: format!("feature.{i}"),
                        input,
                        output: h,
                    });
                    layers.push(act.clone());
                    input = h;
                }
                h
            }
            ArchitectureKind::Cnn1d => {
                let needed = self.n_feature_layers * (CONV_KERNEL - 1) + 1;
                if timesteps < needed {
                    return Err(Error::Config(format!(
                        "{} conv layers of width {CONV_KERNEL} need at least {needed} timesteps, got {timesteps}",
                        self.n_feature_layers
                    )));
                }
                let mut input = features;
                for i in 0..self.n_feature_layers {
                    layers.push(LayerSpec::Conv1d {
                        name: format!("feature.{i}"),
                        in_channels: input,
                        out_channels: h,
                        kernel: CONV_KERNEL,
                    });
                    layers.push(act.clone());
                    input = h;
                }
                layers.push(LayerSpec::MeanPoolTime);
                h
            }
            ArchitectureKind::Lstm => {
                let dirs = if self.bidirectional { 2 } else { 1 };
                let mut input = features;
                for i in 0..self.n_feature_layers {
                    layers.push(LayerSpec::Lstm {
                        name: format!("feature.{i}"),
                        input,
                        hidden: h,
                        bidirectional: self.bidirectional,
                    });
                    input = dirs * h;
                }
                layers.push(LayerSpec::LstmReadout {
                    hidden: h,
                    bidirectional: self.bidirectional,
                });
                dirs * h
            }
        };
        layers.push(LayerSpec::Dense {
            name: "head.hidden".into(),
            input: readout_width,
            output: self.head_width(),
        });
        layers.push(act);
        layers.push(LayerSpec::Dense {
            name: "head.out".into(),
            input: self.head_width(),
            output: N_CLASSES,
        });
        Ok(ComputationSpec {
            timesteps,
            features,
            layers,
        })
    }
}

/// Soft targets for output distillation on the current batch.
pub struct DistillTarget {
    /// Teacher probabilities at the distillation temperature, `[N, 2]` row-major.
    pub teacher_probs: Vec<f64>,
    pub alpha: f64,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ArchitectureSpec,
    params: ParameterVector,
    graph: ComputationSpec,
}

/// Builds a freshly initialized model. Dense and convolutional weights are
/// drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, recurrent weights from
/// `U(-1/sqrt(H), 1/sqrt(H))`; biases are zero except the LSTM forget gate.
pub fn build_model(spec: &ArchitectureSpec, input_dims: (usize, usize), seed_value: u64) -> Result<Model> {
    let (timesteps, features) = input_dims;
    let graph = spec.computation(timesteps, features)?;
    let mut rng = seed::rng(seed_value);
    let mut named = Vec::new();
    for layer in &graph.layers {
        for (name, shape) in layer.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                let mut b = vec![0.0; n];
                if let LayerSpec::Lstm { hidden, .. } = layer {
                    b[*hidden..2 * hidden].iter_mut().for_each(|v| *v = FORGET_GATE_BIAS);
                }
                b
            } else {
                let fan = match layer {
                    LayerSpec::Lstm { hidden, .. } => *hidden,
                    _ => shape[1..].iter().product(),
                };
                let bound = (1.0 / fan as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            named.push((name, Tensor::new(shape, data)?));
        }
    }
    Ok(Model {
        spec: spec.clone(),
        params: ParameterVector::flatten(named)?,
        graph,
    })
}

impl Model {
    pub fn from_parts(spec: ArchitectureSpec, input_dims: (usize, usize), params: ParameterVector) -> Result<Self> {
        let graph = spec.computation(input_dims.0, input_dims.1)?;
        let expected = graph.param_shapes();
        let ok = expected.len() == params.layout().len()
            && expected
                .iter()
                .zip(params.layout())
                .all(|((n, s), e)| *n == e.name && *s == e.shape);
        if !ok {
            return Err(Error::Data("parameter layout does not match the architecture".into()));
        }
        Ok(Self { spec, params, graph })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn graph(&self) -> &ComputationSpec {
        &self.graph
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.graph.timesteps, self.graph.features)
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterVector {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParameterVector) -> Result<()> {
        if !params.same_layout(&self.params) {
            return Err(Error::Usage("parameter layout differs from the model's".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let (t, d) = self.input_dims();
        let s = batch.shape();
        let flat_ok = self.spec.kind == ArchitectureKind::Mlp && s.len() == 2 && s[1] == t * d;
        if (s.len() == 3 && s[1] == t && s[2] == d) || flat_ok {
            Ok(())
        } else {
            Err(Error::Data(format!("batch of shape {s:?} does not match model input [N, {t}, {d}]")))
        }
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        Graph::new(&self.graph).forward(&self.params, batch)
    }

    /// Class probabilities `[N, 2]`.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let logits = self.graph.record(&mut tape, &self.params, batch)?;
        let probs = tape.softmax(logits);
        Ok(tape.tensor(probs))
    }

    /// Weighted cross-entropy on the batch, plus `alpha * T^2 * KL` when a
    /// distillation target is supplied, and its gradient.
    pub fn loss_and_grad(
        &self,
        batch: &Tensor,
        labels: &[usize],
        class_weights: &[f64],
        distill: Option<&DistillTarget>,
    ) -> Result<(f64, GradientVector)> {
        self.check_batch(batch)?;
        let mut graph = Graph::new(&self.graph);
        graph.forward(&self.params, batch)?;
        let ce = graph.weighted_cross_entropy(labels, class_weights)?;
        let loss = match distill {
            Some(d) => {
                let logits = graph.logits()?;
                let tape = graph.tape_mut()?;
                let kl = tape.distill_kl(logits, &d.teacher_probs, d.temperature)?;
                let scaled = tape.scale(kl, d.alpha);
                tape.add(ce, scaled)?
            }
            None => ce,
        };
        let value = graph.tape()?.value(loss)[0];
        Ok((value, graph.backward(loss)?))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "model".into(),
            metadata: serde_json::json!({
                "architecture": self.spec,
                "timesteps": self.graph.timesteps,
                "features": self.graph.features,
            }),
            arrays: self
                .params
                .unflatten()
                .into_iter()
                .map(|(name, t)| NamedArray {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.into_data(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "model" {
            return Err(Error::Data(format!("checkpoint kind `{}` is not a model", ck.kind)));
        }
        let spec: ArchitectureSpec = serde_json::from_value(ck.metadata["architecture"].clone())?;
        let dim = |k: &str| {
            ck.metadata[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Data(format!("model checkpoint lacks `{k}`")))
        };
        let named = ck
            .arrays
            .iter()
            .map(|a| Ok((a.name.clone(), Tensor::new(a.shape.clone(), a.data.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(spec, (dim("timesteps")?, dim("features")?), ParameterVector::flatten(named)?)
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        checkpoint::save(&self.to_checkpoint(), manifest_path)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::load(manifest_path)?)
    }
}

/// Appends each sample's static covariates to every one of its timesteps:
/// `out[n, t] = timevarying[n, t] ++ statics[n]`.
pub fn repeat_and_concat_statics(timevarying: &Tensor, statics: &[f64], n_statics: usize) -> Result<Tensor> {
    let s = timevarying.shape();
    if s.len() != 3 {
        return Err(Error::Data(format!("time-varying input must be [N, T, D], got {s:?}")));
    }
    let (n, t, dt) = (s[0], s[1], s[2]);
    if statics.len() != n * n_statics {
        return Err(Error::Data(format!(
            "{} static values do not cover {n} samples of width {n_statics}",
            statics.len()
        )));
    }
    if n_statics == 0 {
        return Ok(timevarying.clone());
    }
    let d = dt + n_statics;
    let mut out = Vec::with_capacity(n * t * d);
    let tv = timevarying.data();
    for i in 0..n {
        let st = &statics[i * n_statics..(i + 1) * n_statics];
        for step in 0..t {
            let base = (i * t + step) * dt;
            out.extend_from_slice(&tv[base..base + dt]);
            out.extend_from_slice(st);
        }
    }
    Tensor::new(vec![n, t, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn mlp(h: usize, layers: usize) -> ArchitectureSpec {
        ArchitectureSpec::new(ArchitectureKind::Mlp, layers, h, Nonlinearity::Relu)
    }

    /// Closed-form parameter counts, derived independently of the layer code.
    fn expected_count(spec: &ArchitectureSpec, t: usize, d: usize) -> usize {
        let h = spec.hidden_dim;
        let hw = h / 2;
        let (features, readout) = match spec.kind {
            ArchitectureKind::Mlp => ((t * d) * h + h + (spec.n_feature_layers - 1) * (h * h + h), h),
            ArchitectureKind::Cnn1d => (
                (CONV_KERNEL * d * h + h) + (spec.n_feature_layers - 1) * (CONV_KERNEL * h * h + h),
                h,
            ),
            ArchitectureKind::Lstm => {
                let dirs = if spec.bidirectional { 2 } else { 1 };
                let first = 4 * (h * (d + h) + h);
                let rest = 4 * (h * (dirs * h + h) + h);
                (dirs * (first + (spec.n_feature_layers - 1) * rest), dirs * h)
            }
        };
        features + (readout * hw + hw) + (hw * 2 + 2)
    }

    #[test]
    fn mlp_first_layer_fan_in_is_flattened_input() {
        let m = build_model(&mlp(64, 2), (48, 10), 0).unwrap();
        assert_eq!(m.params().entry("feature.0.weight").unwrap().shape, vec![64, 480]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&mlp(16, 2), (6, 3), 42).unwrap();
        let b = build_model(&mlp(16, 2), (6, 3), 42).unwrap();
        assert_eq!(a.params(), b.params());
        let c = build_model(&mlp(16, 2), (6, 3), 43).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn lstm_parameter_count_matches_closed_form() {
        let spec = ArchitectureSpec::new(ArchitectureKind::Lstm, 2, 64, Nonlinearity::Tanh);
        let m = build_model(&spec, (48, 10), 1).unwrap();
        let head = 64 * 32 + 32 + 32 * 2 + 2;
        assert_eq!(m.param_count(), 4 * (64 * (10 + 64) + 64) + 4 * (64 * (64 + 64) + 64) + head);
        assert_eq!(m.params().get("feature.0.bias").unwrap()[64..128], [1.0; 64]);
        assert!(m.params().get("feature.0.bias").unwrap()[..64].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_counts_match_closed_form_for_all_kinds() {
        for kind in [ArchitectureKind::Mlp, ArchitectureKind::Cnn1d, ArchitectureKind::Lstm] {
            for layers in 1..=4 {
                for h in [8, 64] {
                    for bidirectional in [false, true] {
                        if bidirectional && kind != ArchitectureKind::Lstm {
                            continue;
                        }
                        let mut spec = ArchitectureSpec::new(kind, layers, h, Nonlinearity::Tanh);
                        spec.bidirectional = bidirectional;
                        let m = build_model(&spec, (12, 5), 0).unwrap();
                        assert_eq!(m.param_count(), expected_count(&spec, 12, 5), "{spec:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn graphs_contain_no_dropout_or_normalization() {
        let allowed = ["flatten", "dense", "conv1d", "lstm", "lstm_readout", "mean_pool_time", "activation"];
        for kind in [ArchitectureKind::Mlp, ArchitectureKind::Cnn1d, ArchitectureKind::Lstm] {
            let m = build_model(&ArchitectureSpec::new(kind, 3, 8, Nonlinearity::Relu), (10, 3), 0).unwrap();
            assert!(m.graph().layers.iter().all(|l| allowed.contains(&l.kind())));
            let mut tape = Tape::new();
            m.graph()
                .record(&mut tape, m.params(), &Tensor::zeros(vec![2, 10, 3]).unwrap())
                .unwrap();
            assert!(tape
                .op_names()
                .iter()
                .all(|op| !op.contains("dropout") && !op.contains("norm")));
        }
    }

    #[test]
    fn rejects_unsupported_configurations() {
        assert!(matches!("transformer".parse::<ArchitectureKind>(), Err(Error::Config(_))));
        assert!(build_model(&mlp(8, 5), (4, 2), 0).is_err());
        let mut bi = mlp(8, 1);
        bi.bidirectional = true;
        assert!(build_model(&bi, (4, 2), 0).is_err());
        let cnn = ArchitectureSpec::new(ArchitectureKind::Cnn1d, 4, 8, Nonlinearity::Relu);
        assert!(build_model(&cnn, (8, 2), 0).is_err());
    }

    fn zero_model(kind: ArchitectureKind) -> Model {
        let mut m = build_model(&ArchitectureSpec::new(kind, 2, 8, Nonlinearity::Tanh), (6, 3), 0).unwrap();
        m.params_mut().values_mut().iter_mut().for_each(|v| *v = 0.0);
        m
    }

    #[test]
    fn zero_weight_models_predict_one_half() {
        let mut rng = seed::rng(1);
        let x = Tensor::new(vec![4, 6, 3], (0..72).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        for kind in [ArchitectureKind::Mlp, ArchitectureKind::Cnn1d, ArchitectureKind::Lstm] {
            let p = zero_model(kind).predict(&x).unwrap();
            assert!(p.data().iter().all(|&v| v == 0.5), "{kind}");
        }
    }

    #[test]
    fn probability_rows_sum_to_one() {
        let mut rng = seed::rng(2);
        let x = Tensor::new(vec![7, 6, 3], (0..126).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        for kind in [ArchitectureKind::Mlp, ArchitectureKind::Cnn1d, ArchitectureKind::Lstm] {
            let m = build_model(&ArchitectureSpec::new(kind, 2, 8, Nonlinearity::Relu), (6, 3), 9).unwrap();
            let p = m.predict(&x).unwrap();
            for r in 0..7 {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_unit_model_matches_hand_sigmoid() {
        // One feature layer and a 1-unit head: logits = head.out(tanh(head.hidden(tanh(f(x))))).
        let spec = ArchitectureSpec::new(ArchitectureKind::Mlp, 1, 2, Nonlinearity::Tanh);
        let mut m = build_model(&spec, (1, 1), 0).unwrap();
        let set = |m: &mut Model, name: &str, vals: &[f64]| m.params_mut().get_mut(name).unwrap().copy_from_slice(vals);
        set(&mut m, "feature.0.weight", &[0.5, -1.0]);
        set(&mut m, "feature.0.bias", &[0.1, 0.2]);
        set(&mut m, "head.hidden.weight", &[2.0, 1.0]);
        set(&mut m, "head.hidden.bias", &[-0.3]);
        set(&mut m, "head.out.weight", &[0.4, -0.6]);
        set(&mut m, "head.out.bias", &[0.0, 0.25]);
        let x = 1.5f64;
        let h = [(0.5 * x + 0.1).tanh(), (-1.0 * x + 0.2).tanh()];
        let z = (2.0 * h[0] + 1.0 * h[1] - 0.3).tanh();
        let (l0, l1) = (0.4 * z, -0.6 * z + 0.25);
        let p1 = 1.0 / (1.0 + (l0 - l1).exp());
        let p = m.predict(&Tensor::new(vec![1, 1, 1], vec![x]).unwrap()).unwrap();
        assert!((p.data()[1] - p1).abs() < 1e-15);
    }

    #[test]
    fn predict_rejects_wrong_shape_as_data_error() {
        let m = build_model(&mlp(8, 1), (4, 2), 0).unwrap();
        assert!(matches!(m.predict(&Tensor::zeros(vec![1, 4, 3]).unwrap()), Err(Error::Data(_))));
        // MLP also accepts the flattened form
        assert!(m.predict(&Tensor::zeros(vec![2, 8]).unwrap()).is_ok());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = ArchitectureSpec::new(ArchitectureKind::Lstm, 2, 4, Nonlinearity::Tanh);
        spec.bidirectional = true;
        let m = build_model(&spec, (5, 3), 77).unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        assert_eq!(Model::load(&path).unwrap(), m);
    }

    #[test]
    fn statics_are_repeated_over_time() {
        let tv = Tensor::new(vec![2, 3, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = repeat_and_concat_statics(&tv, &[10.0, 20.0], 1).unwrap();
        assert_eq!(out.shape(), &[2, 3, 2]);
        assert_eq!(out.data(), &[1.0, 10.0, 2.0, 10.0, 3.0, 10.0, 4.0, 20.0, 5.0, 20.0, 6.0, 20.0]);

        assert_eq!(repeat_and_concat_statics(&tv, &[], 0).unwrap(), tv);

        let one = Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(repeat_and_concat_statics(&one, &[3.0], 1).unwrap().data(), &[1.0, 2.0, 3.0]);

        assert!(matches!(repeat_and_concat_statics(&tv, &[1.0, 2.0, 3.0], 1), Err(Error::Data(_))));
    }
}
