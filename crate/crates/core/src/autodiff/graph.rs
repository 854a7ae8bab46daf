use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{GradientVector, ParameterVector, Tensor};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    Tanh,
    Sigmoid,
}

/// One layer of a [`ComputationSpec`]. The set is closed: these are the only
/// kernels the benchmark architectures need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `[N, T, D]` → `[N, T*D]`.
    Flatten,
    Dense {
        name: String,
        input: usize,
        output: usize,
    },
    Conv1d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    /// Full-sequence LSTM; outputs `[N, T, H]` (or `2H` when bidirectional).
    Lstm {
        name: String,
        input: usize,
        hidden: usize,
        bidirectional: bool,
    },
    /// Final hidden state of the preceding LSTM layer. For a bidirectional
    /// layer this is the forward state at `T-1` next to the backward state at 0.
    LstmReadout { hidden: usize, bidirectional: bool },
    MeanPoolTime,
    Activation { function: Nonlinearity },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::Lstm { .. } => "lstm",
            LayerSpec::LstmReadout { .. } => "lstm_readout",
            LayerSpec::MeanPoolTime => "mean_pool_time",
            LayerSpec::Activation { .. } => "activation",
        }
    }

    /// Named parameter tensors owned by this layer.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            LayerSpec::Dense {
                name,
                input,
                output,
            } => vec![
                (format!("{name}.weight"), vec![*output, *input]),
                (format!("{name}.bias"), vec![*output]),
            ],
            LayerSpec::Conv1d {
                name,
                in_channels,
                out_channels,
                kernel,
            } => vec![
                (format!("{name}.weight"), vec![*out_channels, *kernel, *in_channels]),
                (format!("{name}.bias"), vec![*out_channels]),
            ],
            LayerSpec::Lstm {
                name,
                input,
                hidden,
                bidirectional,
            } => {
                let dirs: &[&str] = if *bidirectional { &["", ".reverse"] } else { &[""] };
                dirs.iter()
                    .flat_map(|d| {
                        vec![
                            (format!("{name}{d}.w_ih"), vec![4 * hidden, *input]),
                            (format!("{name}{d}.w_hh"), vec![4 * hidden, *hidden]),
                            (format!("{name}{d}.bias"), vec![4 * hidden]),
                        ]
                    })
                    .collect()
            }
            _ => Vec::new(),
        }
    }

    fn label(&self, index: usize) -> String {
        match self {
            LayerSpec::Dense { name, .. }
            | LayerSpec::Conv1d { name, .. }
            | LayerSpec::Lstm { name, .. } => format!("layer {index} `{name}`"),
            other => format!("layer {index} ({})", other.kind()),
        }
    }
}

/// A static description of a network: the input signature and its layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputationSpec {
    pub timesteps: usize,
    pub features: usize,
    pub layers: Vec<LayerSpec>,
}

impl ComputationSpec {
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers.iter().flat_map(LayerSpec::param_shapes).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    fn accepts_flat(&self) -> bool {
        matches!(self.layers.first(), Some(LayerSpec::Flatten))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (t, d) = (self.timesteps, self.features);
        let ok = (shape.len() == 3 && shape[1] == t && shape[2] == d)
            || (self.accepts_flat() && shape.len() == 2 && shape[1] == t * d);
        if ok {
            Ok(())
        } else {
            let flat = if self.accepts_flat() {
                format!(" or [N, {}]", t * d)
            } else {
                String::new()
            };
            Err(Error::Config(format!(
                "input: batch of shape {shape:?} does not match [N, {t}, {d}]{flat}"
            )))
        }
    }

    /// Appends the network to `tape` and returns the logits node.
    pub fn record(&self, tape: &mut Tape, params: &ParameterVector, batch: &Tensor) -> Result<Var> {
        self.check_input(batch.shape())?;
        let mut h = tape.input(batch);
        for (i, layer) in self.layers.iter().enumerate() {
            h = record_layer(tape, params, layer, h)
                .map_err(|e| Error::Config(format!("{}: {e}", layer.label(i))))?;
        }
        Ok(h)
    }
}

fn record_layer(tape: &mut Tape, params: &ParameterVector, layer: &LayerSpec, h: Var) -> Result<Var> {
    match layer {
        LayerSpec::Flatten => {
            let s = tape.shape(h).to_vec();
            let n = s[0];
            let rest = s[1..].iter().product();
            tape.reshape(h, vec![n, rest])
        }
        LayerSpec::Dense { name, .. } => {
            let w = tape.param(params, &format!("{name}.weight"))?;
            let b = tape.param(params, &format!("{name}.bias"))?;
            tape.dense(h, w, b)
        }
        LayerSpec::Conv1d { name, .. } => {
            let w = tape.param(params, &format!("{name}.weight"))?;
            let b = tape.param(params, &format!("{name}.bias"))?;
            tape.conv1d(h, w, b)
        }
        LayerSpec::Lstm {
            name,
            bidirectional,
            ..
        } => {
            let fwd = {
                let wi = tape.param(params, &format!("{name}.w_ih"))?;
                let wh = tape.param(params, &format!("{name}.w_hh"))?;
                let b = tape.param(params, &format!("{name}.bias"))?;
                tape.lstm(h, wi, wh, b)?
            };
            if !bidirectional {
                return Ok(fwd);
            }
            let wi = tape.param(params, &format!("{name}.reverse.w_ih"))?;
            let wh = tape.param(params, &format!("{name}.reverse.w_hh"))?;
            let b = tape.param(params, &format!("{name}.reverse.bias"))?;
            let rev_in = tape.reverse_time(h)?;
            let rev = tape.lstm(rev_in, wi, wh, b)?;
            let rev = tape.reverse_time(rev)?;
            tape.concat_last(fwd, rev)
        }
        LayerSpec::LstmReadout {
            hidden,
            bidirectional,
        } => {
            let s = tape.shape(h).to_vec();
            if s.len() != 3 {
                return Err(Error::Data(format!("readout expects [N, T, H], got {s:?}")));
            }
            let last = tape.select_step(h, s[1] - 1)?;
            if !bidirectional {
                return Ok(last);
            }
            // forward half at T-1, backward half at 0
            let first = tape.select_step(h, 0)?;
            let n = s[0];
            // Selecting halves is linear; express it with masks so gradients flow.
            let mask_f = Tensor::new(
                vec![n, 2 * hidden],
                (0..n * 2 * hidden)
                    .map(|k| if k % (2 * hidden) < *hidden { 1.0 } else { 0.0 })
                    .collect(),
            )?;
            let mask_b = Tensor::new(
                vec![n, 2 * hidden],
                mask_f.data().iter().map(|m| 1.0 - m).collect(),
            )?;
            let mf = tape.input(&mask_f);
            let mb = tape.input(&mask_b);
            let a = tape.mul(last, mf)?;
            let b = tape.mul(first, mb)?;
            tape.add(a, b)
        }
        LayerSpec::MeanPoolTime => tape.mean_time(h),
        LayerSpec::Activation { function } => Ok(match function {
            Nonlinearity::Relu => tape.relu(h),
            Nonlinearity::Tanh => tape.tanh(h),
            Nonlinearity::Sigmoid => tape.sigmoid(h),
        }),
    }
}

/// A [`ComputationSpec`] plus the tape of its most recent forward pass.
pub struct Graph<'a> {
    spec: &'a ComputationSpec,
    tape: Option<Tape>,
    logits: Option<Var>,
}

impl<'a> Graph<'a> {
    pub fn new(spec: &'a ComputationSpec) -> Self {
        Self {
            spec,
            tape: None,
            logits: None,
        }
    }

    pub fn spec(&self) -> &ComputationSpec {
        self.spec
    }

    /// Runs the network on `batch`, recording intermediates for [`Graph::backward`].
    pub fn forward(&mut self, params: &ParameterVector, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let logits = self.spec.record(&mut tape, params, batch)?;
        let out = tape.tensor(logits);
        self.tape = Some(tape);
        self.logits = Some(logits);
        Ok(out)
    }

    fn recorded(&self) -> Result<(&Tape, Var)> {
        match (&self.tape, self.logits) {
            (Some(t), Some(l)) => Ok((t, l)),
            _ => Err(Error::Usage("backward called before forward".into())),
        }
    }

    pub fn logits(&self) -> Result<Var> {
        self.recorded().map(|(_, l)| l)
    }

    pub fn tape(&self) -> Result<&Tape> {
        self.recorded().map(|(t, _)| t)
    }

    /// Tape access for building custom losses on top of the logits.
    pub fn tape_mut(&mut self) -> Result<&mut Tape> {
        self.recorded()?;
        Ok(self.tape.as_mut().expect("checked above"))
    }

    pub fn weighted_cross_entropy(&mut self, labels: &[usize], class_weights: &[f64]) -> Result<Var> {
        let logits = self.logits()?;
        self.tape_mut()?.weighted_cross_entropy(logits, labels, class_weights)
    }

    pub fn backward(&self, loss: Var) -> Result<GradientVector> {
        let (tape, _) = self.recorded()?;
        tape.backward(loss)
    }
}

/// Which parameter coordinates a gradient check perturbs.
#[derive(Clone, Copy, Debug)]
pub enum Coordinates {
    All,
    /// `count` distinct coordinates drawn with `seed`.
    Random { count: usize, seed: u64 },
}

/// Denominator floor for the relative error of near-zero gradient entries.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares backward() against central differences of the weighted
/// cross-entropy loss and returns the worst relative error.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    spec: &ComputationSpec,
    params: &ParameterVector,
    batch: &Tensor,
    labels: &[usize],
    class_weights: &[f64],
    eps: f64,
    coordinates: Coordinates,
) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Usage(format!("eps must lie in (0, 1e-2], got {eps}")));
    }
    let loss_at = |p: &ParameterVector| -> Result<f64> {
        let mut g = Graph::new(spec);
        g.forward(p, batch)?;
        let l = g.weighted_cross_entropy(labels, class_weights)?;
        Ok(g.tape()?.value(l)[0])
    };
    let mut graph = Graph::new(spec);
    graph.forward(params, batch)?;
    let loss = graph.weighted_cross_entropy(labels, class_weights)?;
    let analytic = graph.backward(loss)?;

    let idx: Vec<usize> = match coordinates {
        Coordinates::All => (0..params.len()).collect(),
        Coordinates::Random { count, seed } => {
            let mut rng = seed::rng(seed);
            sample(&mut rng, params.len(), count.min(params.len())).into_vec()
        }
    };
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for i in idx {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + eps;
        let up = loss_at(&probe)?;
        probe.values_mut()[i] = orig - eps;
        let down = loss_at(&probe)?;
        probe.values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.values()[i], numeric));
    }
    Ok(worst)
}
