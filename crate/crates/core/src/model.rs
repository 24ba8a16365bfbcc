//! Fully connected ReLU classifier.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{LeafId, Tape, Var};
use crate::datagen::rng;
use crate::error::{Error, GradError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub classes: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl MlpConfig {
    /// Two hidden layers of 64 and 32 units with dropout 0.2.
    pub fn desk(input_dim: usize, classes: usize, seed: u64) -> Self {
        Self { input_dim, hidden_dims: vec![64, 32], classes, dropout_rate: 0.2, seed }
    }

    /// The 2048/1024/512 stack used for 32×32 image inputs.
    pub fn wide(input_dim: usize, classes: usize, seed: u64) -> Self {
        Self { input_dim, hidden_dims: vec![2048, 1024, 512], classes, dropout_rate: 0.2, seed }
    }

    pub fn check(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::invalid("mlp config", "layer widths must be at least 1"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("mlp config", "need at least two classes"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("mlp config", format!("dropout rate {} not in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden_dims);
        w.push(self.classes);
        w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_in × fan_out`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub config: MlpConfig,
    pub layers: Vec<Layer>,
}

/// Weights ~ N(0, 1/fan_in), biases zero.
pub fn init_mlp(config: &MlpConfig) -> Result<MlpParams> {
    config.check()?;
    let mut rng = rng(config.seed);
    let widths = config.widths();
    let layers = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
            Layer { weight: Tensor::matrix(fan_in, fan_out, data), bias: Tensor::zeros(&[fan_out]) }
        })
        .collect();
    Ok(MlpParams { config: config.clone(), layers })
}

/// Handles to the parameters of an [`MlpParams`] registered on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub layers: Vec<(Var, Var)>,
}

impl MlpParams {
    /// Number of trainable tensors (weights plus biases).
    pub fn tensor_count(&self) -> usize {
        2 * self.layers.len()
    }

    /// Leaf id of trainable tensor `k` in [`Self::tensors`] order.
    pub fn leaf_id(k: usize) -> LeafId {
        LeafId(k)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Registers every weight and bias as a leaf, ids `0..tensor_count()`.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let w = tape.leaf(Self::leaf_id(2 * l), layer.weight.clone());
                let b = tape.leaf(Self::leaf_id(2 * l + 1), layer.bias.clone());
                (w, b)
            })
            .collect();
        ParamVars { layers }
    }

    /// Records the logits for `x` on `tape`.
    ///
    /// With `train_mode` set and a positive dropout rate, every hidden
    /// activation is multiplied by an inverted-dropout mask drawn from
    /// `dropout_seed`.
    pub fn record_forward(&self, tape: &mut Tape, vars: &ParamVars, x: Var, train_mode: bool, dropout_seed: u64) -> Result<Var, GradError> {
        let rate = self.config.dropout_rate;
        let use_dropout = train_mode && rate > 0.0;
        let mut mask_rng = rng(dropout_seed);
        let last = vars.layers.len() - 1;
        let mut h = x;
        for (l, &(w, b)) in vars.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add(z, b)?;
            if l < last {
                h = tape.relu(h)?;
                if use_dropout {
                    let shape = tape.value(h)?.shape().to_vec();
                    let keep = 1.0 - rate;
                    let n: usize = shape.iter().product();
                    let mask = (0..n).map(|_| if mask_rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                    let m = tape.constant(Tensor::new(shape, mask));
                    h = tape.mul(h, m)?;
                }
            }
        }
        Ok(h)
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() != 2 || batch.cols() != self.config.input_dim {
            return Err(Error::invalid("batch", format!("expected n × {}, got {:?}", self.config.input_dim, batch.shape())));
        }
        Ok(())
    }

    /// Logits for a batch, `batch × classes`.
    pub fn forward(&self, batch: &Tensor, train_mode: bool, dropout_seed: u64) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let x = tape.constant(batch.clone());
        let out = self.record_forward(&mut tape, &vars, x, train_mode, dropout_seed)?;
        Ok(tape.value(out)?.clone())
    }

    /// Class posteriors in evaluation mode.
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        let logits = self.forward(batch, false, 0)?;
        Ok(crate::autograd::row_softmax(&logits))
    }

    /// Text checkpoint: a config header, then one line of weights and one
    /// line of biases per layer.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let hidden: Vec<String> = c.hidden_dims.iter().map(|h| h.to_string()).collect();
        let mut out = format!(
            "mlp input_dim={} hidden={} classes={} dropout={} seed={}\n",
            c.input_dim,
            hidden.join(","),
            c.classes,
            c.dropout_rate,
            c.seed
        );
        for layer in &self.layers {
            for t in [&layer.weight, &layer.bias] {
                let vals: Vec<String> = t.data().iter().map(|x| x.to_string()).collect();
                let _ = writeln!(out, "{}", vals.join(" "));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse { line: 1, message: "empty checkpoint".into() })?;
        let perr = |line: usize, message: String| Error::Parse { line, message };
        let mut fields = header.split_whitespace();
        if fields.next() != Some("mlp") {
            return Err(perr(1, "checkpoint must start with `mlp`".into()));
        }
        let mut config = MlpConfig { input_dim: 0, hidden_dims: Vec::new(), classes: 0, dropout_rate: 0.0, seed: 0 };
        for field in fields {
            let (k, v) = field.split_once('=').ok_or_else(|| perr(1, format!("bad field {field:?}")))?;
            let bad = || perr(1, format!("bad value for {k}: {v:?}"));
            match k {
                "input_dim" => config.input_dim = v.parse().map_err(|_| bad())?,
                "classes" => config.classes = v.parse().map_err(|_| bad())?,
                "dropout" => config.dropout_rate = v.parse().map_err(|_| bad())?,
                "seed" => config.seed = v.parse().map_err(|_| bad())?,
                "hidden" => {
                    config.hidden_dims = if v.is_empty() {
                        Vec::new()
                    } else {
                        v.split(',').map(|h| h.parse().map_err(|_| bad())).collect::<Result<_>>()?
                    }
                }
                _ => return Err(perr(1, format!("unknown field {k}"))),
            }
        }
        config.check()?;
        let widths = config.widths();
        let mut layers = Vec::new();
        let mut line_no = 1;
        let mut read = |n: usize, shape: Vec<usize>| -> Result<Tensor> {
            line_no += 1;
            let line = lines.next().ok_or_else(|| perr(line_no, "checkpoint truncated".into()))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| perr(line_no, format!("bad number {t:?}"))))
                .collect::<Result<_>>()?;
            if vals.len() != n {
                return Err(perr(line_no, format!("expected {n} values, found {}", vals.len())));
            }
            Ok(Tensor::new(shape, vals))
        };
        for w in widths.windows(2) {
            let weight = read(w[0] * w[1], vec![w[0], w[1]])?;
            let bias = read(w[1], vec![w[1]])?;
            layers.push(Layer { weight, bias });
        }
        Ok(Self { config, layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
