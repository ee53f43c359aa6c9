//! Segmentation architectures: convolutional autoencoder, residual U-Net and
//! their convolutional-LSTM sequence variants.
//!
//! Layout for a filter scheme `[f_0, ..., f_{L-1}]`:
//!
//! * encoder level `i`: residual block to `f_i` channels, then 2x2 max pool;
//! * sequence variants run the encoder on every frame and feed the bottleneck
//!   maps through one conv-LSTM cell; the decoder sees the last hidden state;
//! * decoder level `i` (from `L-1` down to 0): nearest 2x upsample, 3x3 conv
//!   to `f_i` channels, ReLU, then (U-Net only) concatenation with the encoder
//!   output of level `i`, then a residual block to `f_i` channels;
//! * a 1x1 conv produces one logit per pixel.
//!
//! In the sequence U-Net the decoder's skip inputs come from the last frame.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv_lstm_step, he_uniform, ConvLstmWeights, Tape, Tensor, Var};
use crate::raster::NUM_CHANNELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Autoencoder,
    Unet,
    AeLstm,
    UnetLstm,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Autoencoder, Arch::Unet, Arch::AeLstm, Arch::UnetLstm];

    pub fn is_sequence(self) -> bool {
        matches!(self, Arch::AeLstm | Arch::UnetLstm)
    }

    pub fn has_skips(self) -> bool {
        matches!(self, Arch::Unet | Arch::UnetLstm)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Autoencoder => "autoencoder",
            Arch::Unet => "unet",
            Arch::AeLstm => "ae_lstm",
            Arch::UnetLstm => "unet_lstm",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ae" | "autoencoder" => Ok(Arch::Autoencoder),
            "unet" | "u-net" => Ok(Arch::Unet),
            "ae-lstm" | "ae_lstm" => Ok(Arch::AeLstm),
            "unet-lstm" | "unet_lstm" => Ok(Arch::UnetLstm),
            other => Err(Error::InvalidConfig(format!("unknown model {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub filter_scheme: Vec<usize>,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub tile: usize,
    /// Hidden channels of the conv-LSTM; defaults to the bottleneck width.
    #[serde(default)]
    pub lstm_hidden: Option<usize>,
}

fn default_in_channels() -> usize {
    NUM_CHANNELS
}

impl ModelConfig {
    pub fn new(arch: Arch, filter_scheme: Vec<usize>, tile: usize) -> Self {
        ModelConfig {
            arch,
            filter_scheme,
            in_channels: NUM_CHANNELS,
            tile,
            lstm_hidden: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filter_scheme.is_empty() || self.filter_scheme.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "filter scheme {:?} must be nonempty and positive",
                self.filter_scheme
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::InvalidConfig("in_channels must be positive".into()));
        }
        let levels = self.filter_scheme.len() as u32;
        let factor = 2usize
            .checked_pow(levels)
            .ok_or_else(|| Error::InvalidConfig(format!("{levels} levels")))?;
        if self.tile == 0 || !self.tile.is_multiple_of(factor) {
            return Err(Error::InvalidConfig(format!(
                "tile {} not divisible by 2^{levels}",
                self.tile
            )));
        }
        if self.lstm_hidden == Some(0) {
            return Err(Error::InvalidConfig("lstm_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.filter_scheme.last().expect("validated scheme")
    }

    pub fn hidden_channels(&self) -> usize {
        self.lstm_hidden.unwrap_or_else(|| self.bottleneck_channels())
    }

    /// Parameter count, summed layer by layer.
    pub fn parameter_count(&self) -> usize {
        let conv = |k: usize, cin: usize, cout: usize| cout * cin * k * k + cout;
        let block = |cin: usize, f: usize| conv(3, cin, f) + conv(3, f, f) + if cin != f { conv(1, cin, f) } else { 0 };
        let scheme = &self.filter_scheme;
        let mut total = 0;
        let mut cin = self.in_channels;
        for &f in scheme {
            total += block(cin, f);
            cin = f;
        }
        if self.arch.is_sequence() {
            let hid = self.hidden_channels();
            total += 4 * conv(3, cin + hid, hid);
            cin = hid;
        }
        for &f in scheme.iter().rev() {
            total += conv(3, cin, f);
            let block_in = if self.arch.has_skips() { 2 * f } else { f };
            total += block(block_in, f);
            cin = f;
        }
        total + conv(1, scheme[0], 1)
    }
}

/// Weights of one residual block: `relu(conv3(relu(conv3(x))) + skip(x))`,
/// where `skip` is the identity when channel counts agree and a 1x1 conv
/// otherwise.
#[derive(Clone, Copy, Debug)]
pub struct ResidualWeights {
    pub conv1: (Var, Var),
    pub conv2: (Var, Var),
    pub skip: Option<(Var, Var)>,
}

pub fn residual_block(tape: &mut Tape, x: Var, w: &ResidualWeights) -> Result<Var> {
    let h = tape.conv2d(x, w.conv1.0, w.conv1.1, 1)?;
    let h = tape.relu(h);
    let h = tape.conv2d(h, w.conv2.0, w.conv2.1, 1)?;
    let shortcut = match w.skip {
        Some((k, b)) => tape.conv2d(x, k, b, 1)?,
        None => x,
    };
    let sum = tape.add(h, shortcut)?;
    Ok(tape.relu(sum))
}

/// A built network: configuration plus named parameters in creation order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

/// Result of recording a forward pass.
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    /// Tape handles of the parameters, in [`Model::parameters`] order.
    pub params: Vec<Var>,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    /// Fan-in for He initialization; `None` marks a zero-initialized bias.
    fan_in: Option<usize>,
}

#[derive(Default)]
struct Layout(Vec<ParamSpec>);

impl Layout {
    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) {
        self.0.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![cout, cin, k, k],
            fan_in: Some(cin * k * k),
        });
        self.0.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![cout],
            fan_in: None,
        });
    }

    fn block(&mut self, name: &str, cin: usize, f: usize) {
        self.conv(&format!("{name}.conv1"), 3, cin, f);
        self.conv(&format!("{name}.conv2"), 3, f, f);
        if cin != f {
            self.conv(&format!("{name}.skip"), 1, cin, f);
        }
    }

    fn of(config: &ModelConfig) -> Layout {
        let mut l = Layout::default();
        let scheme = &config.filter_scheme;
        let mut cin = config.in_channels;
        for (i, &f) in scheme.iter().enumerate() {
            l.block(&format!("enc{i}"), cin, f);
            cin = f;
        }
        if config.arch.is_sequence() {
            let hid = config.hidden_channels();
            for gate in GATES {
                l.conv(&format!("lstm.{gate}"), 3, cin + hid, hid);
            }
            cin = hid;
        }
        for (i, &f) in scheme.iter().enumerate().rev() {
            l.conv(&format!("dec{i}.up"), 3, cin, f);
            let block_in = if config.arch.has_skips() { 2 * f } else { f };
            l.block(&format!("dec{i}.block"), block_in, f);
            cin = f;
        }
        l.conv("head", 1, scheme[0], 1);
        l
    }
}

const GATES: [&str; 4] = ["input", "forget", "output", "candidate"];

impl Model {
    /// Builds the architecture with He-uniform weights and zero biases.
    pub fn build(config: ModelConfig, rng: &mut impl Rng) -> Result<Model> {
        config.validate()?;
        let params = Layout::of(&config)
            .0
            .into_iter()
            .map(|spec| {
                let t = match spec.fan_in {
                    Some(fan_in) => he_uniform(spec.shape, fan_in, rng),
                    None => Tensor::zeros(spec.shape),
                };
                (spec.name, t)
            })
            .collect();
        Model::from_parameters(config, params)
    }

    /// Wraps existing parameters after checking their names and shapes
    /// against the layout of `config`.
    pub fn from_parameters(config: ModelConfig, params: Vec<(String, Tensor)>) -> Result<Model> {
        config.validate()?;
        let layout = Layout::of(&config);
        if layout.0.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} expects {} parameter tensors, got {}",
                config.arch,
                layout.0.len(),
                params.len()
            )));
        }
        for (spec, (name, t)) in layout.0.iter().zip(&params) {
            if spec.name != *name || spec.shape != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name} {:?} where {} {:?} was expected",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        let index = params.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Ok(Model { config, params, index })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i].1)
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn set_parameters(&mut self, params: Vec<(String, Tensor)>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors for a model with {}",
                params.len(),
                self.params.len()
            )));
        }
        for ((name, t), (own, current)) in params.iter().zip(&self.params) {
            if name != own || t.shape() != current.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name} {:?} does not match {own} {:?}",
                    t.shape(),
                    current.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Expected input shape for a batch of `n` (sequence models also take `t`).
    pub fn check_input(&self, input: &Tensor) -> Result<()> {
        let c = &self.config;
        let s = input.shape();
        let ok = if c.arch.is_sequence() {
            s.len() == 5 && s[2] == c.in_channels && s[3] == c.tile && s[4] == c.tile && s[1] > 0
        } else {
            s.len() == 4 && s[1] == c.in_channels && s[2] == c.tile && s[3] == c.tile
        };
        if !ok {
            let want = if c.arch.is_sequence() {
                format!("[N, T, {}, {}, {}]", c.in_channels, c.tile, c.tile)
            } else {
                format!("[N, {}, {}, {}]", c.in_channels, c.tile, c.tile)
            };
            return Err(Error::Shape(format!("{} expects input {want}, got {s:?}", c.arch)));
        }
        if s[0] == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. Parameters are recorded as
    /// trainable leaves when `trainable` is set, as constants otherwise.
    pub fn forward(&self, tape: &mut Tape, input: &Tensor, trainable: bool) -> Result<Forward> {
        self.check_input(input)?;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect();
        let p = |name: &str| -> Var { params[self.index[name]] };
        let conv = |name: &str| (p(&format!("{name}.weight")), p(&format!("{name}.bias")));
        let block = |name: &str| ResidualWeights {
            conv1: conv(&format!("{name}.conv1")),
            conv2: conv(&format!("{name}.conv2")),
            skip: self
                .index
                .contains_key(&format!("{name}.skip.weight"))
                .then(|| conv(&format!("{name}.skip"))),
        };
        let levels = self.config.filter_scheme.len();

        let encode = |tape: &mut Tape, frame: Tensor| -> Result<(Var, Vec<Var>)> {
            let mut x = tape.constant(frame);
            let mut skips = Vec::with_capacity(levels);
            for i in 0..levels {
                x = residual_block(tape, x, &block(&format!("enc{i}")))?;
                skips.push(x);
                x = tape.max_pool2(x)?;
            }
            Ok((x, skips))
        };

        let (mut x, skips) = if self.config.arch.is_sequence() {
            let steps = input.shape()[1];
            let lstm = ConvLstmWeights {
                input_gate: conv("lstm.input"),
                forget_gate: conv("lstm.forget"),
                output_gate: conv("lstm.output"),
                candidate: conv("lstm.candidate"),
            };
            let mut state: Option<(Var, Var)> = None;
            let mut last_skips = Vec::new();
            for t in 0..steps {
                let (z, skips) = encode(tape, input.select_axis1(t)?)?;
                let (h, c) = match state {
                    Some(s) => s,
                    None => {
                        let mut shape = tape.shape(z).to_vec();
                        shape[1] = self.config.hidden_channels();
                        let h = tape.constant(Tensor::zeros(shape.clone()));
                        let c = tape.constant(Tensor::zeros(shape));
                        (h, c)
                    }
                };
                state = Some(conv_lstm_step(tape, z, h, c, &lstm)?);
                last_skips = skips;
            }
            (state.expect("at least one step").0, last_skips)
        } else {
            encode(tape, input.clone())?
        };

        for i in (0..levels).rev() {
            x = tape.upsample2(x)?;
            let (k, b) = conv(&format!("dec{i}.up"));
            x = tape.conv2d(x, k, b, 1)?;
            x = tape.relu(x);
            if self.config.arch.has_skips() {
                x = tape.concat_channels(x, skips[i])?;
            }
            x = residual_block(tape, x, &block(&format!("dec{i}.block")))?;
        }
        let (k, b) = conv("head");
        let logits = tape.conv2d(x, k, b, 1)?;
        Ok(Forward { logits, params })
    }

    /// Per-pixel logits `[N, 1, H, W]` without recording gradients.
    pub fn predict_logits(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, input, false)?;
        Ok(tape.value(fwd.logits).clone())
    }

    /// Per-pixel fire probabilities `[N, 1, H, W]`.
    pub fn predict_proba(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.predict_logits(input)?.map(crate::nn::sigmoid))
    }
}
