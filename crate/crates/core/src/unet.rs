//! Config-driven U-Net with bottlenecked encoder blocks.
//!
//! Layout for `encoder_channels = [c0, c1, ..., cL-1]`:
//!
//! * encoder level `i`: bottleneck block `c(i-1) -> ci` (1x1 reduce to
//!   `ci - c(i-1)` channels, 3x3 at that width, 1x1 expand to `ci`), then a
//!   2x2 max-pool on every level but the last;
//! * bottom: two 3x3 convolutions at `cL-1`;
//! * decoder level `i` (bottom-up): bilinear 2x upsample, concat with the
//!   center-cropped encoder output of level `i`, two 3x3 convolutions to `ci`;
//! * head: 1x1 convolution to `num_classes`, then sigmoid.
//!
//! Every convolution except the head is followed by ReLU.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{NodeId, Tape};
use crate::codec::{encode_named, Reader};
use crate::error::{dim_err, Error, Result};
use crate::optim::Parameter;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UNET";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Initial foreground probability of the head; its bias starts at the logit
/// of this value so a rare-class Dice loss does not start saturated at 0.5.
pub const HEAD_PRIOR: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_channels: Vec<usize>,
    pub bottleneck_enabled: bool,
}

impl UNetConfig {
    /// Small schedule used for CPU training runs.
    pub fn desk() -> Self {
        UNetConfig {
            in_channels: 3,
            num_classes: 1,
            encoder_channels: vec![8, 16, 32],
            bottleneck_enabled: true,
        }
    }

    /// The 16 -> 2048 doubling schedule on RGB input.
    pub fn paper_preset() -> Self {
        UNetConfig {
            in_channels: 3,
            num_classes: 1,
            encoder_channels: vec![16, 32, 64, 128, 256, 512, 1024, 2048],
            bottleneck_enabled: true,
        }
    }

    pub fn levels(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Input height and width must be multiples of this.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.levels().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 {
            return bad("in_channels must be >= 1".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        if self.encoder_channels.len() < 2 {
            return bad("encoder_channels needs at least two levels".into());
        }
        if self.encoder_channels.len() > 16 {
            return bad("encoder_channels deeper than 16 levels".into());
        }
        if self.encoder_channels.windows(2).any(|w| w[0] >= w[1]) || self.encoder_channels[0] == 0 {
            return bad(format!(
                "encoder_channels must be strictly increasing, got {:?}",
                self.encoder_channels
            ));
        }
        if self.bottleneck_enabled && self.encoder_channels[0] <= self.in_channels {
            return bad(format!(
                "first encoder width {} must exceed in_channels {} for a bottleneck block",
                self.encoder_channels[0], self.in_channels
            ));
        }
        Ok(())
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.in_channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.push(self.bottleneck_enabled as u8);
        out.extend_from_slice(&(self.encoder_channels.len() as u32).to_le_bytes());
        for &c in &self.encoder_channels {
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
    }

    pub fn decode_prefix(bytes: &[u8]) -> Result<(UNetConfig, usize)> {
        let mut r = Reader::new(bytes);
        let in_channels = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let bottleneck_enabled = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::Decode(format!("bad bottleneck flag {v}"))),
        };
        let levels = r.u32()? as usize;
        if levels > 16 {
            return Err(Error::Decode(format!("implausible level count {levels}")));
        }
        let encoder_channels = (0..levels).map(|_| r.u32().map(|c| c as usize)).collect::<Result<_>>()?;
        let cfg = UNetConfig {
            in_channels,
            num_classes,
            encoder_channels,
            bottleneck_enabled,
        };
        cfg.validate().map_err(|e| Error::Decode(e.to_string()))?;
        Ok((cfg, r.pos))
    }
}

/// One convolution in the build plan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl ConvLayer {
    fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize) -> Self {
        ConvLayer {
            name: name.into(),
            cin,
            cout,
            kernel,
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn param_count(&self) -> usize {
        (self.cin * self.kernel * self.kernel + 1) * self.cout
    }
}

/// Width of the reduced representation inside a bottleneck block.
pub fn bottleneck_width(in_ch: usize, out_ch: usize) -> Result<usize> {
    if out_ch <= in_ch {
        return Err(Error::Config(format!(
            "bottleneck needs out_ch > in_ch, got {in_ch} -> {out_ch}"
        )));
    }
    Ok(out_ch - in_ch)
}

fn encoder_layers(prefix: &str, cin: usize, cout: usize, bottleneck: bool) -> Result<Vec<ConvLayer>> {
    if bottleneck {
        let r = bottleneck_width(cin, cout)?;
        Ok(vec![
            ConvLayer::new(format!("{prefix}.reduce"), cin, r, 1),
            ConvLayer::new(format!("{prefix}.spatial"), r, r, 3),
            ConvLayer::new(format!("{prefix}.expand"), r, cout, 1),
        ])
    } else {
        Ok(vec![
            ConvLayer::new(format!("{prefix}.conv1"), cin, cout, 3),
            ConvLayer::new(format!("{prefix}.conv2"), cout, cout, 3),
        ])
    }
}

/// Every convolution of the network in construction (and forward) order.
pub fn layer_plan(config: &UNetConfig) -> Result<Vec<ConvLayer>> {
    config.validate()?;
    let ch = &config.encoder_channels;
    let mut plan = Vec::new();
    let mut prev = config.in_channels;
    for (i, &c) in ch.iter().enumerate() {
        plan.extend(encoder_layers(&format!("enc{i}"), prev, c, config.bottleneck_enabled)?);
        prev = c;
    }
    let bottom = *ch.last().unwrap();
    plan.push(ConvLayer::new("bottom.conv1", bottom, bottom, 3));
    plan.push(ConvLayer::new("bottom.conv2", bottom, bottom, 3));
    for i in (0..ch.len() - 1).rev() {
        plan.push(ConvLayer::new(format!("dec{i}.conv1"), ch[i] + ch[i + 1], ch[i], 3));
        plan.push(ConvLayer::new(format!("dec{i}.conv2"), ch[i], ch[i], 3));
    }
    plan.push(ConvLayer::new("head", ch[0], config.num_classes, 1));
    Ok(plan)
}

/// Trainable parameter count, computed from the plan without allocating.
pub fn count_params(config: &UNetConfig) -> Result<usize> {
    Ok(layer_plan(config)?.iter().map(ConvLayer::param_count).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: UNetConfig,
    pub params: Vec<Parameter>,
    plan: Vec<ConvLayer>,
}

/// Builds a freshly initialised network. Conv weights are Kaiming-uniform
/// over fan-in (`bound = sqrt(6 / fan_in)`). Biases start at zero except the
/// head's, which starts at `logit(HEAD_PRIOR)`.
pub fn build_unet(config: &UNetConfig, seed: u64) -> Result<ModelState> {
    let plan = layer_plan(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(plan.len() * 2);
    for layer in &plan {
        let fan_in = layer.cin * layer.kernel * layer.kernel;
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let shape = [layer.cout, layer.cin, layer.kernel, layer.kernel];
        let n: usize = shape.iter().product();
        let w: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        params.push(Parameter::new(format!("{}.weight", layer.name), Tensor::new(shape.to_vec(), w)?));
        let b0 = if layer.name == "head" {
            (HEAD_PRIOR / (1.0 - HEAD_PRIOR)).ln() as f32
        } else {
            0.0
        };
        params.push(Parameter::new(format!("{}.bias", layer.name), Tensor::full(&[layer.cout], b0)));
    }
    Ok(ModelState {
        config: config.clone(),
        params,
        plan,
    })
}

/// Recorded forward pass; keeps the tape alive for a later backward.
pub struct ForwardPass {
    pub tape: Tape,
    pub output: NodeId,
    param_nodes: Vec<NodeId>,
}

impl ForwardPass {
    pub fn output(&self) -> &Tensor {
        self.tape.value(self.output)
    }

    /// Gradients for every parameter, in model parameter order, given the
    /// gradient of the loss with respect to the network output.
    pub fn param_grads(&self, upstream: &Tensor) -> Result<Vec<Tensor>> {
        let mut grads = self.tape.backward(self.output, upstream)?;
        self.param_nodes
            .iter()
            .map(|&id| {
                grads
                    .take(id)
                    .ok_or_else(|| Error::State("parameter received no gradient".into()))
            })
            .collect()
    }
}

/// Applies a bottleneck encoder block to `input`. `params` holds the
/// weight/bias node pairs of the reduce, spatial and expand convolutions.
pub fn encoder_bottleneck_block(
    tape: &mut Tape,
    input: NodeId,
    in_ch: usize,
    out_ch: usize,
    params: &[(NodeId, NodeId); 3],
) -> Result<NodeId> {
    let r = bottleneck_width(in_ch, out_ch)?;
    let expect = [(r, in_ch, 1), (r, r, 3), (out_ch, r, 1)];
    let mut x = input;
    for (&(w, b), (cout, cin, k)) in params.iter().zip(expect) {
        if tape.value(w).shape() != [cout, cin, k, k] {
            return dim_err(format!(
                "bottleneck weight {:?} != expected {:?}",
                tape.value(w).shape(),
                [cout, cin, k, k]
            ));
        }
        x = tape.conv2d(x, w, b, k / 2)?;
        x = tape.relu(x);
    }
    Ok(x)
}

impl ModelState {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn plan(&self) -> &[ConvLayer] {
        &self.plan
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds one gradient per parameter (model order) into the grad slots.
    pub fn accumulate_grads(&mut self, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::State(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn check_input(&self, batch: &Tensor) -> Result<()> {
        let [_, c, h, w] = batch.dims4()?;
        if c != self.config.in_channels {
            return dim_err(format!("input has {c} channels (axis 1), model expects {}", self.config.in_channels));
        }
        let f = self.config.downsample_factor();
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return dim_err(format!("input spatial dims {h}x{w} (axes 2,3) not divisible by {f}"));
        }
        Ok(())
    }

    /// Runs the network and records the tape for a backward pass.
    pub fn forward(&self, batch: &Tensor) -> Result<ForwardPass> {
        self.check_input(batch)?;
        let mut tape = Tape::new();
        let param_nodes: Vec<NodeId> = self.params.iter().map(|p| tape.variable(p.value.clone())).collect();
        let conv = |tape: &mut Tape, layer: usize, x: NodeId, relu: bool| -> Result<NodeId> {
            let pad = self.plan[layer].padding();
            let y = tape.conv2d(x, param_nodes[2 * layer], param_nodes[2 * layer + 1], pad)?;
            Ok(if relu { tape.relu(y) } else { y })
        };

        let ch = &self.config.encoder_channels;
        let levels = ch.len();
        let mut layer = 0;
        let mut x = tape.constant(batch.clone());
        let mut skips = Vec::with_capacity(levels - 1);
        let mut prev = self.config.in_channels;
        for (i, &c) in ch.iter().enumerate() {
            if self.config.bottleneck_enabled {
                let nodes = [0, 1, 2].map(|k| (param_nodes[2 * (layer + k)], param_nodes[2 * (layer + k) + 1]));
                x = encoder_bottleneck_block(&mut tape, x, prev, c, &nodes)?;
                layer += 3;
            } else {
                x = conv(&mut tape, layer, x, true)?;
                x = conv(&mut tape, layer + 1, x, true)?;
                layer += 2;
            }
            prev = c;
            if i + 1 < levels {
                skips.push(x);
                x = tape.maxpool2(x)?;
            }
        }
        x = conv(&mut tape, layer, x, true)?;
        x = conv(&mut tape, layer + 1, x, true)?;
        layer += 2;
        for skip in skips.into_iter().rev() {
            let up = tape.upsample2x(x)?;
            let [_, _, h, w] = tape.value(up).dims4()?;
            let cropped = tape.center_crop(skip, h, w)?;
            x = tape.concat_channels(cropped, up)?;
            x = conv(&mut tape, layer, x, true)?;
            x = conv(&mut tape, layer + 1, x, true)?;
            layer += 2;
        }
        x = conv(&mut tape, layer, x, false)?;
        debug_assert_eq!(layer + 1, self.plan.len());
        let output = tape.sigmoid(x);
        Ok(ForwardPass {
            tape,
            output,
            param_nodes,
        })
    }

    /// Forward pass without keeping the tape.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let pass = self.forward(batch)?;
        Ok(pass.tape.into_value(pass.output))
    }

    /// Parameter values only, in the `UNET` checkpoint layout.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        self.config.encode_into(&mut out);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            encode_named(&mut out, &p.name, &p.value);
        }
        out
    }

    /// Decodes a checkpoint from the front of `bytes`; returns the model
    /// and the number of bytes consumed.
    pub fn from_checkpoint_prefix(bytes: &[u8]) -> Result<(ModelState, usize)> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Decode("missing UNET magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Decode(format!("unsupported checkpoint version {version}")));
        }
        let (config, used) = UNetConfig::decode_prefix(&bytes[8..])?;
        let mut model = build_unet(&config, 0)?;
        let mut r = Reader::new(&bytes[8 + used..]);
        let count = r.u32()? as usize;
        if count != model.params.len() {
            return Err(Error::Decode(format!(
                "checkpoint has {count} parameters, config implies {}",
                model.params.len()
            )));
        }
        for p in &mut model.params {
            let (name, value) = r.named_tensor()?;
            if name != p.name || value.shape() != p.value.shape() {
                return Err(Error::Decode(format!(
                    "checkpoint entry {name} {:?} does not match {} {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        Ok((model, 8 + used + r.pos))
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<ModelState> {
        let (m, used) = Self::from_checkpoint_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Decode("trailing bytes after checkpoint".into()));
        }
        Ok(m)
    }
}
