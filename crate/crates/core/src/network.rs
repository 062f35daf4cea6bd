//! Feed-forward classifiers: architecture specs, He-uniform initialisation,
//! tape-bound evaluation and bit-exact JSON model files.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Flatten,
    /// Constant `x * scale + shift` per input channel; never trained.
    FixedAffine {
        scale: Vec<f64>,
        shift: Vec<f64>,
    },
}

impl LayerSpec {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Output shape for one sample of shape `input`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Dense { in_dim, out_dim } => match input {
                [d] if d == in_dim => Ok(vec![*out_dim]),
                _ => Err(Error::shape(format!(
                    "dense layer expects flat input of {in_dim}, got {input:?}"
                ))),
            },
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => match input {
                &[c, h, w] if c == *in_ch => {
                    let g = crate::tensor::ConvGeometry::new(
                        [c, h, w],
                        [*out_ch, *in_ch, *kernel, *kernel],
                        *stride,
                        *padding,
                    )?;
                    Ok(g.output_shape().to_vec())
                }
                _ => Err(Error::shape(format!(
                    "conv layer expects [{in_ch}, H, W], got {input:?}"
                ))),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::FixedAffine { scale, shift } => {
                let channels = input.first().copied().unwrap_or(1);
                for (name, v) in [("scale", scale), ("shift", shift)] {
                    if v.len() != 1 && v.len() != channels {
                        return Err(Error::shape(format!(
                            "fixed affine {name} has {} entries for {channels} channels",
                            v.len()
                        )));
                    }
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Per-sample output shape after every layer.
pub fn infer_shapes(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = Vec::with_capacity(layers.len());
    let mut cur = input_shape.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        cur = layer
            .output_shape(&cur)
            .map_err(|e| Error::shape(format!("layer {i}: {e}")))?;
        shapes.push(cur.clone());
    }
    Ok(shapes)
}

/// Named reference architectures.
pub fn preset(name: &str, input_shape: &[usize], n_classes: usize) -> Result<Vec<LayerSpec>> {
    let dense = |in_dim, out_dim| LayerSpec::Dense { in_dim, out_dim };
    match name {
        "mlp-small" => {
            let d = input_shape.iter().product();
            Ok(vec![
                LayerSpec::Flatten,
                dense(d, 256),
                LayerSpec::Relu,
                dense(256, 256),
                LayerSpec::Relu,
                dense(256, n_classes),
            ])
        }
        "lenet-basic" => {
            let in_ch = *input_shape.first().ok_or_else(|| Error::shape("empty input shape"))?;
            let mut layers = vec![
                LayerSpec::Conv2d {
                    in_ch,
                    out_ch: 16,
                    kernel: 4,
                    stride: 2,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    in_ch: 16,
                    out_ch: 32,
                    kernel: 4,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
            ];
            let flat = infer_shapes(input_shape, &layers)?
                .last()
                .map_or(0, |s| s[0]);
            layers.extend([dense(flat, 100), LayerSpec::Relu, dense(100, n_classes)]);
            Ok(layers)
        }
        other => Err(Error::invalid(format!("unknown architecture preset `{other}`"))),
    }
}

/// `Flatten, (Dense, ReLU)*, Dense` with the given hidden widths.
pub fn mlp(input_dim: usize, hidden: &[usize], n_classes: usize) -> Vec<LayerSpec> {
    let mut layers = vec![LayerSpec::Flatten];
    let mut prev = input_dim;
    for &h in hidden {
        layers.push(LayerSpec::Dense {
            in_dim: prev,
            out_dim: h,
        });
        layers.push(LayerSpec::Relu);
        prev = h;
    }
    layers.push(LayerSpec::Dense {
        in_dim: prev,
        out_dim: n_classes,
    });
    layers
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Option<LayerParams>>,
    seed: Option<u64>,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

fn init_layer(rng: &mut ChaCha8Rng, layer: &LayerSpec) -> Option<LayerParams> {
    match *layer {
        LayerSpec::Dense { in_dim, out_dim } => Some(LayerParams {
            weight: he_uniform(rng, &[out_dim, in_dim], in_dim),
            bias: Tensor::zeros(&[out_dim]),
        }),
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            ..
        } => Some(LayerParams {
            weight: he_uniform(rng, &[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel),
            bias: Tensor::zeros(&[out_ch]),
        }),
        _ => None,
    }
}

fn param_shapes(layer: &LayerSpec) -> Option<(Vec<usize>, Vec<usize>)> {
    match *layer {
        LayerSpec::Dense { in_dim, out_dim } => Some((vec![out_dim, in_dim], vec![out_dim])),
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            ..
        } => Some((vec![out_ch, in_ch, kernel, kernel], vec![out_ch])),
        _ => None,
    }
}

fn check_architecture(input_shape: &[usize], layers: &[LayerSpec]) -> Result<usize> {
    infer_shapes(input_shape, layers)?;
    match layers.last() {
        Some(LayerSpec::Dense { out_dim, .. }) if *out_dim >= 2 => Ok(*out_dim),
        Some(LayerSpec::Dense { .. }) => Err(Error::shape("network needs at least 2 outputs")),
        _ => Err(Error::shape("final layer must be dense (affine)")),
    }
}

impl Network {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init(input_shape: &[usize], layers: Vec<LayerSpec>, seed: u64) -> Result<Network> {
        check_architecture(input_shape, &layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layers.iter().map(|l| init_layer(&mut rng, l)).collect();
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            params,
            seed: Some(seed),
        })
    }

    /// Builds a network from explicit parameters, one entry per layer
    /// (`None` for parameter-free layers).
    pub fn from_parts(
        input_shape: &[usize],
        layers: Vec<LayerSpec>,
        params: Vec<Option<LayerParams>>,
    ) -> Result<Network> {
        check_architecture(input_shape, &layers)?;
        if params.len() != layers.len() {
            return Err(Error::shape(format!(
                "{} parameter slots for {} layers",
                params.len(),
                layers.len()
            )));
        }
        for (i, (layer, p)) in layers.iter().zip(&params).enumerate() {
            match (param_shapes(layer), p) {
                (None, None) => {}
                (Some((ws, bs)), Some(p)) => {
                    if p.weight.shape() != ws.as_slice() || p.bias.shape() != bs.as_slice() {
                        return Err(Error::shape(format!(
                            "layer {i}: parameters {:?}/{:?}, expected {ws:?}/{bs:?}",
                            p.weight.shape(),
                            p.bias.shape()
                        )));
                    }
                }
                _ => return Err(Error::shape(format!("layer {i}: parameter presence mismatch"))),
            }
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            params,
            seed: None,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer_params(&self, i: usize) -> Option<&LayerParams> {
        self.params[i].as_ref()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn n_classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Dense { out_dim, .. }) => *out_dim,
            _ => unreachable!("architecture checked at construction"),
        }
    }

    /// Trainable tensors in layer order (weight then bias per layer).
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| [&p.weight, &p.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.params
            .iter_mut()
            .flatten()
            .flat_map(|p| [&mut p.weight, &mut p.bias])
            .collect()
    }

    pub fn n_parameters(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Registers the parameters on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundNetwork<'_> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                p.as_ref().map(|p| {
                    let (w, b) = (p.weight.clone(), p.bias.clone());
                    if trainable {
                        (tape.param(w), tape.param(b))
                    } else {
                        (tape.constant(w), tape.constant(b))
                    }
                })
            })
            .collect();
        BoundNetwork { net: self, vars }
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        if x.rank() == 0 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(format!(
                "batch {:?} does not match input shape {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Logits for a `[B, ...input_shape]` batch, as `[B, n_classes]`.
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = bound.forward(&mut tape, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Logits for one sample.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::shape(format!(
                "input {:?} does not match {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(&self.input_shape);
        let out = self.forward_batch(&x.reshape(&shape)?)?;
        out.reshape(&[self.n_classes()])
    }

    /// Activations entering the final dense layer for a batch.
    pub fn penultimate_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = bound.forward_range(&mut tape, xv, 0..self.layers.len() - 1)?;
        Ok(tape.value(out).clone())
    }

    /// Copy with every layer but the last kept verbatim and a freshly
    /// initialised dense head of `new_out_dim` outputs.
    pub fn clone_for_head(&self, new_out_dim: usize, seed: u64) -> Result<Network> {
        let Some(LayerSpec::Dense { in_dim, .. }) = self.layers.last() else {
            return Err(Error::shape("base network must end in a dense layer"));
        };
        let head = LayerSpec::Dense {
            in_dim: *in_dim,
            out_dim: new_out_dim,
        };
        let mut layers = self.layers.clone();
        *layers.last_mut().expect("non-empty") = head.clone();
        check_architecture(&self.input_shape, &layers)?;
        let mut params = self.params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        *params.last_mut().expect("non-empty") = init_layer(&mut rng, &head);
        Ok(Network {
            input_shape: self.input_shape.clone(),
            layers,
            params,
            seed: Some(seed),
        })
    }

    pub fn to_model_file(&self) -> ModelFile {
        let mut params = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            if let Some(p) = p {
                for (name, t) in [("weight", &p.weight), ("bias", &p.bias)] {
                    params.push(ParamEntry {
                        layer: i,
                        name: name.to_string(),
                        shape: t.shape().to_vec(),
                        data: encode_hex(t.data()),
                    });
                }
            }
        }
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            input_shape: self.input_shape.clone(),
            architecture: self.layers.clone(),
            n_classes: self.n_classes(),
            seed: self.seed,
            params,
        }
    }

    pub fn from_model_file(file: &ModelFile) -> Result<Network> {
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::schema(
                "format_version",
                format!("unsupported version {}", file.format_version),
            ));
        }
        check_architecture(&file.input_shape, &file.architecture)
            .map_err(|e| Error::schema("architecture", e.to_string()))?;
        let mut params: Vec<Option<LayerParams>> = vec![None; file.architecture.len()];
        let mut entries = file.params.iter().enumerate();
        for (i, layer) in file.architecture.iter().enumerate() {
            let Some((ws, bs)) = param_shapes(layer) else { continue };
            let mut take = |expected_name: &str, expected: &[usize]| -> Result<Tensor> {
                let (k, e) = entries.next().ok_or_else(|| {
                    Error::schema("params", format!("missing {expected_name} for layer {i}"))
                })?;
                let path = format!("params[{k}]");
                if e.layer != i || e.name != expected_name {
                    return Err(Error::schema(
                        path,
                        format!("expected layer {i} {expected_name}, found layer {} {}", e.layer, e.name),
                    ));
                }
                if e.shape != expected {
                    return Err(Error::schema(
                        format!("{path}.shape"),
                        format!("{:?} does not match architecture {:?}", e.shape, expected),
                    ));
                }
                let data = decode_hex(&e.data).map_err(|m| Error::schema(format!("{path}.data"), m))?;
                Tensor::new(e.shape.clone(), data)
                    .map_err(|err| Error::schema(format!("{path}.data"), err.to_string()))
            };
            let weight = take("weight", &ws)?;
            let bias = take("bias", &bs)?;
            params[i] = Some(LayerParams { weight, bias });
        }
        if let Some((k, _)) = entries.next() {
            return Err(Error::schema(format!("params[{k}]"), "unexpected extra parameter"));
        }
        let mut net = Network::from_parts(&file.input_shape, file.architecture.clone(), params)?;
        if net.n_classes() != file.n_classes {
            return Err(Error::schema(
                "n_classes",
                format!("{} but final layer has {} outputs", file.n_classes, net.n_classes()),
            ));
        }
        net.seed = file.seed;
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_model_file())?)
    }

    pub fn from_json(text: &str) -> Result<Network> {
        let file: ModelFile = crate::error::parse_document(text)?;
        Network::from_model_file(&file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Network> {
        Network::from_json(&fs::read_to_string(path)?)
    }
}

/// On-disk model document. Parameters are stored as concatenated 16-digit
/// hexadecimal IEEE-754 bit patterns so that load after save is bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub input_shape: Vec<usize>,
    pub architecture: Vec<LayerSpec>,
    pub n_classes: usize,
    pub seed: Option<u64>,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub layer: usize,
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

pub fn encode_hex(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 16);
    for v in values {
        s.push_str(&format!("{:016x}", v.to_bits()));
    }
    s
}

pub fn decode_hex(s: &str) -> std::result::Result<Vec<f64>, String> {
    if s.len() % 16 != 0 || !s.is_ascii() {
        return Err(format!("hex payload of length {} is not a multiple of 16", s.len()));
    }
    (0..s.len() / 16)
        .map(|i| {
            u64::from_str_radix(&s[i * 16..(i + 1) * 16], 16)
                .map(f64::from_bits)
                .map_err(|e| format!("value {i}: {e}"))
        })
        .collect()
}

/// A network whose parameters live on a tape.
pub struct BoundNetwork<'a> {
    net: &'a Network,
    vars: Vec<Option<(Var, Var)>>,
}

impl<'a> BoundNetwork<'a> {
    pub fn network(&self) -> &'a Network {
        self.net
    }

    /// Weight/bias vars of layer `i`, if it has parameters.
    pub fn layer_vars(&self, i: usize) -> Option<(Var, Var)> {
        self.vars[i]
    }

    /// Parameter vars in the same order as [`Network::parameters`].
    pub fn parameter_vars(&self) -> Vec<Var> {
        self.vars.iter().flatten().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Applies layer `i` to a batched activation.
    pub fn apply_layer(&self, tape: &mut Tape, i: usize, x: Var) -> Result<Var> {
        let batch = tape.value(x).shape()[0];
        match &self.net.layers[i] {
            LayerSpec::Dense { .. } => {
                let (w, b) = self.vars[i].expect("dense layer has parameters");
                let wt = tape.transpose(w)?;
                let y = tape.matmul(x, wt)?;
                tape.add_row_bias(y, b)
            }
            LayerSpec::Conv2d {
                stride, padding, ..
            } => {
                let (k, b) = self.vars[i].expect("conv layer has parameters");
                tape.conv2d(x, k, Some(b), *stride, *padding)
            }
            LayerSpec::Relu => Ok(tape.relu(x)),
            LayerSpec::Flatten => {
                let per: usize = tape.value(x).shape()[1..].iter().product();
                tape.reshape(x, &[batch, per])
            }
            LayerSpec::FixedAffine { scale, shift } => tape.channel_affine(x, scale, shift),
        }
    }

    pub fn forward_range(
        &self,
        tape: &mut Tape,
        x: Var,
        layers: std::ops::Range<usize>,
    ) -> Result<Var> {
        let mut cur = x;
        for i in layers {
            cur = self.apply_layer(tape, i, cur)?;
        }
        Ok(cur)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.forward_range(tape, x, 0..self.net.layers.len())
    }
}
