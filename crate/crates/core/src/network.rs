//! The miniUNet segmenter and its embedding variant.
//!
//! Three encoder blocks (`[conv3×3, batch-norm, relu]×2` then 2×2 max
//! pooling), a center block and three decoder blocks. Each decoder input is
//! the previous block's upsampled output concatenated with the pre-pooling
//! activations of the matching encoder block. The embedding is the output of
//! the last decoder block; a 1×1 convolution maps it to class logits.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sparseg_tensor::{Graph, Tensor, Var};

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn default_dropout() -> f64 {
    0.1
}

/// Input channels, class count and block widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub classes: usize,
    /// Widths of encoder blocks 1–3; the center block keeps the last one.
    pub widths: [usize; 3],
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

impl NetworkSpec {
    /// The standard 32/64/128 network.
    pub fn new(in_channels: usize, classes: usize) -> Self {
        Self::with_widths(in_channels, classes, [32, 64, 128])
    }

    pub fn with_widths(in_channels: usize, classes: usize, widths: [usize; 3]) -> Self {
        Self {
            in_channels,
            classes,
            widths,
            dropout: default_dropout(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.classes < 2 || self.widths.contains(&0) {
            return Err(Error::Config(format!("invalid network {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Checks that an input batch shape is usable.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        match *shape {
            [_, c, h, w] if c == self.in_channels => {
                if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
                    Err(Error::Shape(format!(
                        "spatial size {h}×{w} is not a positive multiple of 8"
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Err(Error::Shape(format!(
                "expected [N, {}, H, W] input, got {shape:?}",
                self.in_channels
            ))),
        }
    }

    /// Parameter names and shapes in their canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let [w1, w2, w3] = self.widths;
        let mut out = Vec::new();
        let mut conv_bn = |block: &str, cin: usize, cout: usize| {
            for (i, cin) in [(1, cin), (2, cout)] {
                out.push((format!("{block}.conv{i}.weight"), vec![cout, cin, 3, 3]));
                out.push((format!("{block}.bn{i}.gamma"), vec![cout]));
                out.push((format!("{block}.bn{i}.beta"), vec![cout]));
            }
        };
        conv_bn("enc1", self.in_channels, w1);
        conv_bn("enc2", w1, w2);
        conv_bn("enc3", w2, w3);
        conv_bn("center", w3, w3);
        conv_bn("dec3", 2 * w3, w2);
        conv_bn("dec2", 2 * w2, w1);
        conv_bn("dec1", 2 * w1, w1);
        for (block, c) in [("center", w3), ("dec3", w2), ("dec2", w1)] {
            out.push((format!("{block}.up.weight"), vec![4 * c, c, 1, 1]));
            out.push((format!("{block}.up.bias"), vec![c]));
        }
        out.push(("final.weight".into(), vec![self.classes, w1, 1, 1]));
        out.push(("final.bias".into(), vec![self.classes]));
        out
    }

    /// Names and channel counts of the batch-norm layers, in forward order.
    pub fn batch_norm_layers(&self) -> Vec<(String, usize)> {
        let [w1, w2, w3] = self.widths;
        let mut out = Vec::new();
        for (block, c) in [
            ("enc1", w1),
            ("enc2", w2),
            ("enc3", w3),
            ("center", w3),
            ("dec3", w2),
            ("dec2", w1),
            ("dec1", w1),
        ] {
            for i in 1..=2 {
                out.push((format!("{block}.bn{i}"), c));
            }
        }
        out
    }
}

/// Ordered named weight tensors (θ for the segmenter, Φ for the embedder).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParameters {
    /// Kaiming-uniform convolution weights (bound `sqrt(6 / fan_in)`), zero
    /// biases, batch-norm at identity.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = crate::rng(seed);
        let (names, tensors) = spec
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
                } else if name.ends_with(".gamma") {
                    Tensor::ones(&shape)
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .unzip();
        Self { names, tensors }
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        assert_eq!(names.len(), tensors.len());
        Self { names, tensors }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Same names, new values.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Self {
        assert_eq!(tensors.len(), self.tensors.len());
        Self {
            names: self.names.clone(),
            tensors,
        }
    }

    /// Registers every tensor as a differentiable leaf of `graph`.
    pub fn to_graph<'g>(&self, graph: &'g Graph) -> Vec<Var<'g>> {
        self.tensors.iter().map(|t| graph.param(t.clone())).collect()
    }

    /// Registers every tensor as a constant of `graph`.
    pub fn to_graph_constant<'g>(&self, graph: &'g Graph) -> Vec<Var<'g>> {
        self.tensors.iter().map(|t| graph.constant(t.clone())).collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// Running batch-norm statistics, kept apart from the trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub means: Vec<Tensor>,
    pub vars: Vec<Tensor>,
}

impl BatchNormStats {
    pub fn new(spec: &NetworkSpec) -> Self {
        let layers = spec.batch_norm_layers();
        Self {
            means: layers.iter().map(|(_, c)| Tensor::zeros(&[*c])).collect(),
            vars: layers.iter().map(|(_, c)| Tensor::ones(&[*c])).collect(),
        }
    }
}

/// How batch-norm and dropout behave in a forward pass.
pub enum Mode<'a> {
    /// Batch statistics and active dropout. Running statistics are updated
    /// when given.
    Train {
        rng: &'a mut ChaCha8Rng,
        stats: Option<&'a mut BatchNormStats>,
    },
    /// Running statistics, no dropout.
    Eval(&'a BatchNormStats),
}

struct Ctx<'g, 'm, 'a> {
    graph: &'g Graph,
    params: &'m [Var<'g>],
    next_param: usize,
    next_bn: usize,
    dropout: f64,
    mode: &'m mut Mode<'a>,
}

impl<'g> Ctx<'g, '_, '_> {
    fn take(&mut self) -> Var<'g> {
        let v = self.params[self.next_param];
        self.next_param += 1;
        v
    }

    fn conv3(&mut self, x: Var<'g>) -> Var<'g> {
        let w = self.take();
        x.conv2d(w, 1)
    }

    fn batch_norm(&mut self, x: Var<'g>) -> Var<'g> {
        let gamma = self.take();
        let beta = self.take();
        let shape = x.shape();
        let layer = self.next_bn;
        self.next_bn += 1;
        match self.mode {
            Mode::Train { stats, .. } => {
                let m = (shape[0] * shape[2] * shape[3]) as f64;
                let mean = x.sum_channel().scale(1.0 / m);
                let centered = x - mean.expand_channel(&shape);
                let var = (centered * centered).sum_channel().scale(1.0 / m);
                if let Some(stats) = stats.as_deref_mut() {
                    let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                    let blend = |old: &Tensor, new: &Tensor, f: f64| {
                        old.zip(new, |o, n| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * f * n)
                    };
                    stats.means[layer] = blend(&stats.means[layer], &mean.value(), 1.0);
                    stats.vars[layer] = blend(&stats.vars[layer], &var.value(), unbias);
                }
                let inv_std = var.add_scalar(BN_EPS).powf(-0.5);
                centered * (inv_std * gamma).expand_channel(&shape) + beta.expand_channel(&shape)
            }
            Mode::Eval(stats) => {
                let mean = self.graph.constant(stats.means[layer].clone());
                let inv_std = self
                    .graph
                    .constant(stats.vars[layer].map(|v| 1.0 / (v + BN_EPS).sqrt()));
                (x - mean.expand_channel(&shape)) * (inv_std * gamma).expand_channel(&shape)
                    + beta.expand_channel(&shape)
            }
        }
    }

    fn conv_bn_relu(&mut self, x: Var<'g>) -> Var<'g> {
        let y = self.conv3(x);
        self.batch_norm(y).relu()
    }

    fn double_conv(&mut self, x: Var<'g>) -> Var<'g> {
        let y = self.conv_bn_relu(x);
        self.conv_bn_relu(y)
    }

    fn dropout(&mut self, x: Var<'g>) -> Var<'g> {
        let p = self.dropout;
        match self.mode {
            Mode::Train { rng, .. } if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mask = Tensor::from_fn(&x.shape(), |_| if rng.gen::<f64>() < p { 0.0 } else { keep });
                x * self.graph.constant(mask)
            }
            _ => x,
        }
    }
}

fn upsample<'g>(x: Var<'g>, weight: Var<'g>, bias: Var<'g>) -> Var<'g> {
    let y = x.conv2d(weight, 0).depth_to_space();
    let shape = y.shape();
    y + bias.expand_channel(&shape)
}

fn param_index(spec: &NetworkSpec, name: &str) -> usize {
    spec.parameter_shapes()
        .iter()
        .position(|(n, _)| n == name)
        .expect("known parameter name")
}

/// Embedding features `[N, w1, H, W]`.
pub fn forward_embed<'g>(spec: &NetworkSpec, params: &[Var<'g>], x: Var<'g>, mode: &mut Mode<'_>) -> Result<Var<'g>> {
    spec.check_input(&x.shape())?;
    if params.len() != spec.parameter_shapes().len() {
        return Err(Error::Shape(format!(
            "expected {} parameter tensors, got {}",
            spec.parameter_shapes().len(),
            params.len()
        )));
    }
    let graph = x.graph();
    let up = |name: &str| {
        let i = param_index(spec, &format!("{name}.up.weight"));
        (params[i], params[i + 1])
    };
    let mut ctx = Ctx {
        graph,
        params,
        next_param: 0,
        next_bn: 0,
        dropout: spec.dropout,
        mode,
    };
    let e1 = ctx.double_conv(x);
    let e2 = ctx.double_conv(e1.maxpool2());
    let e3 = ctx.double_conv(e2.maxpool2());

    let c = ctx.dropout(e3.maxpool2());
    let c = ctx.double_conv(c);
    let (w, b) = up("center");
    let c = upsample(c, w, b);

    let d3 = ctx.dropout(c.concat_channels(e3));
    let d3 = ctx.double_conv(d3);
    let (w, b) = up("dec3");
    let d3 = upsample(d3, w, b);

    let d2 = ctx.dropout(d3.concat_channels(e2));
    let d2 = ctx.double_conv(d2);
    let (w, b) = up("dec2");
    let d2 = upsample(d2, w, b);

    let d1 = ctx.dropout(d2.concat_channels(e1));
    Ok(ctx.double_conv(d1))
}

/// The final 1×1 convolution applied to embedding features.
pub fn classify<'g>(spec: &NetworkSpec, params: &[Var<'g>], features: Var<'g>) -> Var<'g> {
    let i = param_index(spec, "final.weight");
    let y = features.conv2d(params[i], 0);
    let shape = y.shape();
    y + params[i + 1].expand_channel(&shape)
}

/// Class logits `[N, K, H, W]`.
pub fn forward_segment<'g>(spec: &NetworkSpec, params: &[Var<'g>], x: Var<'g>, mode: &mut Mode<'_>) -> Result<Var<'g>> {
    let features = forward_embed(spec, params, x, mode)?;
    Ok(classify(spec, params, features))
}

/// A network specification with its weights and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: ModelParameters,
    pub stats: BatchNormStats,
}

/// Images per forward pass during inference.
const INFERENCE_CHUNK: usize = 4;

impl Network {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            params: ModelParameters::init(&spec, seed),
            stats: BatchNormStats::new(&spec),
            spec,
        })
    }

    fn infer(&self, images: &Tensor, embed_only: bool) -> Result<Tensor> {
        self.spec.check_input(images.shape())?;
        let n = images.shape()[0];
        let mut parts = Vec::new();
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let chunk = Tensor::stack(
                &(start..(start + INFERENCE_CHUNK).min(n))
                    .map(|i| images.index_first(i))
                    .collect::<Vec<_>>(),
            );
            let graph = Graph::new();
            let params = self.params.to_graph_constant(&graph);
            let x = graph.constant(chunk);
            let mut mode = Mode::Eval(&self.stats);
            let features = forward_embed(&self.spec, &params, x, &mut mode)?;
            let out = if embed_only {
                features
            } else {
                classify(&self.spec, &params, features)
            };
            let value = out.value();
            parts.extend((0..value.shape()[0]).map(|i| value.index_first(i)));
        }
        Ok(Tensor::stack(&parts))
    }

    /// Logits in inference mode.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.infer(images, false)
    }

    /// Embedding features in inference mode.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        self.infer(images, true)
    }

    /// Writes weights, running statistics and the spec to a safetensors file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, Tensor)> = self
            .params
            .names()
            .iter()
            .cloned()
            .zip(self.params.tensors().iter().cloned())
            .collect();
        for (i, (name, _)) in self.spec.batch_norm_layers().into_iter().enumerate() {
            entries.push((format!("{name}.running_mean"), self.stats.means[i].clone()));
            entries.push((format!("{name}.running_var"), self.stats.vars[i].clone()));
        }
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = entries
            .into_iter()
            .map(|(name, t)| {
                let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (name, raw, t.shape().to_vec())
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(name, raw, shape)| {
                let view = TensorView::new(Dtype::F64, shape.clone(), raw)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
                Ok((name.clone(), view))
            })
            .collect::<Result<Vec<_>>>()?;
        let spec_json = serde_json::to_string(&self.spec).expect("spec serializes");
        let metadata = Some(HashMap::from([("spec".to_string(), spec_json)]));
        let data = safetensors::serialize(views, &metadata).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, data).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint written by [`Network::save`], validating every shape.
    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let (_, meta) = SafeTensors::read_metadata(&data).map_err(|e| bad(e.to_string()))?;
        let spec_json = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get("spec"))
            .ok_or_else(|| bad("no network spec in metadata".into()))?;
        let spec: NetworkSpec = serde_json::from_str(spec_json).map_err(|e| bad(e.to_string()))?;
        spec.validate()?;
        let st = SafeTensors::deserialize(&data).map_err(|e| bad(e.to_string()))?;
        let read = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let view = st.tensor(name).map_err(|_| bad(format!("missing tensor {name}")))?;
            if view.dtype() != Dtype::F64 || view.shape() != shape {
                return Err(bad(format!(
                    "tensor {name} is {:?} {:?}, expected F64 {shape:?}",
                    view.dtype(),
                    view.shape()
                )));
            }
            let values = view
                .data()
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            Ok(Tensor::new(shape, values))
        };
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in spec.parameter_shapes() {
            tensors.push(read(&name, &shape)?);
            names.push(name);
        }
        let mut stats = BatchNormStats::new(&spec);
        for (i, (name, c)) in spec.batch_norm_layers().into_iter().enumerate() {
            stats.means[i] = read(&format!("{name}.running_mean"), &[c])?;
            stats.vars[i] = read(&format!("{name}.running_var"), &[c])?;
        }
        Ok(Self {
            params: ModelParameters::from_parts(names, tensors),
            stats,
            spec,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkSpec {
        NetworkSpec::with_widths(1, 2, [2, 4, 8])
    }

    fn input(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng(seed);
        Tensor::from_fn(&[n, c, h, w], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn output_shapes() {
        let spec = tiny();
        let net = Network::new(spec.clone(), 0).unwrap();
        assert_eq!(net.logits(&input(3, 1, 16, 24, 1)).unwrap().shape(), &[3, 2, 16, 24]);
        assert_eq!(net.embed(&input(1, 1, 16, 16, 1)).unwrap().shape(), &[1, 2, 16, 16]);
        let rgb = Network::new(NetworkSpec::with_widths(3, 4, [2, 4, 8]), 0).unwrap();
        assert_eq!(rgb.logits(&input(2, 3, 8, 8, 1)).unwrap().shape(), &[2, 4, 8, 8]);
    }

    #[test]
    fn rejects_bad_sizes() {
        let net = Network::new(tiny(), 0).unwrap();
        assert!(matches!(net.logits(&input(1, 1, 20, 16, 0)), Err(Error::Shape(_))));
        assert!(matches!(net.logits(&input(1, 2, 16, 16, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn parameter_count_of_standard_network() {
        let spec = NetworkSpec::new(1, 2);
        assert_eq!(spec.parameter_shapes().len(), 7 * 6 + 3 * 2 + 2);
        let p = ModelParameters::init(&spec, 0);
        assert_eq!(p.get("dec1.conv1.weight").unwrap().shape(), &[32, 64, 3, 3]);
        assert_eq!(p.get("dec3.conv1.weight").unwrap().shape(), &[64, 256, 3, 3]);
        assert_eq!(p.get("final.weight").unwrap().shape(), &[2, 32, 1, 1]);
    }

    #[test]
    fn embed_then_classify_matches_segment() {
        let net = Network::new(tiny(), 3).unwrap();
        let x = input(2, 1, 16, 16, 4);
        let feats = net.embed(&x).unwrap();
        let graph = Graph::new();
        let params = net.params.to_graph_constant(&graph);
        let direct = classify(&net.spec, &params, graph.constant(feats)).value();
        assert!(direct.max_abs_diff(&net.logits(&x).unwrap()) < 1e-12);
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let spec = tiny();
        let params = ModelParameters::init(&spec, 0);
        let mut stats = BatchNormStats::new(&spec);
        let graph = Graph::new();
        let vars = params.to_graph(&graph);
        let mut rng = crate::rng(0);
        let x = graph.constant(input(2, 1, 16, 16, 0));
        let mut mode = Mode::Train {
            rng: &mut rng,
            stats: Some(&mut stats),
        };
        forward_segment(&spec, &vars, x, &mut mode).unwrap();
        assert_ne!(stats, BatchNormStats::new(&spec));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = Network::new(tiny(), 7).unwrap();
        net.stats.means[4] = Tensor::full(&[8], 0.25);
        let path = dir.path().join("model.safetensors");
        net.save(&path).unwrap();
        assert_eq!(Network::load(&path).unwrap(), net);
    }

    #[test]
    fn checkpoint_with_wrong_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::new(tiny(), 7).unwrap();
        let path = dir.path().join("model.safetensors");
        net.save(&path).unwrap();
        // rewrite the embedded spec so the stored shapes no longer fit
        let mut data = fs::read(&path).unwrap();
        let needle = br#"\"classes\":2"#;
        let at = data.windows(needle.len()).position(|w| w == needle).unwrap();
        data[at + needle.len() - 1] = b'3';
        fs::write(&path, data).unwrap();
        assert!(matches!(Network::load(&path), Err(Error::Checkpoint(_))));
    }
}
