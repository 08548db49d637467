//! The attention residual post-processing network.
//!
//! Layout: a 3×3 head conv lifts RGB to `F` feature channels, a chain of
//! attention residual blocks refines them, and a 3×3 tail conv maps back to
//! RGB. With `global_skip` the tail output is added to the network input, so
//! the network predicts a correction to the decoded image.

mod checkpoint;
mod ensemble;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Graph, Padding, ReduceKind, Scalar, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use ensemble::{infer, self_ensemble_infer, self_ensemble_raw};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub feature_channels: usize,
    /// Channel attention squeezes `F` to `F / ca_reduction`.
    pub ca_reduction: usize,
    pub sa_kernel: usize,
    pub global_skip: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 30,
            feature_channels: 64,
            ca_reduction: 16,
            sa_kernel: 7,
            global_skip: true,
        }
    }
}

impl ModelConfig {
    /// Small profile used for tests and laptop-scale training.
    pub fn desk() -> Self {
        Self {
            num_blocks: 4,
            feature_channels: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Construction(format!("model config: {m}")));
        if self.num_blocks == 0 {
            return bad("num_blocks must be at least 1".into());
        }
        if self.feature_channels == 0 || self.ca_reduction == 0 {
            return bad("feature_channels and ca_reduction must be positive".into());
        }
        if self.feature_channels % self.ca_reduction != 0 {
            return bad(format!(
                "feature_channels {} is not divisible by ca_reduction {}",
                self.feature_channels, self.ca_reduction
            ));
        }
        if self.sa_kernel % 2 == 0 {
            return bad(format!("sa_kernel {} must be odd", self.sa_kernel));
        }
        Ok(())
    }

    pub fn squeezed_channels(&self) -> usize {
        self.feature_channels / self.ca_reduction
    }

    /// Ordered `(name, shape)` pairs of every parameter tensor.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let f = self.feature_channels;
        let s = self.squeezed_channels();
        let k = self.sa_kernel;
        let mut out = Vec::new();
        let mut conv = |name: String, o: usize, i: usize, kk: usize| {
            out.push((format!("{name}.weight"), vec![o, i, kk, kk]));
            out.push((format!("{name}.bias"), vec![o]));
        };
        conv("head".into(), f, 3, 3);
        for b in 0..self.num_blocks {
            let p = block_prefix(b);
            conv(format!("{p}.conv1"), f, f, 3);
            conv(format!("{p}.conv2"), f, f, 3);
            conv(format!("{p}.ca.reduce"), s, f, 1);
            conv(format!("{p}.ca.expand"), f, s, 1);
            conv(format!("{p}.sa"), 1, 2, k);
        }
        conv("tail".into(), 3, f, 3);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.manifest()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

fn block_prefix(index: usize) -> String {
    format!("body.{index:03}")
}

/// All learnable tensors of a network, keyed by stable names.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
    seed: u64,
}

impl<T: Scalar> ModelParameters<T> {
    /// Assembles a parameter set, checking it against the config's manifest.
    pub fn from_tensors(
        config: &ModelConfig,
        tensors: BTreeMap<String, Tensor<T>>,
        seed: u64,
    ) -> Result<Self> {
        let manifest = config.manifest();
        if manifest.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "config needs {} parameter tensors, got {}",
                manifest.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &manifest {
            match tensors.get(name) {
                None => return Err(Error::Shape(format!("missing parameter {name}"))),
                Some(t) if t.shape() != &shape[..] => {
                    return Err(Error::Shape(format!(
                        "parameter {name}: shape {:?}, config implies {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Self { tensors, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParameters<U> {
        ModelParameters {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            seed: self.seed,
        }
    }

    /// Zeroes the tail conv. With `global_skip` the network becomes the
    /// identity map.
    pub fn zero_tail(&mut self) {
        for name in ["tail.weight", "tail.bias"] {
            if let Some(t) = self.tensors.get_mut(name) {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    /// Adds every tensor to `graph`, as trainable leaves when the graph
    /// tracks gradients and as constants otherwise.
    pub fn bind(&self, graph: &mut Graph<T>) -> BoundParameters {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if graph.grad_enabled() {
                    graph.parameter(v.clone())
                } else {
                    graph.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        BoundParameters { vars }
    }
}

/// Graph handles for a parameter set, by name.
#[derive(Clone, Debug)]
pub struct BoundParameters {
    vars: BTreeMap<String, Var>,
}

impl BoundParameters {
    /// Wraps handles created elsewhere, e.g. gradient-check leaves.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    fn conv(&self, prefix: &str) -> Result<(Var, Var)> {
        Ok((
            self.var(&format!("{prefix}.weight"))?,
            self.var(&format!("{prefix}.bias"))?,
        ))
    }
}

/// Seeded uniform fan-in initialisation: weights `U(−1/√fan_in, 1/√fan_in)`
/// drawn tensor by tensor in manifest order, biases zero.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParameters> {
    config.validate()?;
    let mut rng = seed::rng(seed::derive_seed(seed, "init"));
    let mut tensors = BTreeMap::new();
    for (name, shape) in config.manifest() {
        let len: usize = shape.iter().product();
        let data = if name.ends_with(".bias") {
            vec![0.0f32; len]
        } else {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let bound = 1.0 / fan_in.sqrt();
            (0..len)
                .map(|_| rng.gen_range(-bound..bound) as f32)
                .collect()
        };
        tensors.insert(name, Tensor::from_vec(&shape, data)?);
    }
    Ok(ModelParameters { tensors, seed })
}

/// `features · sigmoid(expand(relu(reduce(gap(features)))))`, gate broadcast
/// over the spatial axes.
pub fn channel_attention<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    reduce: (Var, Var),
    expand: (Var, Var),
) -> Result<Var> {
    let pooled = g.global_avg_pool(features)?;
    let squeezed = g.conv2d(pooled, reduce.0, Some(reduce.1), 1, Padding::NONE)?;
    let squeezed = g.relu(squeezed)?;
    let logits = g.conv2d(squeezed, expand.0, Some(expand.1), 1, Padding::NONE)?;
    let gate = g.sigmoid(logits)?;
    g.mul(features, gate)
}

/// `features · sigmoid(conv(concat(mean_c, max_c)))`, gate broadcast over
/// channels.
pub fn spatial_attention<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    conv: (Var, Var),
) -> Result<Var> {
    let k = g.shape(conv.0)[2];
    let mean = g.channel_reduce(features, ReduceKind::Mean)?;
    let max = g.channel_reduce(features, ReduceKind::Max)?;
    let pooled = g.concat_channels(&[mean, max])?;
    let logits = g.conv2d(pooled, conv.0, Some(conv.1), 1, Padding::same(k))?;
    let gate = g.sigmoid(logits)?;
    g.mul(features, gate)
}

fn attention_block<T: Scalar>(
    g: &mut Graph<T>,
    params: &BoundParameters,
    index: usize,
    input: Var,
) -> Result<Var> {
    let p = block_prefix(index);
    let (w1, b1) = params.conv(&format!("{p}.conv1"))?;
    let (w2, b2) = params.conv(&format!("{p}.conv2"))?;
    let x = g.conv2d(input, w1, Some(b1), 1, Padding::same(3))?;
    let x = g.relu(x)?;
    let x = g.conv2d(x, w2, Some(b2), 1, Padding::same(3))?;
    let x = channel_attention(
        g,
        x,
        params.conv(&format!("{p}.ca.reduce"))?,
        params.conv(&format!("{p}.ca.expand"))?,
    )?;
    let x = spatial_attention(g, x, params.conv(&format!("{p}.sa"))?)?;
    g.add(x, input)
}

/// Records the full network on `g` and returns the output node.
///
/// On an inference graph the intermediate values of each block are released
/// as soon as the block output exists.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    params: &BoundParameters,
    input: Var,
) -> Result<Var> {
    let [_, c, h, w] = g.value(input).dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("model input has {c} channels, expected 3")));
    }
    if h < config.sa_kernel || w < config.sa_kernel {
        return Err(Error::Shape(format!(
            "model input {h}×{w} is smaller than the {} px attention kernel",
            config.sa_kernel
        )));
    }
    let free = !g.grad_enabled();
    let (hw, hb) = params.conv("head")?;
    let mut x = g.conv2d(input, hw, Some(hb), 1, Padding::same(3))?;
    for b in 0..config.num_blocks {
        let start = g.len();
        x = attention_block(g, params, b, x)?;
        if free {
            g.free_range(start.saturating_sub(1), g.len(), &[x])?;
        }
    }
    let (tw, tb) = params.conv("tail")?;
    let y = g.conv2d(x, tw, Some(tb), 1, Padding::same(3))?;
    if config.global_skip {
        g.add(input, y)
    } else {
        Ok(y)
    }
}

/// Runs the network on an `N × 3 × H × W` tensor without tracking gradients.
pub fn model_forward<T: Scalar>(
    config: &ModelConfig,
    params: &ModelParameters<T>,
    image: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::<T>::inference();
    let bound = params.bind(&mut g);
    let input = g.constant(image.clone());
    let out = forward_graph(&mut g, config, &bound, input)?;
    Ok(g.value(out).clone())
}
