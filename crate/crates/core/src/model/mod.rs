//! The hierarchical prototype network: a convolutional backbone, two 1×1
//! adapter convolutions producing patch vectors in the unit hypercube, and one
//! prototype layer per parent node of the taxonomy, all reading the same latent.

mod checkpoint;
mod config;
mod layer;
mod pnet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{
    checkpoint_digest, decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint,
    load_checkpoint_for, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{BackboneConfig, ModelConfig, StageConfig};
pub use layer::{PrototypeLayer, SimilarityOutput};
pub use pnet::Pnet;

use crate::error::{HpnetError, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::taxonomy::{NodeId, Taxonomy};

/// A convolution with per-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    /// He-uniform weights, zero bias.
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        ConvLayer {
            weight: Tensor::from_fn(&[out_ch, in_ch, kernel, kernel], |_| {
                rng.gen_range(-bound..bound)
            }),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            padding,
        }
    }

    fn apply(&self, tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.conv2d(x, w, self.stride, self.padding)?;
        tape.add_channel_bias(y, b)
    }
}

/// Which block a parameter belongs to; training phases freeze by group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Adapter,
    Prototypes,
    Fc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
    /// Number of projection phases the prototypes have been through.
    pub projections: usize,
}

/// Tape handles for every model parameter, in [`HpnetModel::parameters`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub backbone: Vec<(Var, Var)>,
    pub adapter: [(Var, Var); 2],
    pub prototypes: Vec<Var>,
    pub fc: Vec<Var>,
}

impl ModelVars {
    /// All handles, aligned with [`HpnetModel::parameters`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in self.backbone.iter().chain(self.adapter.iter()) {
            out.push(*w);
            out.push(*b);
        }
        for (p, f) in self.prototypes.iter().zip(&self.fc) {
            out.push(*p);
            out.push(*f);
        }
        out
    }
}

/// Per-layer nodes of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// `[N, m, H, W]` squared patch–prototype distances.
    pub distances: Var,
    pub maps: Var,
    pub scores: Var,
    pub argmax: Vec<(usize, usize)>,
    pub logits: Var,
    pub log_probs: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub latent: Var,
    pub layers: Vec<LayerTrace>,
}

/// Plain values of a forward pass for one prototype layer.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub scores: Tensor,
    pub maps: Tensor,
    pub argmax: Vec<(usize, usize)>,
    pub logits: Tensor,
    /// Conditional distribution over the parent's children, one row per image.
    pub probs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub latent: Tensor,
    pub layers: Vec<LayerOutput>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HpnetModel {
    config: ModelConfig,
    taxonomy: Taxonomy,
    pub backbone: Vec<ConvLayer>,
    pub adapter: [ConvLayer; 2],
    /// One layer per parent node, in [`Taxonomy::parents`] order.
    pub layers: Vec<PrototypeLayer>,
    pub meta: CheckpointMeta,
}

/// SHA-256 over the canonical taxonomy and the serialized model config.
pub fn config_hash(taxonomy: &Taxonomy, config: &ModelConfig) -> String {
    let mut h = Sha256::new();
    h.update(taxonomy.canonical_json().as_bytes());
    h.update(b"\n");
    h.update(
        serde_json::to_string(config)
            .expect("serializable")
            .as_bytes(),
    );
    hex::encode(h.finalize())
}

impl HpnetModel {
    pub fn new(config: ModelConfig, taxonomy: Taxonomy, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = &config.backbone;
        let mut in_ch = bb.in_channels;
        let mut backbone = Vec::with_capacity(bb.stages.len());
        for s in &bb.stages {
            backbone.push(ConvLayer::new(
                in_ch,
                s.out_channels,
                s.kernel,
                s.stride,
                s.padding,
                &mut rng,
            ));
            in_ch = s.out_channels;
        }
        let dp = bb.adapter_channels;
        let adapter = [
            ConvLayer::new(in_ch, dp, 1, 1, 0, &mut rng),
            ConvLayer::new(dp, dp, 1, 1, 0, &mut rng),
        ];
        let layers = taxonomy
            .parents()
            .iter()
            .map(|&p| {
                PrototypeLayer::new(
                    taxonomy.name(p),
                    taxonomy.children(p).len(),
                    config.prototypes_per_class,
                    dp,
                    config.epsilon,
                    &mut rng,
                )
            })
            .collect();
        let meta = CheckpointMeta {
            seed,
            config_hash: config_hash(&taxonomy, &config),
            projections: 0,
        };
        Ok(HpnetModel {
            config,
            taxonomy,
            backbone,
            adapter,
            layers,
            meta,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn layer_index(&self, parent: NodeId) -> Option<usize> {
        self.taxonomy.parent_index(parent)
    }

    pub fn layer_by_name(&self, parent: &str) -> Option<(usize, &PrototypeLayer)> {
        self.layers
            .iter()
            .enumerate()
            .find(|(_, l)| l.parent == parent)
    }

    /// Named parameters with their group, in a fixed order.
    pub fn parameters(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.backbone.iter().enumerate() {
            out.push((
                format!("backbone.{i}.weight"),
                ParamGroup::Backbone,
                &c.weight,
            ));
            out.push((format!("backbone.{i}.bias"), ParamGroup::Backbone, &c.bias));
        }
        for (i, c) in self.adapter.iter().enumerate() {
            out.push((
                format!("adapter.{i}.weight"),
                ParamGroup::Adapter,
                &c.weight,
            ));
            out.push((format!("adapter.{i}.bias"), ParamGroup::Adapter, &c.bias));
        }
        for l in &self.layers {
            out.push((
                format!("prototypes.{}", l.parent),
                ParamGroup::Prototypes,
                &l.prototypes,
            ));
            out.push((format!("fc.{}", l.parent), ParamGroup::Fc, &l.fc));
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, ParamGroup, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.backbone.iter_mut().enumerate() {
            out.push((
                format!("backbone.{i}.weight"),
                ParamGroup::Backbone,
                &mut c.weight,
            ));
            out.push((
                format!("backbone.{i}.bias"),
                ParamGroup::Backbone,
                &mut c.bias,
            ));
        }
        for (i, c) in self.adapter.iter_mut().enumerate() {
            out.push((
                format!("adapter.{i}.weight"),
                ParamGroup::Adapter,
                &mut c.weight,
            ));
            out.push((
                format!("adapter.{i}.bias"),
                ParamGroup::Adapter,
                &mut c.bias,
            ));
        }
        for l in &mut self.layers {
            out.push((
                format!("prototypes.{}", l.parent),
                ParamGroup::Prototypes,
                &mut l.prototypes,
            ));
            out.push((format!("fc.{}", l.parent), ParamGroup::Fc, &mut l.fc));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().iter().all(|(_, _, t)| t.is_finite())
    }

    /// Records every parameter on `tape`; groups for which `trainable`
    /// returns false become constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamGroup) -> bool) -> ModelVars {
        let mut leaf = |t: &Tensor, g: ParamGroup| {
            if trainable(g) {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let backbone = self
            .backbone
            .iter()
            .map(|c| {
                (
                    leaf(&c.weight, ParamGroup::Backbone),
                    leaf(&c.bias, ParamGroup::Backbone),
                )
            })
            .collect();
        let adapter = [0, 1].map(|i| {
            (
                leaf(&self.adapter[i].weight, ParamGroup::Adapter),
                leaf(&self.adapter[i].bias, ParamGroup::Adapter),
            )
        });
        let mut prototypes = Vec::new();
        let mut fc = Vec::new();
        for l in &self.layers {
            prototypes.push(leaf(&l.prototypes, ParamGroup::Prototypes));
            fc.push(leaf(&l.fc, ParamGroup::Fc));
        }
        ModelVars {
            backbone,
            adapter,
            prototypes,
            fc,
        }
    }

    /// Binds parameters from explicit tensors (aligned with [`Self::parameters`]).
    pub fn vars_from(&self, values: &[Var]) -> Result<ModelVars> {
        let expected = 2 * (self.backbone.len() + 2 + self.layers.len());
        if values.len() != expected {
            return Err(HpnetError::Dimension(format!(
                "expected {expected} parameter handles, got {}",
                values.len()
            )));
        }
        let nb = self.backbone.len();
        let pair = |i: usize| (values[2 * i], values[2 * i + 1]);
        let backbone = (0..nb).map(pair).collect();
        let adapter = [pair(nb), pair(nb + 1)];
        let base = 2 * (nb + 2);
        let prototypes = (0..self.layers.len())
            .map(|k| values[base + 2 * k])
            .collect();
        let fc = (0..self.layers.len())
            .map(|k| values[base + 2 * k + 1])
            .collect();
        Ok(ModelVars {
            backbone,
            adapter,
            prototypes,
            fc,
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let bb = &self.config.backbone;
        match shape {
            [_, c, h, w] if *c == bb.in_channels && *h == bb.input_size && *w == bb.input_size => {
                Ok(())
            }
            _ => Err(HpnetError::Dimension(format!(
                "input batch shape {shape:?} does not match [N, {}, {}, {}]",
                bb.in_channels, bb.input_size, bb.input_size
            ))),
        }
    }

    /// Backbone and adapters: the shared latent `z` of shape `[N, D', H, W]`.
    pub fn latent_on(&self, tape: &mut Tape, vars: &ModelVars, input: Var) -> Result<Var> {
        self.check_input(tape.value(input).shape())?;
        let mut x = input;
        for (conv, &(w, b)) in self.backbone.iter().zip(&vars.backbone) {
            x = conv.apply(tape, x, w, b)?;
            x = tape.relu(x);
        }
        let (w0, b0) = vars.adapter[0];
        x = self.adapter[0].apply(tape, x, w0, b0)?;
        x = tape.relu(x);
        let (w1, b1) = vars.adapter[1];
        x = self.adapter[1].apply(tape, x, w1, b1)?;
        Ok(tape.sigmoid(x))
    }

    pub fn layer_on(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        index: usize,
        latent: Var,
    ) -> Result<LayerTrace> {
        let layer = &self.layers[index];
        let distances = tape.patch_sq_distances(latent, vars.prototypes[index])?;
        let maps = tape.similarity(distances, layer.epsilon);
        let (scores, argmax) = tape.spatial_max(maps)?;
        let logits = tape.matmul_t(scores, vars.fc[index])?;
        let log_probs = tape.log_softmax(logits)?;
        Ok(LayerTrace {
            distances,
            maps,
            scores,
            argmax,
            logits,
            log_probs,
        })
    }

    pub fn trace(&self, tape: &mut Tape, vars: &ModelVars, input: Var) -> Result<ForwardTrace> {
        let latent = self.latent_on(tape, vars, input)?;
        let layers = (0..self.layers.len())
            .map(|k| self.layer_on(tape, vars, k, latent))
            .collect::<Result<_>>()?;
        Ok(ForwardTrace { latent, layers })
    }

    pub fn forward_latent(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, |_| false);
        let x = tape.constant(batch.clone());
        let z = self.latent_on(&mut tape, &vars, x)?;
        Ok(tape.value(z).clone())
    }

    /// Full forward pass returning plain values for every prototype layer.
    pub fn forward(&self, batch: &Tensor) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, |_| false);
        let x = tape.constant(batch.clone());
        let tr = self.trace(&mut tape, &vars, x)?;
        let layers = tr
            .layers
            .iter()
            .zip(&self.layers)
            .map(|(lt, layer)| {
                let logits = tape.value(lt.logits).clone();
                LayerOutput {
                    scores: tape.value(lt.scores).clone(),
                    maps: tape.value(lt.maps).clone(),
                    argmax: lt.argmax.clone(),
                    probs: layer.conditional(&logits),
                    logits,
                }
            })
            .collect();
        Ok(ForwardOutput {
            latent: tape.value(tr.latent).clone(),
            layers,
        })
    }

    /// Forward over many `[C, H, W]` images in fixed-size chunks.
    pub fn forward_images(&self, images: &[&Tensor], chunk: usize) -> Result<Vec<ForwardOutput>> {
        images
            .chunks(chunk.max(1))
            .map(|c| self.forward(&Tensor::stack(c)?))
            .collect()
    }
}
