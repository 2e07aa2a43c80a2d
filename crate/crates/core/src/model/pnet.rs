use super::{ConvLayer, HpnetModel};
use crate::error::{HpnetError, Result};
use crate::numerics::{Tape, Tensor};

/// The flat, single-layer prototype network: one prototype set and one
/// evidence layer over all classes.
///
/// Its prototype head is evaluated directly (nearest patch, then similarity)
/// rather than through activation maps, so it serves as an independent check
/// of the hierarchical model on a one-level taxonomy.
#[derive(Clone, Debug)]
pub struct Pnet {
    pub backbone: Vec<ConvLayer>,
    pub adapter: [ConvLayer; 2],
    /// `[m, D']`
    pub prototypes: Tensor,
    /// `[classes, m]`
    pub fc: Tensor,
    pub epsilon: f64,
}

impl Pnet {
    /// Copies the weights of a hierarchical model whose taxonomy is flat.
    pub fn from_hpnet(model: &HpnetModel) -> Result<Self> {
        if model.layers.len() != 1 {
            return Err(HpnetError::Config(format!(
                "a flat network needs a one-level taxonomy, this one has {} parent nodes",
                model.layers.len()
            )));
        }
        let layer = &model.layers[0];
        Ok(Pnet {
            backbone: model.backbone.clone(),
            adapter: model.adapter.clone(),
            prototypes: layer.prototypes.clone(),
            fc: layer.fc.clone(),
            epsilon: layer.epsilon,
        })
    }

    fn latent(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut x = tape.constant(batch.clone());
        for conv in &self.backbone {
            let w = tape.constant(conv.weight.clone());
            let b = tape.constant(conv.bias.clone());
            x = tape.conv2d(x, w, conv.stride, conv.padding)?;
            x = tape.add_channel_bias(x, b)?;
            x = tape.relu(x);
        }
        for (i, conv) in self.adapter.iter().enumerate() {
            let w = tape.constant(conv.weight.clone());
            let b = tape.constant(conv.bias.clone());
            x = tape.conv2d(x, w, conv.stride, conv.padding)?;
            x = tape.add_channel_bias(x, b)?;
            x = if i == 0 {
                tape.relu(x)
            } else {
                tape.sigmoid(x)
            };
        }
        Ok(tape.value(x).clone())
    }

    /// Similarity scores `[N, m]`: `log(1 + 1/(min_patch ‖z̃ − p‖² + ε))`.
    pub fn scores(&self, batch: &Tensor) -> Result<Tensor> {
        let z = self.latent(batch)?;
        let (n, d, h, w) = z.dims4("latent")?;
        let (m, _) = self.prototypes.dims2("prototypes")?;
        let hw = h * w;
        let mut out = Vec::with_capacity(n * m);
        for ni in 0..n {
            for j in 0..m {
                let p = &self.prototypes.data()[j * d..(j + 1) * d];
                let mut best = f64::INFINITY;
                for pos in 0..hw {
                    let mut dist = 0.0;
                    for (k, &pk) in p.iter().enumerate() {
                        let diff = z.data()[(ni * d + k) * hw + pos] - pk;
                        dist += diff * diff;
                    }
                    best = best.min(dist);
                }
                out.push((1.0 + 1.0 / (best + self.epsilon)).ln());
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let s = self.scores(batch)?;
        let (n, m) = s.dims2("scores")?;
        let c = self.fc.shape()[0];
        let mut out = Vec::with_capacity(n * c);
        for ni in 0..n {
            let row = &s.data()[ni * m..(ni + 1) * m];
            for ci in 0..c {
                let w = &self.fc.data()[ci * m..(ci + 1) * m];
                out.push(row.iter().zip(w).map(|(a, b)| a * b).sum());
            }
        }
        Tensor::new(vec![n, c], out)
    }
}
