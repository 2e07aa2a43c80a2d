use rand::Rng;

use crate::error::{HpnetError, Result};
use crate::numerics::{softmax, Tape, Tensor};

/// Prototypes of one parent node plus the evidence layer mapping their
/// similarity scores to the parent's child logits.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeLayer {
    pub parent: String,
    /// `[m, D']`
    pub prototypes: Tensor,
    /// Child index each prototype is allocated to.
    pub allocation: Vec<usize>,
    /// `[num_children, m]`
    pub fc: Tensor,
    pub epsilon: f64,
}

#[derive(Clone, Debug)]
pub struct SimilarityOutput {
    /// `[N, m]`
    pub scores: Tensor,
    /// `[N, m, H, W]`
    pub maps: Tensor,
    /// Argmax (row, col) per (n, j), row-major over `n` then `j`.
    pub argmax: Vec<(usize, usize)>,
}

impl PrototypeLayer {
    /// Allocates `per_class` prototypes to each child in order, drawn uniformly
    /// from the unit hypercube, and initializes the evidence weights.
    pub fn new(
        parent: impl Into<String>,
        num_children: usize,
        per_class: usize,
        dim: usize,
        epsilon: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let m = num_children * per_class;
        let allocation: Vec<usize> = (0..m).map(|j| j / per_class).collect();
        let prototypes = Tensor::from_fn(&[m, dim], |_| rng.gen::<f64>());
        let mut layer = PrototypeLayer {
            parent: parent.into(),
            prototypes,
            allocation,
            fc: Tensor::zeros(&[num_children, m]),
            epsilon,
        };
        layer.init_fc();
        layer
    }

    pub fn num_children(&self) -> usize {
        self.fc.shape()[0]
    }

    pub fn num_prototypes(&self) -> usize {
        self.allocation.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    /// Indices of the prototypes allocated to child `c`.
    pub fn prototypes_of(&self, c: usize) -> Vec<usize> {
        (0..self.num_prototypes())
            .filter(|&j| self.allocation[j] == c)
            .collect()
    }

    pub fn prototype(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.prototypes.data()[j * d..(j + 1) * d]
    }

    /// Evidence weights: 1 for a prototype's own class, −0.5 for every other class.
    pub fn init_fc(&mut self) {
        let (c, m) = (self.num_children(), self.num_prototypes());
        let alloc = &self.allocation;
        self.fc = Tensor::from_fn(&[c, m], |i| if alloc[i % m] == i / m { 1.0 } else { -0.5 });
    }

    /// Checks that every child has at least one prototype and shapes agree.
    pub fn validate(&self) -> Result<()> {
        let c = self.num_children();
        if self.fc.shape() != [c, self.num_prototypes()] {
            return Err(HpnetError::Dimension(format!(
                "layer {}: fc shape {:?} does not match {c} children x {} prototypes",
                self.parent,
                self.fc.shape(),
                self.num_prototypes()
            )));
        }
        if let Some(missing) = (0..c).find(|&k| !self.allocation.contains(&k)) {
            return Err(HpnetError::Config(format!(
                "layer {}: child {missing} has no prototypes",
                self.parent
            )));
        }
        Ok(())
    }

    /// Activation maps `log(1 + 1/(‖z̃ − p‖² + ε))` and their spatial maxima.
    pub fn similarity_scores(&self, z: &Tensor) -> Result<SimilarityOutput> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let pv = tape.constant(self.prototypes.clone());
        let d = tape.patch_sq_distances(zv, pv)?;
        let maps = tape.similarity(d, self.epsilon);
        let (scores, argmax) = tape.spatial_max(maps)?;
        Ok(SimilarityOutput {
            scores: tape.value(scores).clone(),
            maps: tape.value(maps).clone(),
            argmax,
        })
    }

    /// `scores · fcᵀ`, one row of child logits per image.
    pub fn parent_logits(&self, scores: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let s = tape.constant(scores.clone());
        let w = tape.constant(self.fc.clone());
        let l = tape.matmul_t(s, w)?;
        Ok(tape.value(l).clone())
    }

    /// Softmax of each logit row: the conditional distribution over children.
    pub fn conditional(&self, logits: &Tensor) -> Vec<Vec<f64>> {
        let c = self.num_children();
        logits.data().chunks_exact(c).map(softmax).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(children: usize, per: usize, dim: usize) -> PrototypeLayer {
        PrototypeLayer::new(
            "p",
            children,
            per,
            dim,
            1e-4,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
    }

    #[test]
    fn init_fc_two_by_two() {
        let l = layer(2, 2, 3);
        assert_eq!(l.fc.data(), &[1.0, 1.0, -0.5, -0.5, -0.5, -0.5, 1.0, 1.0]);
    }

    #[test]
    fn init_fc_degenerate_single_child() {
        let l = layer(1, 3, 2);
        assert_eq!(l.fc.data(), &[1.0; 3]);
    }

    #[test]
    fn init_fc_three_children_eight_each() {
        let l = layer(3, 8, 2);
        for row in l.fc.data().chunks(24) {
            assert_eq!(row.iter().filter(|&&w| w == 1.0).count(), 8);
            assert_eq!(row.iter().filter(|&&w| w == -0.5).count(), 16);
        }
        l.validate().unwrap();
    }

    #[test]
    fn prototypes_start_in_unit_hypercube() {
        let l = layer(3, 8, 32);
        assert!(l.prototypes.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    fn single_patch_layer(proto: Vec<f64>) -> PrototypeLayer {
        let d = proto.len();
        let mut l = layer(1, 1, d);
        l.prototypes = Tensor::new(vec![1, d], proto).unwrap();
        l
    }

    #[test]
    fn similarity_of_exact_match() {
        let l = single_patch_layer(vec![0.3, 0.6]);
        let z = Tensor::new(vec![1, 2, 1, 1], vec![0.3, 0.6]).unwrap();
        let out = l.similarity_scores(&z).unwrap();
        let expected = (10001.0f64).ln();
        assert!((out.scores.item() - expected).abs() < 1e-12);
        assert!((expected - 9.21044).abs() < 1e-5);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn similarity_at_unit_distance() {
        let l = single_patch_layer(vec![0.0, 0.0]);
        let z = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let out = l.similarity_scores(&z).unwrap();
        assert!((out.scores.item() - (1.0 + 1.0 / 1.0001f64).ln()).abs() < 1e-15);
        assert!((out.scores.item() - 0.69310).abs() < 1e-5);
    }

    #[test]
    fn score_is_best_patch() {
        // patches at squared distances 4, 0.25, 9 from the origin
        let l = single_patch_layer(vec![0.0]);
        let z = Tensor::new(vec![1, 1, 1, 3], vec![2.0, 0.5, 3.0]).unwrap();
        let out = l.similarity_scores(&z).unwrap();
        let brute = [4.0, 0.25, 9.0]
            .iter()
            .map(|d: &f64| (1.0 + 1.0 / (d + 1e-4)).ln())
            .fold(f64::MIN, f64::max);
        assert_eq!(out.scores.item(), brute);
        assert_eq!(out.argmax, vec![(0, 1)]);
    }

    #[test]
    fn logits_under_init_weights() {
        let l = layer(3, 2, 4);
        let s = 0.7;
        let scores = Tensor::filled(&[1, 6], s);
        let logits = l.parent_logits(&scores).unwrap();
        // each child: s·(m_own − 0.5·m_other) = 0.7·(2 − 0.5·4)
        for &v in logits.data() {
            assert!((v - s * (2.0 - 0.5 * 4.0)).abs() < 1e-12);
        }
        let zero = l.parent_logits(&Tensor::zeros(&[1, 6])).unwrap();
        let cond = l.conditional(&zero);
        assert!(cond[0].iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        let mut onehot = Tensor::zeros(&[1, 6]);
        onehot.data_mut()[3] = 1.0; // prototype 3 belongs to child 1
        let l1 = l.parent_logits(&onehot).unwrap();
        assert_eq!(l1.data(), &[-0.5, 1.0, -0.5]);
    }
}
