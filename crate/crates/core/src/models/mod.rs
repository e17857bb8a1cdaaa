//! Multilayer-perceptron speaker embedders with a cosine classifier head.
//!
//! Hidden layers are affine + ReLU; the final affine layer is linear and its
//! output is the embedding. The head scores the unit-normalised embedding
//! against unit-norm class weight rows, giving one cosine per class.

mod checkpoint;

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix, RngStream};

/// One affine layer; `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Dense {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Model parameters. The same layout doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
    /// `K × embedding_dim`, rows kept at unit norm by the optimiser.
    pub class_weights: Matrix,
}

/// Intermediate values of one forward pass, consumed by [`MlpParams::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    pub pre_activations: Vec<Vec<f64>>,
    pub activations: Vec<Vec<f64>>,
    pub embedding_norm: f64,
    pub normalized_embedding: Vec<f64>,
    pub cosines: Vec<f64>,
}

impl ForwardTrace {
    /// Output of the last layer, before normalisation.
    pub fn embedding(&self) -> &[f64] {
        self.activations.last().expect("at least one layer")
    }
}

/// He-style uniform initialisation: weights `U(-b, b)` with
/// `b = sqrt(6 / fan_in)`, zero biases, class weights drawn standard normal
/// and scaled to unit rows.
pub fn init_params(layer_dims: &[usize], num_classes: usize, rng: &mut RngStream) -> Result<MlpParams> {
    if layer_dims.len() < 2 {
        return Err(Error::domain("an MLP needs at least an input and an output dimension"));
    }
    if layer_dims.contains(&0) {
        return Err(Error::domain(format!("layer dimensions must be positive: {layer_dims:?}")));
    }
    if num_classes < 2 {
        return Err(Error::domain(format!("need at least 2 classes, got {num_classes}")));
    }
    let layers = layer_dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.uniform_range(-bound, bound))
                .collect();
            Dense {
                weight: Matrix::from_vec(fan_out, fan_in, data),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    let emb = *layer_dims.last().unwrap();
    let mut class_weights =
        Matrix::from_vec(num_classes, emb, (0..num_classes * emb).map(|_| rng.normal()).collect());
    class_weights.normalize_rows();
    Ok(MlpParams {
        layers,
        class_weights,
    })
}

impl MlpParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.class_weights.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_weights.rows()
    }

    /// `[input, hidden..., embedding]`
    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::out_dim))
            .collect()
    }

    pub fn zeros_like(&self) -> MlpParams {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            class_weights: Matrix::zeros(self.num_classes(), self.embedding_dim()),
        }
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Every parameter block in a fixed order: per layer weight then bias,
    /// then the class weights.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(&l.bias);
        }
        out.push(self.class_weights.as_slice());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(&mut l.bias);
        }
        out.push(self.class_weights.as_mut_slice());
        out
    }

    pub fn fill(&mut self, value: f64) {
        for s in self.slices_mut() {
            s.fill(value);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Checks that layer shapes chain and match the head.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::domain("model has no layers"));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::domain(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::domain(format!("layer {i} bias has wrong length")));
            }
        }
        if self.layers.last().unwrap().out_dim() != self.class_weights.cols() {
            return Err(Error::domain("class weight width differs from the embedding dimension"));
        }
        if self.num_classes() < 2 {
            return Err(Error::domain("need at least 2 classes"));
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::domain(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("input contains non-finite values"));
        }
        Ok(())
    }

    fn layer_outputs(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { x } else { &act[i - 1] };
            let mut z = layer.weight.matvec(input);
            z.iter_mut().zip(&layer.bias).for_each(|(v, b)| *v += b);
            let a = if i == last {
                z.clone()
            } else {
                z.iter().map(|v| v.max(0.0)).collect()
            };
            pre.push(z);
            act.push(a);
        }
        (pre, act)
    }

    /// Embedding only, without the classifier head.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let (_, mut act) = self.layer_outputs(x);
        Ok(act.pop().unwrap())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let (pre_activations, activations) = self.layer_outputs(x);
        let embedding = activations.last().unwrap();
        let embedding_norm = norm(embedding);
        if embedding_norm == 0.0 {
            return Err(Error::degenerate("zero embedding; cosine scores are undefined"));
        }
        let normalized_embedding: Vec<f64> = embedding.iter().map(|v| v / embedding_norm).collect();
        let cosines = self.class_weights.matvec(&normalized_embedding);
        Ok(ForwardTrace {
            input: x.to_vec(),
            pre_activations,
            activations,
            embedding_norm,
            normalized_embedding,
            cosines,
        })
    }

    /// Reverse-mode gradients of a loss whose partial derivatives w.r.t. the
    /// cosines and the raw embedding are given.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_cosines: &[f64],
        grad_embedding: &[f64],
    ) -> Result<MlpParams> {
        let mut grads = self.zeros_like();
        self.backward_into(trace, grad_cosines, grad_embedding, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Self::backward`], accumulating into `grads`.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        grad_cosines: &[f64],
        grad_embedding: &[f64],
        grads: &mut MlpParams,
    ) -> Result<()> {
        if grad_cosines.len() != self.num_classes() || trace.cosines.len() != self.num_classes() {
            return Err(Error::domain("cosine gradient length does not match the class count"));
        }
        if grad_embedding.len() != self.embedding_dim()
            || trace.normalized_embedding.len() != self.embedding_dim()
        {
            return Err(Error::domain("embedding gradient length does not match the model"));
        }
        if trace.activations.len() != self.layers.len() || grads.layers.len() != self.layers.len() {
            return Err(Error::domain("trace or gradient buffer built for a different model"));
        }

        let e_hat = &trace.normalized_embedding;
        grads.class_weights.add_outer(1.0, grad_cosines, e_hat);
        // through e_hat = e / |e|
        let d_hat = self.class_weights.matvec_t(grad_cosines);
        let radial = dot(e_hat, &d_hat);
        let mut delta: Vec<f64> = d_hat
            .iter()
            .zip(e_hat)
            .zip(grad_embedding)
            .map(|((d, e), g)| (d - e * radial) / trace.embedding_norm + g)
            .collect();

        for i in (0..self.layers.len()).rev() {
            let input = if i == 0 {
                &trace.input
            } else {
                &trace.activations[i - 1]
            };
            let g = &mut grads.layers[i];
            g.weight.add_outer(1.0, &delta, input);
            g.bias.iter_mut().zip(&delta).for_each(|(b, d)| *b += d);
            if i > 0 {
                let mut upstream = self.layers[i].weight.matvec_t(&delta);
                upstream
                    .iter_mut()
                    .zip(&trace.pre_activations[i - 1])
                    .for_each(|(u, z)| {
                        if *z <= 0.0 {
                            *u = 0.0;
                        }
                    });
                delta = upstream;
            }
        }
        Ok(())
    }
}
