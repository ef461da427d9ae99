use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::layer::{self, LayerSpec, Saved};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// Width of the penultimate (feature) layer of [`Network::micro_cnn`].
pub const FEATURE_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    /// `[weight, bias]` for conv2d/dense; empty otherwise.
    pub params: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
struct Trace<T> {
    batch: usize,
    /// `inputs[i]` is the input buffer of layer `i`.
    inputs: Vec<Vec<T>>,
    saved: Vec<Saved>,
}

/// Feed-forward stack of layers with a fixed per-sample input shape.
#[derive(Clone, Debug)]
pub struct Network<T> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
    /// `shapes[i]` is the per-sample input shape of layer `i`; the last entry
    /// is the output shape.
    shapes: Vec<Vec<usize>>,
    trace: Option<Trace<T>>,
}

/// Equality of architecture and parameters; any stored training trace is ignored.
impl<T: PartialEq> PartialEq for Network<T> {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape && self.layers == other.layers
    }
}

impl<T: Scalar> Network<T> {
    /// Builds a network with freshly initialized parameters.
    pub fn new<R: Rng>(input_shape: Vec<usize>, specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|spec| Layer {
                spec: *spec,
                params: spec.init_params(rng),
            })
            .collect();
        Self::from_layers(input_shape, layers)
    }

    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer<T>>) -> Result<Self> {
        let mut shapes = vec![input_shape.clone()];
        for (i, l) in layers.iter().enumerate() {
            let next = l.spec.output_shape(shapes.last().unwrap()).map_err(|e| match e {
                Error::Shape {
                    context,
                    expected,
                    actual,
                } => Error::Shape {
                    context: format!("layer {i} ({context})"),
                    expected,
                    actual,
                },
                other => other,
            })?;
            shapes.push(next);
        }
        if shapes.last().map(Vec::len) != Some(1) {
            return Err(Error::invalid("network output must be a flat vector"));
        }
        for l in &layers {
            let expected = l.spec.param_shapes();
            let ok = expected.len() == l.params.len()
                && expected.iter().zip(&l.params).all(|(a, b)| a.as_slice() == b.shape());
            if !ok {
                return Err(Error::invalid(format!(
                    "parameters of {} layer do not match its spec",
                    l.spec.name()
                )));
            }
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
            trace: None,
        })
    }

    /// The default micro-CNN: two 3×3 conv/relu/pool stages, a 64-wide hidden
    /// dense layer, and a `num_outputs` readout. `resolution` must be a
    /// multiple of 4.
    pub fn micro_cnn<R: Rng>(
        in_channels: usize,
        resolution: usize,
        num_outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(
            vec![in_channels, resolution, resolution],
            &micro_cnn_specs(in_channels, resolution, num_outputs)?,
            rng,
        )
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_outputs(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// Per-sample output shape after the first `n` layers.
    pub fn shape_after(&self, n: usize) -> &[usize] {
        &self.shapes[n]
    }

    pub fn param_count(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// SHA-256 over the little-endian bytes of every parameter, in layer order.
    pub fn param_digest(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            for v in p.data() {
                h.update(v.to_f64().unwrap().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copies parameters from `other` for every layer index where both specs
    /// agree. Returns the indices that were copied.
    pub fn copy_matching_params(&mut self, other: &Network<T>) -> Vec<usize> {
        let mut copied = Vec::new();
        for (i, (dst, src)) in self.layers.iter_mut().zip(&other.layers).enumerate() {
            if dst.spec == src.spec && !dst.params.is_empty() {
                dst.params = src.params.iter().map(|p| {
                    let mut p = p.clone();
                    p.clear_grad();
                    p
                }).collect();
                copied.push(i);
            }
        }
        copied
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<usize> {
        let shape = batch.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            let mut expected = vec![shape.first().copied().unwrap_or(0)];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::Shape {
                context: format!("layer 0 ({}) input", self.layers[0].spec.name()),
                expected,
                actual: shape.to_vec(),
            });
        }
        if !batch.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                what: "network input".into(),
            });
        }
        Ok(shape[0])
    }

    /// Raw logits for a `[B, ...input_shape]` batch. Pure: no state is touched.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_prefix(batch, self.layers.len())
    }

    /// Activations after the first `n_layers` layers, flattened per sample.
    pub fn forward_prefix(&self, batch: &Tensor<T>, n_layers: usize) -> Result<Tensor<T>> {
        let b = self.check_input(batch)?;
        let n_layers = n_layers.min(self.layers.len());
        let mut x = batch.data().to_vec();
        for i in 0..n_layers {
            let l = &self.layers[i];
            x = layer::forward(&l.spec, &l.params, &x, &self.shapes[i], b, false).0;
        }
        let width = self.shapes[n_layers].iter().product();
        Tensor::new(vec![b, width], x)
    }

    /// Forward pass that records what [`Network::backward`] needs.
    pub fn forward_train(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.check_input(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut saved = Vec::with_capacity(self.layers.len());
        let mut x = batch.data().to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let (y, s) = layer::forward(&l.spec, &l.params, &x, &self.shapes[i], b, true);
            inputs.push(x);
            saved.push(s);
            x = y;
        }
        self.trace = Some(Trace {
            batch: b,
            inputs,
            saved,
        });
        Tensor::new(vec![b, self.num_outputs()], x)
    }

    /// Back-propagates `grad_out` through the last recorded forward pass.
    ///
    /// Parameter gradients are overwritten, not accumulated, so calling this
    /// twice on the same trace gives the same result. Returns the gradient
    /// with respect to the network input.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let trace = self.trace.take().ok_or(Error::NoForwardPass)?;
        let result = self.backward_with(&trace, grad_out);
        self.trace = Some(trace);
        result
    }

    fn backward_with(&mut self, trace: &Trace<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let expected = vec![trace.batch, self.num_outputs()];
        if grad_out.shape() != expected.as_slice() {
            return Err(Error::Shape {
                context: "backward grad_out".into(),
                expected,
                actual: grad_out.shape().to_vec(),
            });
        }
        for p in self.params_mut() {
            let g = p.grad_mut();
            g.iter_mut().for_each(|v| *v = T::zero());
        }
        let mut g = grad_out.data().to_vec();
        for i in (0..self.layers.len()).rev() {
            let l = &mut self.layers[i];
            g = layer::backward(
                &l.spec,
                &mut l.params,
                &trace.inputs[i],
                &self.shapes[i],
                &trace.saved[i],
                &g,
                trace.batch,
                true,
            )
            .expect("input gradient requested");
        }
        for (i, l) in self.layers.iter().enumerate() {
            if !l.params.iter().all(Tensor::is_finite) {
                return Err(Error::NonFinite {
                    what: format!("gradient of layer {i} ({})", l.spec.name()),
                });
            }
        }
        let mut shape = vec![trace.batch];
        shape.extend_from_slice(&self.input_shape);
        Tensor::new(shape, g)
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec,
                    params: l.params.iter().map(Tensor::cast).collect(),
                })
                .collect(),
            shapes: self.shapes.clone(),
            trace: None,
        }
    }
}

/// Layer list of the micro-CNN for a given input size.
pub fn micro_cnn_specs(
    in_channels: usize,
    resolution: usize,
    num_outputs: usize,
) -> Result<Vec<LayerSpec>> {
    if resolution == 0 || !resolution.is_multiple_of(4) || num_outputs == 0 {
        return Err(Error::invalid(format!(
            "micro-CNN needs a resolution divisible by 4 and ≥1 output (got {resolution}, {num_outputs})"
        )));
    }
    let pooled = resolution / 4;
    Ok(vec![
        LayerSpec::Conv2d { in_channels, out_channels: 8 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d,
        LayerSpec::Conv2d { in_channels: 8, out_channels: 16 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d,
        LayerSpec::Flatten,
        LayerSpec::Dense { in_dim: 16 * pooled * pooled, out_dim: FEATURE_DIM },
        LayerSpec::Relu,
        LayerSpec::Dense { in_dim: FEATURE_DIM, out_dim: num_outputs },
    ])
}

/// Number of layers up to and including the penultimate activation.
pub const MICRO_CNN_FEATURE_LAYERS: usize = 9;

/// Closed-form parameter count of the single-channel micro-CNN:
/// `80 + 1168 + (16·(r/4)² + 1)·64 + 65·K`.
pub fn micro_cnn_param_count(resolution: usize, num_outputs: usize) -> usize {
    let pooled = resolution / 4;
    (9 + 1) * 8 + (8 * 9 + 1) * 16 + (16 * pooled * pooled + 1) * FEATURE_DIM
        + (FEATURE_DIM + 1) * num_outputs
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64) -> Network<f32> {
        Network::micro_cnn(1, 16, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn micro_cnn_param_counts_are_documented_constants() {
        assert_eq!(net(0).param_count(), 17_956);
        assert_eq!(micro_cnn_param_count(16, 4), 17_956);
        let n32 = Network::<f32>::micro_cnn(1, 32, 100, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(n32.param_count(), micro_cnn_param_count(32, 100));
        assert_eq!(micro_cnn_param_count(32, 100), 73_348);
    }

    #[test]
    fn forward_yields_batch_by_outputs_and_is_pure() {
        let n = net(1);
        let x = Tensor::new(vec![3, 1, 16, 16], (0..768).map(|i| (i % 7) as f32 / 7.0).collect())
            .unwrap();
        let a = n.forward(&x).unwrap();
        let b = n.forward(&x).unwrap();
        assert_eq!(a.shape(), &[3, 4]);
        assert_eq!(a.data(), b.data());
        assert!(a.is_finite());
    }

    #[test]
    fn shape_mismatch_names_the_layer() {
        let n = net(2);
        let x = Tensor::<f32>::zeros(vec![1, 1, 12, 12]);
        let msg = n.forward(&x).unwrap_err().to_string();
        assert!(msg.contains("layer 0"), "{msg}");
        let bad = [LayerSpec::Flatten, LayerSpec::Dense { in_dim: 5, out_dim: 2 }];
        let err = Network::<f32>::new(vec![1, 2, 2], &bad, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(err.unwrap_err().to_string().contains("layer 1"));
    }

    #[test]
    fn backward_requires_forward() {
        let mut n = net(3);
        let g = Tensor::zeros(vec![1, 4]);
        assert!(matches!(n.backward(&g), Err(Error::NoForwardPass)));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradients() {
        let mut n = net(4);
        let x = Tensor::new(vec![2, 1, 16, 16], vec![0.5; 512]).unwrap();
        n.forward_train(&x).unwrap();
        n.backward(&Tensor::zeros(vec![2, 4])).unwrap();
        for p in n.params() {
            assert!(p.grad().unwrap().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn repeated_backward_overwrites() {
        let mut n = net(5);
        let x = Tensor::new(vec![2, 1, 16, 16], (0..512).map(|i| (i % 5) as f32).collect())
            .unwrap();
        n.forward_train(&x).unwrap();
        let g = Tensor::new(vec![2, 4], vec![0.1, -0.2, 0.3, 0.4, 1.0, 0.0, -1.0, 0.5]).unwrap();
        n.backward(&g).unwrap();
        let first: Vec<Vec<f32>> = n.params().map(|p| p.grad().unwrap().to_vec()).collect();
        n.backward(&g).unwrap();
        let second: Vec<Vec<f32>> = n.params().map(|p| p.grad().unwrap().to_vec()).collect();
        assert_eq!(first, second);
    }
}
