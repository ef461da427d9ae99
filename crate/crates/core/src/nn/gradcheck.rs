//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::layer::LayerSpec;
use crate::nn::loss::softmax_cross_entropy;
use crate::nn::network::Network;
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor so that near-zero gradients are compared absolutely.
    pub floor: f64,
}

impl GradCheckConfig {
    pub const F64: Self = Self {
        step: 1e-5,
        floor: 1e-6,
    };
    pub const F32: Self = Self {
        step: 1e-3,
        floor: 1e-3,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradError {
    pub layer: usize,
    pub kind: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub layers: Vec<LayerGradError>,
    /// Error of the gradient with respect to the network input.
    pub input_max_rel_error: f64,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.max_rel_error)
            .fold(self.input_max_rel_error, f64::max)
    }
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backprop gradients of the mean cross-entropy against central
/// differences for every parameter and every input element.
pub fn gradient_check<T: Scalar>(
    net: &Network<T>,
    batch: &Tensor<T>,
    targets: &[usize],
    cfg: GradCheckConfig,
) -> Result<GradReport> {
    let loss_of = |n: &Network<T>, x: &Tensor<T>| -> Result<f64> {
        let logits = n.forward(x)?;
        Ok(softmax_cross_entropy(&logits, targets)?.0.to_f64().unwrap())
    };
    check_with(net, batch, cfg, loss_of, |n, x| {
        let logits = n.forward_train(x)?;
        let (_, g) = softmax_cross_entropy(&logits, targets)?;
        n.backward(&g)
    })
}

/// Checks a single layer in isolation under the linear readout `Σ r·y`,
/// covering the input gradient of parameterless kinds too.
pub fn layer_gradient_check<T: Scalar>(
    spec: LayerSpec,
    input_shape: &[usize],
    batch: usize,
    seed: u64,
    cfg: GradCheckConfig,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = vec![spec];
    if spec.output_shape(input_shape)?.len() != 1 {
        specs.push(LayerSpec::Flatten);
    }
    let mut net = Network::<T>::new(input_shape.to_vec(), &specs, &mut rng)?;
    // Non-zero biases so bias gradients interact with the rest of the layer.
    for p in net.params_mut() {
        if p.shape().len() == 1 {
            for v in p.data_mut() {
                *v = T::lit(rng.gen_range(-0.5..0.5));
            }
        }
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(input_shape);
    let n_in: usize = shape.iter().product();
    let x = Tensor::new(shape, (0..n_in).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect())?;
    let n_out = batch * net.num_outputs();
    let readout: Vec<T> = (0..n_out).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect();
    let r = Tensor::new(vec![batch, net.num_outputs()], readout)?;
    let loss_of = |n: &Network<T>, x: &Tensor<T>| -> Result<f64> {
        let y = n.forward(x)?;
        Ok(y.data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| a.to_f64().unwrap() * b.to_f64().unwrap())
            .sum())
    };
    check_with(&net, &x, cfg, loss_of, |n, x| {
        n.forward_train(x)?;
        n.backward(&r)
    })
}

fn check_with<T, L, B>(
    net: &Network<T>,
    batch: &Tensor<T>,
    cfg: GradCheckConfig,
    loss_of: L,
    backprop: B,
) -> Result<GradReport>
where
    T: Scalar,
    L: Fn(&Network<T>, &Tensor<T>) -> Result<f64>,
    B: Fn(&mut Network<T>, &Tensor<T>) -> Result<Tensor<T>>,
{
    let mut analytic = net.clone();
    let input_grad = backprop(&mut analytic, batch)?;
    let h = T::lit(cfg.step);
    let two_h = 2.0 * cfg.step;

    let mut report = GradReport::default();
    let mut probe = net.clone();
    let mut flat_index = 0;
    for (li, layer) in analytic.layers().iter().enumerate() {
        if layer.params.is_empty() {
            continue;
        }
        let mut worst = 0.0f64;
        let mut checked = 0;
        for (pi, p) in layer.params.iter().enumerate() {
            let grads = p.grad().expect("backward populated every gradient");
            for (j, g) in grads.iter().enumerate() {
                let orig = probe.params_mut()[flat_index + pi].data()[j];
                probe.params_mut()[flat_index + pi].data_mut()[j] = orig + h;
                let up = loss_of(&probe, batch)?;
                probe.params_mut()[flat_index + pi].data_mut()[j] = orig - h;
                let down = loss_of(&probe, batch)?;
                probe.params_mut()[flat_index + pi].data_mut()[j] = orig;
                let numeric = (up - down) / two_h;
                let e = rel_error(g.to_f64().unwrap(), numeric, cfg.floor);
                worst = worst.max(e);
                checked += 1;
            }
        }
        flat_index += layer.params.len();
        report.layers.push(LayerGradError {
            layer: li,
            kind: layer.spec.name(),
            max_rel_error: worst,
            checked,
        });
    }

    let mut x = batch.clone();
    for j in 0..x.len() {
        let orig = x.data()[j];
        x.data_mut()[j] = orig + h;
        let up = loss_of(net, &x)?;
        x.data_mut()[j] = orig - h;
        let down = loss_of(net, &x)?;
        x.data_mut()[j] = orig;
        let numeric = (up - down) / two_h;
        let analytic = input_grad.data()[j].to_f64().unwrap();
        report.input_max_rel_error = report
            .input_max_rel_error
            .max(rel_error(analytic, numeric, cfg.floor));
    }
    Ok(report)
}
