//! Minimal CNN stack for the translator/inverse/discriminator triple:
//! explicit forward/backward per layer, no autodiff. Batches are
//! `(N, C, H, W)` arrays of f64.

pub mod blocks;
pub mod layers;

pub use blocks::{build_discriminator, build_inverse, build_translator, Sequential, UNet};
pub use layers::{BatchNorm2d, Conv2d, LeakyRelu, MaxPool2, PadMode, Sigmoid, UpsampleBilinear};

use ndarray::Array4;

/// A mutable view of one parameter buffer and its gradient.
pub struct ParamRef<'a> {
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// A layer with explicit forward/backward and parameter visitation.
/// `forward(train=false)` must not mutate statistics.
pub trait Layer {
    fn forward(&mut self, x: Array4<f64>, train: bool) -> Array4<f64>;
    /// Backpropagates; must be called after `forward` (caches consumed).
    /// Parameter gradients accumulate until `zero_grad`.
    fn backward(&mut self, grad_out: Array4<f64>) -> Array4<f64>;
    fn visit_params(&mut self, visitor: &mut dyn FnMut(ParamRef));
    fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.grad.fill(0.0));
    }
    /// One-line structural description used by checkpoints.
    fn describe(&self) -> String;
}

/// Adaptive-moment optimizer over the parameters visited by a network.
/// Moment buffers are allocated on first use in visitation order, which is
/// stable for a fixed architecture.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn step(&mut self, net: &mut dyn Layer, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        let mut index = 0usize;
        let moments = &mut self.moments;
        net.visit_params(&mut |p| {
            if moments.len() == index {
                moments.push((vec![0.0; p.value.len()], vec![0.0; p.value.len()]));
            }
            let (m, v) = &mut moments[index];
            assert_eq!(m.len(), p.value.len(), "parameter layout changed under the optimizer");
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] / bias1;
                let vh = v[i] / bias2;
                p.value[i] -= lr * mh / (vh.sqrt() + eps);
            }
            index += 1;
        });
    }
}

/// Total number of scalar parameters in a network.
pub fn param_count(net: &mut dyn Layer) -> usize {
    let mut n = 0;
    net.visit_params(&mut |p| n += p.value.len());
    n
}

/// Flattens all parameters in visitation order.
pub fn flatten_params(net: &mut dyn Layer) -> Vec<f64> {
    let mut out = Vec::new();
    net.visit_params(&mut |p| out.extend_from_slice(p.value));
    out
}

/// Restores parameters from a flat buffer in visitation order.
pub fn restore_params(net: &mut dyn Layer, data: &[f64]) -> crate::Result<()> {
    let mut offset = 0usize;
    let mut overran = false;
    net.visit_params(&mut |p| {
        if offset + p.value.len() <= data.len() {
            p.value.copy_from_slice(&data[offset..offset + p.value.len()]);
        } else {
            overran = true;
        }
        offset += p.value.len();
    });
    if overran || offset != data.len() {
        return Err(crate::Error::Dimension(format!(
            "parameter payload has {} values but the network expects {offset}",
            data.len()
        )));
    }
    Ok(())
}

/// True when every parameter is finite.
pub fn params_finite(net: &mut dyn Layer) -> bool {
    let mut ok = true;
    net.visit_params(&mut |p| {
        if !p.value.iter().all(|v| v.is_finite()) {
            ok = false;
        }
    });
    ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use layers::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_moves_parameters_toward_minimum() {
        // One 1x1 conv on 1x1 inputs is just a scalar affine map; Adam on a
        // quadratic loss must approach the optimum.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new(1, 1, 1, 1, 0, PadMode::Zero, &mut rng);
        let mut adam = Adam::new(0.9, 0.999);
        for _ in 0..4000 {
            let x = Array4::from_elem((1, 1, 1, 1), 1.0);
            let y = conv.forward(x, true);
            // loss = (y - 3)^2
            let grad = y.mapv(|v| 2.0 * (v - 3.0));
            conv.zero_grad();
            conv.backward(grad);
            adam.step(&mut conv, 1e-2);
        }
        let x = Array4::from_elem((1, 1, 1, 1), 1.0);
        let y = conv.forward(x, false);
        assert!((y[[0, 0, 0, 0]] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn flatten_restore_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::new(2, 3, 3, 1, 1, PadMode::Zero, &mut rng);
        let flat = flatten_params(&mut conv);
        assert_eq!(flat.len(), param_count(&mut conv));
        let mut conv2 = Conv2d::new(2, 3, 3, 1, 1, PadMode::Zero, &mut rng);
        restore_params(&mut conv2, &flat).unwrap();
        assert_eq!(flatten_params(&mut conv2), flat);
        assert!(restore_params(&mut conv2, &flat[1..]).is_err());
    }
}
