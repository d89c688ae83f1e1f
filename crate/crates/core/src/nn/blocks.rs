//! Composite networks: plain sequential stacks, residual blocks, and the
//! skip-connected encoder/decoder translator.

use ndarray::Array4;
use rand::Rng;

use super::layers::{BatchNorm2d, Conv2d, LeakyRelu, MaxPool2, PadMode, Sigmoid, UpsampleBilinear};
use super::{Layer, ParamRef};

const LRELU_SLOPE: f64 = 0.2;

/// Layers applied in order.
pub struct Sequential {
    pub layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Layer>>) -> Self {
        Self { layers }
    }
}

impl Layer for Sequential {
    fn forward(&mut self, x: Array4<f64>, train: bool) -> Array4<f64> {
        self.layers.iter_mut().fold(x, |x, l| l.forward(x, train))
    }

    fn backward(&mut self, grad_out: Array4<f64>) -> Array4<f64> {
        self.layers.iter_mut().rev().fold(grad_out, |g, l| l.backward(g))
    }

    fn visit_params(&mut self, visitor: &mut dyn FnMut(ParamRef)) {
        for l in &mut self.layers {
            l.visit_params(visitor);
        }
    }

    fn describe(&self) -> String {
        self.layers.iter().map(|l| l.describe()).collect::<Vec<_>>().join("; ")
    }
}

/// Two reflect-padded convolutions with an additive skip.
pub struct ResBlock {
    path: Sequential,
    cache_input: Option<Array4<f64>>,
}

impl ResBlock {
    pub fn new<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let path = Sequential::new(vec![
            Box::new(Conv2d::new(channels, channels, 3, 1, 1, PadMode::Reflect, rng)),
            Box::new(BatchNorm2d::new(channels)),
            Box::new(LeakyRelu::new(LRELU_SLOPE)),
            Box::new(Conv2d::new(channels, channels, 3, 1, 1, PadMode::Reflect, rng)),
            Box::new(BatchNorm2d::new(channels)),
        ]);
        Self { path, cache_input: None }
    }
}

impl Layer for ResBlock {
    fn forward(&mut self, x: Array4<f64>, train: bool) -> Array4<f64> {
        let y = self.path.forward(x.clone(), train);
        self.cache_input = Some(x.clone());
        &x + &y
    }

    fn backward(&mut self, grad_out: Array4<f64>) -> Array4<f64> {
        let _ = self.cache_input.take();
        let g_path = self.path.backward(grad_out.clone());
        &grad_out + &g_path
    }

    fn visit_params(&mut self, visitor: &mut dyn FnMut(ParamRef)) {
        self.path.visit_params(visitor);
    }

    fn describe(&self) -> String {
        format!("res[{}]", self.path.describe())
    }
}

/// Global spatial average: `(N, C, H, W) -> (N, C, 1, 1)`.
pub struct GlobalAvgPool {
    cache: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self { cache: None }
    }
}

impl Default for GlobalAvgPool {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: Array4<f64>, _train: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        self.cache = Some((h, w));
        let mut out = Array4::zeros((n, c, 1, 1));
        for b in 0..n {
            for ch in 0..c {
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        acc += x[[b, ch, i, j]];
                    }
                }
                out[[b, ch, 0, 0]] = acc / (h * w) as f64;
            }
        }
        out
    }

    fn backward(&mut self, grad_out: Array4<f64>) -> Array4<f64> {
        let (h, w) = self.cache.take().expect("backward before forward");
        let (n, c, _, _) = grad_out.dim();
        let scale = 1.0 / (h * w) as f64;
        let mut grad_in = Array4::zeros((n, c, h, w));
        for b in 0..n {
            for ch in 0..c {
                let g = grad_out[[b, ch, 0, 0]] * scale;
                for i in 0..h {
                    for j in 0..w {
                        grad_in[[b, ch, i, j]] = g;
                    }
                }
            }
        }
        grad_in
    }

    fn visit_params(&mut self, _visitor: &mut dyn FnMut(ParamRef)) {}

    fn describe(&self) -> String {
        "avg".into()
    }
}

struct DecStage {
    up: UpsampleBilinear,
    head: Sequential,
    tail: Sequential,
    cache_split: Option<(usize, usize)>,
}

/// Skip-connected encoder/decoder translator: upsample by the scale
/// factor, a convolutional stem, `depth` pooling encoder stages, and the
/// mirrored decoder stages whose inputs are concatenated with the matching
/// encoder features.
pub struct UNet {
    stem: Sequential,
    encs: Vec<Sequential>,
    decs: Vec<DecStage>,
    post: Sequential,
    skip_grads: Vec<Array4<f64>>,
}

impl UNet {
    pub fn new<R: Rng>(scale: usize, widths: &[usize], rng: &mut R) -> Self {
        Self::with_squash(scale, widths, false, rng)
    }

    /// `squash` appends a logistic output stage, matching generators whose
    /// target data live in (0, 1).
    pub fn with_squash<R: Rng>(scale: usize, widths: &[usize], squash: bool, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "need a stem width and at least one stage");
        let w0 = widths[0];
        let stem = Sequential::new(vec![
            Box::new(UpsampleBilinear::new(scale)),
            Box::new(Conv2d::new(1, w0, 1, 1, 0, PadMode::Zero, rng)),
            Box::new(LeakyRelu::new(LRELU_SLOPE)),
            Box::new(Conv2d::new(w0, w0, 3, 1, 1, PadMode::Zero, rng)),
            Box::new(BatchNorm2d::new(w0)),
            Box::new(LeakyRelu::new(LRELU_SLOPE)),
            Box::new(Conv2d::new(w0, w0, 3, 1, 1, PadMode::Zero, rng)),
            Box::new(BatchNorm2d::new(w0)),
            Box::new(LeakyRelu::new(LRELU_SLOPE)),
        ]);
        let mut encs = Vec::new();
        for lvl in 1..widths.len() {
            let (cin, cout) = (widths[lvl - 1], widths[lvl]);
            encs.push(Sequential::new(vec![
                Box::new(MaxPool2::new()),
                Box::new(Conv2d::new(cin, cout, 3, 1, 1, PadMode::Zero, rng)),
                Box::new(BatchNorm2d::new(cout)),
                Box::new(LeakyRelu::new(LRELU_SLOPE)),
                Box::new(Conv2d::new(cout, cout, 3, 1, 1, PadMode::Zero, rng)),
                Box::new(BatchNorm2d::new(cout)),
                Box::new(LeakyRelu::new(LRELU_SLOPE)),
            ]));
        }
        let mut decs = Vec::new();
        for lvl in (1..widths.len()).rev() {
            let (cin, cout) = (widths[lvl], widths[lvl - 1]);
            decs.push(DecStage {
                up: UpsampleBilinear::new(2),
                head: Sequential::new(vec![
                    Box::new(Conv2d::new(cin, cout, 1, 1, 0, PadMode::Zero, rng)),
                    Box::new(BatchNorm2d::new(cout)),
                    Box::new(LeakyRelu::new(LRELU_SLOPE)),
                ]),
                tail: Sequential::new(vec![
                    Box::new(Conv2d::new(2 * cout, cout, 3, 1, 1, PadMode::Zero, rng)),
                    Box::new(BatchNorm2d::new(cout)),
                    Box::new(LeakyRelu::new(LRELU_SLOPE)),
                    Box::new(Conv2d::new(cout, cout, 3, 1, 1, PadMode::Zero, rng)),
                    Box::new(BatchNorm2d::new(cout)),
                    Box::new(LeakyRelu::new(LRELU_SLOPE)),
                ]),
                cache_split: None,
            });
        }
        let mut post_layers: Vec<Box<dyn Layer>> = vec![
            Box::new(Conv2d::new(w0, 1, 1, 1, 0, PadMode::Zero, rng)),
            Box::new(LeakyRelu::new(LRELU_SLOPE)),
        ];
        if squash {
            post_layers.push(Box::new(Sigmoid::new()));
        }
        let post = Sequential::new(post_layers);
        Self {
            stem,
            encs,
            decs,
            post,
            skip_grads: Vec::new(),
        }
    }
}

fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    let (n, ca, h, w) = a.dim();
    let cb = b.dim().1;
    let mut out = Array4::zeros((n, ca + cb, h, w));
    out.slice_mut(ndarray::s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(ndarray::s![.., ca.., .., ..]).assign(b);
    out
}

impl Layer for UNet {
    fn forward(&mut self, x: Array4<f64>, train: bool) -> Array4<f64> {
        let mut x = self.stem.forward(x, train);
        let mut skips = vec![x.clone()];
        for enc in &mut self.encs {
            x = enc.forward(x, train);
            skips.push(x.clone());
        }
        skips.pop(); // the bottleneck is not a skip source
        for dec in self.decs.iter_mut() {
            let skip = skips.pop().expect("one skip per decoder stage");
            x = dec.up.forward(x, train);
            x = dec.head.forward(x, train);
            dec.cache_split = Some((x.dim().1, skip.dim().1));
            x = concat_channels(&x, &skip);
            x = dec.tail.forward(x, train);
        }
        self.post.forward(x, train)
    }

    fn backward(&mut self, grad_out: Array4<f64>) -> Array4<f64> {
        let mut g = self.post.backward(grad_out);
        self.skip_grads.clear();
        for dec in self.decs.iter_mut().rev() {
            let g_cat = dec.tail.backward(g);
            let (c_dec, _c_skip) = dec.cache_split.take().expect("backward before forward");
            let g_head = g_cat.slice(ndarray::s![.., ..c_dec, .., ..]).to_owned();
            let g_skip = g_cat.slice(ndarray::s![.., c_dec.., .., ..]).to_owned();
            self.skip_grads.push(g_skip);
            let g_up = dec.head.backward(g_head);
            g = dec.up.backward(g_up);
        }
        // The decoders run stem-first in reverse, so skip_grads[0] belongs
        // to the stem output and skip_grads[i + 1] to encoder i's output.
        // The bottleneck encoder feeds no skip.
        for (i, enc) in self.encs.iter_mut().enumerate().rev() {
            if i + 1 < self.skip_grads.len() {
                g += &self.skip_grads[i + 1];
            }
            g = enc.backward(g);
        }
        g += &self.skip_grads[0];
        self.skip_grads.clear();
        self.stem.backward(g)
    }

    fn visit_params(&mut self, visitor: &mut dyn FnMut(ParamRef)) {
        self.stem.visit_params(visitor);
        for enc in &mut self.encs {
            enc.visit_params(visitor);
        }
        for dec in &mut self.decs {
            dec.head.visit_params(visitor);
            dec.tail.visit_params(visitor);
        }
        self.post.visit_params(visitor);
    }

    fn describe(&self) -> String {
        let mut parts = vec![format!("stem[{}]", self.stem.describe())];
        for enc in &self.encs {
            parts.push(format!("enc[{}]", enc.describe()));
        }
        for dec in &self.decs {
            parts.push(format!("dec[up2; {}; cat; {}]", dec.head.describe(), dec.tail.describe()));
        }
        parts.push(format!("post[{}]", self.post.describe()));
        parts.join(" | ")
    }
}

/// Spatial super-resolution translator `f`: input `(N, 1, B, B)`, output
/// `(N, 1, sB, sB)`.
pub fn build_translator<R: Rng>(scale: usize, widths: &[usize], rng: &mut R) -> UNet {
    UNet::with_squash(scale, widths, true, rng)
}

/// Inverse map `g`: residual stem followed by a stride-`s` downsampling
/// convolution. Input `(N, 1, sB, sB)`, output `(N, 1, B, B)`.
pub fn build_inverse<R: Rng>(scale: usize, width: usize, rng: &mut R) -> Sequential {
    Sequential::new(vec![
        Box::new(Conv2d::new(1, width, 1, 1, 0, PadMode::Zero, rng)),
        Box::new(LeakyRelu::new(LRELU_SLOPE)),
        Box::new(ResBlock::new(width, rng)),
        Box::new(ResBlock::new(width, rng)),
        Box::new(Conv2d::new(width, width, 3, scale, 1, PadMode::Reflect, rng)),
        Box::new(LeakyRelu::new(LRELU_SLOPE)),
        Box::new(Conv2d::new(width, 1, 3, 1, 1, PadMode::Reflect, rng)),
        Box::new(LeakyRelu::new(LRELU_SLOPE)),
        // Outputs live on the abundance scale.
        Box::new(Sigmoid::new()),
    ])
}

/// Multi-head discriminator: strided stack ending in `r` output channels,
/// spatially averaged and squashed to `(0, 1)`. Output `(N, r, 1, 1)`.
/// Real and fake batches pass through separately during training, so batch
/// normalization would let the stack key on batch-level statistics; the
/// normalization stages are therefore omitted.
pub fn build_discriminator<R: Rng>(width: usize, r: usize, rng: &mut R) -> Sequential {
    Sequential::new(vec![
        Box::new(Conv2d::new(1, width, 3, 1, 1, PadMode::Zero, rng)),
        Box::new(LeakyRelu::new(LRELU_SLOPE)),
        Box::new(Conv2d::new(width, width, 3, 2, 1, PadMode::Zero, rng)),
        Box::new(LeakyRelu::new(LRELU_SLOPE)),
        Box::new(Conv2d::new(width, 2 * width, 3, 1, 1, PadMode::Zero, rng)),
        Box::new(LeakyRelu::new(LRELU_SLOPE)),
        Box::new(Conv2d::new(2 * width, 2 * width, 3, 2, 1, PadMode::Zero, rng)),
        Box::new(LeakyRelu::new(LRELU_SLOPE)),
        Box::new(Conv2d::new(2 * width, 4 * width, 3, 1, 1, PadMode::Zero, rng)),
        Box::new(LeakyRelu::new(LRELU_SLOPE)),
        Box::new(Conv2d::new(4 * width, 4 * width, 3, 2, 1, PadMode::Zero, rng)),
        Box::new(LeakyRelu::new(LRELU_SLOPE)),
        Box::new(Conv2d::new(4 * width, 8 * width, 3, 1, 1, PadMode::Zero, rng)),
        Box::new(LeakyRelu::new(LRELU_SLOPE)),
        Box::new(Conv2d::new(8 * width, r, 1, 1, 0, PadMode::Zero, rng)),
        Box::new(GlobalAvgPool::new()),
        Box::new(Sigmoid::new()),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn translator_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (b_h, s) in [(8usize, 4usize), (4, 4)] {
            let mut f = build_translator(s, &[2, 3, 4, 5, 6], &mut rng);
            let x = Array4::from_shape_fn((3, 1, b_h, b_h), |_| rng.random::<f64>());
            let y = f.forward(x, true);
            assert_eq!(y.dim(), (3, 1, s * b_h, s * b_h));
        }
    }

    #[test]
    fn inverse_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = build_inverse(4, 3, &mut rng);
        let x = Array4::from_shape_fn((2, 1, 32, 32), |_| rng.random::<f64>());
        let y = g.forward(x, true);
        assert_eq!(y.dim(), (2, 1, 8, 8));
    }

    #[test]
    fn discriminator_outputs_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut d = build_discriminator(2, 3, &mut rng);
        let x = Array4::from_shape_fn((4, 1, 32, 32), |_| rng.random::<f64>());
        let y = d.forward(x, true);
        assert_eq!(y.dim(), (4, 3, 1, 1));
        for v in y.iter() {
            assert!(*v > 0.0 && *v < 1.0, "probability out of range: {v}");
        }
    }

    #[test]
    fn unet_backward_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut f = build_translator(4, &[1, 1, 1, 1], &mut rng);
        let x = Array4::from_shape_fn((2, 1, 4, 4), |_| rng.random::<f64>());
        let weights = Array4::from_shape_fn((2, 1, 16, 16), |(a, _, c, d)| {
            ((a * 3 + c * 5 + d * 7 + 1) % 13) as f64 / 13.0 - 0.4
        });
        let y = f.forward(x.clone(), true);
        assert_eq!(y.dim(), (2, 1, 16, 16));
        let analytic = f.backward(weights.clone());

        let h = 1e-6;
        for idx in [0usize, 7, 13, 25, 31] {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            let fp = (&f.forward(xp, true) * &weights).sum();
            let _ = f.backward(weights.clone());
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fm = (&f.forward(xm, true) * &weights).sum();
            let _ = f.backward(weights.clone());
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!(
                (a - numeric).abs() <= 1e-5 * numeric.abs().max(1.0),
                "idx {idx}: {a} vs {numeric}"
            );
        }
    }

    #[test]
    fn resblock_identity_at_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut block = ResBlock::new(2, &mut rng);
        // Zero the path output by zeroing the second conv.
        block.visit_params(&mut |p| p.value.fill(0.0));
        let x = Array4::from_shape_fn((1, 2, 4, 4), |_| rng.random::<f64>());
        let y = block.forward(x.clone(), false);
        // With all-zero parameters the residual path contributes only the
        // (zero) biases, so the block is the identity.
        let diff = (&y - &x).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }
}
