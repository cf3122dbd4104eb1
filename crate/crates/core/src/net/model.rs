//! The single-level detector.
//!
//! ```text
//! image -> [conv3x3, relu, pool] x3 -> conv3x3 -> featA (stride 8)
//!                                           pool -> conv3x3 -> featB (stride 16)
//! featA -> 1x1 reduce ----------------------------\
//! featB -> 1x1 reduce -> bilinear x2 upsample -----+-> concat -> conv3x3 -> detection feature
//! detection feature -> 1x1 reduce -> shared conv3x3 at dilation 1, 2, 4 (one branch per anchor size)
//!                   -> shared 1x1 cls (2 ch) and shared 1x1 reg (4 ch) on every branch
//! ```
//!
//! Branch `k` only predicts for anchors of size `sizes[k]`. All three dilated
//! applications and both output kernels read the same parameter storage.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{AnchorConfig, Delta};
use crate::image::Image;
use crate::net::loss::{cls_offsets, reg_offset};
use crate::net::ops::{self, ConvSpec, MaxPool};
use crate::net::{Param, Real, Tensor};
use crate::rng;

/// Inputs are padded to a multiple of this so both pyramid levels align.
pub const INPUT_ALIGN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub stem_channels: usize,
    pub stage_a_channels: usize,
    pub stage_b_channels: usize,
    pub reduce_channels: usize,
    pub detect_channels: usize,
    pub head_channels: usize,
    /// Gaussian std for the cls/reg output kernels. Hidden layers use He init.
    pub output_init_std: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            stem_channels: 8,
            stage_a_channels: 16,
            stage_b_channels: 32,
            reduce_channels: 32,
            detect_channels: 64,
            head_channels: 32,
            output_init_std: 0.01,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.stem_channels,
            self.stage_a_channels,
            self.stage_b_channels,
            self.reduce_channels,
            self.detect_channels,
            self.head_channels,
        ];
        if widths.contains(&0) || self.output_init_std.is_nan() || self.output_init_std < 0.0 {
            return Err(invalid("network widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub spec: ConvSpec,
}

impl<T: Real> Conv<T> {
    fn new(name: &str, cin: usize, cout: usize, k: usize, spec: ConvSpec, std: f64, rng: &mut rng::Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let weight = Tensor::from_fn([cout, cin, k, k], |_| T::from_f64_lossy(normal.sample(rng)));
        Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1])),
            spec,
        }
    }

    fn he(name: &str, cin: usize, cout: usize, k: usize, spec: ConvSpec, rng: &mut rng::Rng) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Self::new(name, cin, cout, k, spec, std, rng)
    }

    fn forward_with(&self, x: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
        ops::conv2d_forward(x, &self.weight.value, self.bias.value.data(), spec)
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with(x, self.spec)
    }

    fn backward_with(
        &mut self,
        x: &Tensor<T>,
        gy: &Tensor<T>,
        spec: ConvSpec,
        want_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        ops::conv2d_backward(
            x,
            &self.weight.value,
            spec,
            gy,
            &mut self.weight.grad,
            &mut self.bias.grad,
            want_dx,
        )
    }

    fn backward(&mut self, x: &Tensor<T>, gy: &Tensor<T>, want_dx: bool) -> Result<Option<Tensor<T>>> {
        let spec = self.spec;
        self.backward_with(x, gy, spec, want_dx)
    }

    fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    fn cast<U: Real>(&self) -> Conv<U> {
        let cast = |p: &Param<T>| Param {
            name: p.name.clone(),
            value: p.value.cast(),
            grad: p
                .grad
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(0.0)))
                .collect(),
            velocity: p
                .velocity
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(0.0)))
                .collect(),
            lr_mult: p.lr_mult,
        };
        Conv {
            weight: cast(&self.weight),
            bias: cast(&self.bias),
            spec: self.spec,
        }
    }
}

/// Raw head outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput<T> {
    /// `(1, 2K, h, w)`: background/face logits per anchor size.
    pub cls: Tensor<T>,
    /// `(1, 4K, h, w)`: box deltas per anchor size.
    pub reg: Tensor<T>,
}

impl<T: Real> DetectorOutput<T> {
    pub fn num_anchors(&self) -> usize {
        self.cls.c() / 2 * self.cls.h() * self.cls.w()
    }

    /// Face and background logits per anchor, in anchor-grid order.
    pub fn face_bg_logits(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.num_anchors();
        let data = self.cls.data();
        (0..n)
            .map(|a| {
                let (ob, of) = cls_offsets(&self.cls, a);
                (data[of].to_f64().unwrap_or(0.0), data[ob].to_f64().unwrap_or(0.0))
            })
            .unzip()
    }

    pub fn face_probs(&self) -> Vec<f64> {
        let (face, bg) = self.face_bg_logits();
        face.iter()
            .zip(&bg)
            .map(|(&f, &b)| crate::mining::face_probability(f, b))
            .collect()
    }

    pub fn delta(&self, anchor: usize) -> Delta {
        let d = self.reg.data();
        let c = |i| d[reg_offset(&self.reg, anchor, i)].to_f64().unwrap_or(0.0);
        Delta::new(c(0), c(1), c(2), c(3))
    }
}

/// Activations kept from the forward pass for backpropagation.
pub struct ForwardCache<T> {
    input: Tensor<T>,
    c1: Tensor<T>,
    pool1: MaxPool<T>,
    c2: Tensor<T>,
    pool2: MaxPool<T>,
    c3: Tensor<T>,
    pool3: MaxPool<T>,
    feat_a: Tensor<T>,
    pool4: MaxPool<T>,
    feat_b: Tensor<T>,
    red_a: Tensor<T>,
    red_b: Tensor<T>,
    fused_in: Tensor<T>,
    detect: Tensor<T>,
    head_in: Tensor<T>,
    context: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel<T> {
    pub config: NetConfig,
    pub dilations: Vec<usize>,
    conv1: Conv<T>,
    conv2: Conv<T>,
    conv3: Conv<T>,
    conv4: Conv<T>,
    conv5: Conv<T>,
    reduce_a: Conv<T>,
    reduce_b: Conv<T>,
    fuse: Conv<T>,
    head_reduce: Conv<T>,
    head_context: Conv<T>,
    head_cls: Conv<T>,
    head_reg: Conv<T>,
}

fn relu<T: Real>(mut t: Tensor<T>) -> Tensor<T> {
    ops::relu_inplace(&mut t);
    t
}

impl<T: Real> DetectorModel<T> {
    pub fn new(config: &NetConfig, anchors: &AnchorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        anchors.validate()?;
        if anchors.stride != 8 {
            return Err(invalid("the detector's feature map has stride 8"));
        }
        let mut rng = rng::stream(seed, &[0x1_417]);
        let c = config;
        let s3 = ConvSpec::same(3, 1);
        let s1 = ConvSpec::new(1, 0, 1);
        let rng = &mut rng;
        Ok(Self {
            config: config.clone(),
            dilations: anchors.dilations(),
            conv1: Conv::he("conv1", 3, c.stem_channels, 3, s3, rng),
            conv2: Conv::he("conv2", c.stem_channels, c.stage_a_channels, 3, s3, rng),
            conv3: Conv::he("conv3", c.stage_a_channels, c.stage_a_channels, 3, s3, rng),
            conv4: Conv::he("conv4", c.stage_a_channels, c.stage_a_channels, 3, s3, rng),
            conv5: Conv::he("conv5", c.stage_a_channels, c.stage_b_channels, 3, s3, rng),
            reduce_a: Conv::he("fusion.reduce_a", c.stage_a_channels, c.reduce_channels, 1, s1, rng),
            reduce_b: Conv::he("fusion.reduce_b", c.stage_b_channels, c.reduce_channels, 1, s1, rng),
            fuse: Conv::he("fusion.conv", 2 * c.reduce_channels, c.detect_channels, 3, s3, rng),
            head_reduce: Conv::he("head.reduce", c.detect_channels, c.head_channels, 1, s1, rng),
            head_context: Conv::he("head.context", c.head_channels, c.head_channels, 3, s3, rng),
            head_cls: Conv::new("head.cls", c.head_channels, 2, 1, s1, c.output_init_std, rng),
            head_reg: Conv::new("head.reg", c.head_channels, 4, 1, s1, c.output_init_std, rng),
        })
    }

    pub fn num_branches(&self) -> usize {
        self.dilations.len()
    }

    fn layers(&self) -> [&Conv<T>; 12] {
        [
            &self.conv1,
            &self.conv2,
            &self.conv3,
            &self.conv4,
            &self.conv5,
            &self.reduce_a,
            &self.reduce_b,
            &self.fuse,
            &self.head_reduce,
            &self.head_context,
            &self.head_cls,
            &self.head_reg,
        ]
    }

    fn layers_mut(&mut self) -> [&mut Conv<T>; 12] {
        [
            &mut self.conv1,
            &mut self.conv2,
            &mut self.conv3,
            &mut self.conv4,
            &mut self.conv5,
            &mut self.reduce_a,
            &mut self.reduce_b,
            &mut self.fuse,
            &mut self.head_reduce,
            &mut self.head_context,
            &mut self.head_cls,
            &mut self.head_reg,
        ]
    }

    /// Parameters in a fixed order (weight then bias, input to output).
    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers().into_iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers_mut().into_iter().flat_map(|l| l.params_mut()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Assigns learning-rate multipliers by longest matching name prefix;
    /// parameters matching no prefix get 1.
    pub fn set_lr_mults(&mut self, mults: &BTreeMap<String, f64>) {
        for p in self.params_mut() {
            p.lr_mult = mults
                .iter()
                .filter(|(prefix, _)| p.name.starts_with(prefix.as_str()))
                .max_by_key(|(prefix, _)| prefix.len())
                .map_or(1.0, |(_, &m)| m);
        }
    }

    pub fn cast<U: Real>(&self) -> DetectorModel<U> {
        DetectorModel {
            config: self.config.clone(),
            dilations: self.dilations.clone(),
            conv1: self.conv1.cast(),
            conv2: self.conv2.cast(),
            conv3: self.conv3.cast(),
            conv4: self.conv4.cast(),
            conv5: self.conv5.cast(),
            reduce_a: self.reduce_a.cast(),
            reduce_b: self.reduce_b.cast(),
            fuse: self.fuse.cast(),
            head_reduce: self.head_reduce.cast(),
            head_context: self.head_context.cast(),
            head_cls: self.head_cls.cast(),
            head_reg: self.head_reg.cast(),
        }
    }

    /// Converts an RGB image in `[0, 1]` to a zero-centred `(1, 3, H', W')`
    /// tensor, padding bottom/right with zeros up to a multiple of 16.
    pub fn prepare_input(image: &Image) -> Tensor<T> {
        let h = image.height.div_ceil(INPUT_ALIGN).max(1) * INPUT_ALIGN;
        let w = image.width.div_ceil(INPUT_ALIGN).max(1) * INPUT_ALIGN;
        let mut t = Tensor::zeros([1, 3, h, w]);
        let data = t.data_mut();
        for c in 0..3 {
            for y in 0..image.height {
                for x in 0..image.width {
                    data[(c * h + y) * w + x] = T::from_f64_lossy(2.0 * image.get(c, y, x) as f64 - 1.0);
                }
            }
        }
        t
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(DetectorOutput<T>, ForwardCache<T>)> {
        if input.n() != 1 || input.c() != 3 {
            return Err(Error::Shape(format!(
                "expected a (1, 3, H, W) image, got {:?}",
                input.shape()
            )));
        }
        if !input.h().is_multiple_of(INPUT_ALIGN)
            || !input.w().is_multiple_of(INPUT_ALIGN)
            || input.h() == 0
            || input.w() == 0
        {
            return Err(Error::Shape(format!(
                "image {}x{} is not a positive multiple of {INPUT_ALIGN}",
                input.h(),
                input.w()
            )));
        }
        let c1 = relu(self.conv1.forward(input)?);
        let pool1 = ops::maxpool2x2_forward(&c1);
        let c2 = relu(self.conv2.forward(&pool1.output)?);
        let pool2 = ops::maxpool2x2_forward(&c2);
        let c3 = relu(self.conv3.forward(&pool2.output)?);
        let pool3 = ops::maxpool2x2_forward(&c3);
        let feat_a = relu(self.conv4.forward(&pool3.output)?);
        let pool4 = ops::maxpool2x2_forward(&feat_a);
        let feat_b = relu(self.conv5.forward(&pool4.output)?);

        let red_a = relu(self.reduce_a.forward(&feat_a)?);
        let red_b = relu(self.reduce_b.forward(&feat_b)?);
        let up_b = ops::bilinear_upsample_x2_forward(&red_b);
        let fused_in = ops::concat_channels(&red_a, &up_b)?;
        let detect = relu(self.fuse.forward(&fused_in)?);

        let head_in = relu(self.head_reduce.forward(&detect)?);
        let (fh, fw) = (head_in.h(), head_in.w());
        let k = self.num_branches();
        let mut cls = Tensor::zeros([1, 2 * k, fh, fw]);
        let mut reg = Tensor::zeros([1, 4 * k, fh, fw]);
        let mut context = Vec::with_capacity(k);
        let plane = fh * fw;
        for (b, &d) in self.dilations.iter().enumerate() {
            let ctx = relu(self.head_context.forward_with(&head_in, ConvSpec::same(3, d))?);
            let c = self.head_cls.forward(&ctx)?;
            let r = self.head_reg.forward(&ctx)?;
            cls.data_mut()[2 * b * plane..2 * (b + 1) * plane].copy_from_slice(c.data());
            reg.data_mut()[4 * b * plane..4 * (b + 1) * plane].copy_from_slice(r.data());
            context.push(ctx);
        }
        let cache = ForwardCache {
            input: input.clone(),
            c1,
            pool1,
            c2,
            pool2,
            c3,
            pool3,
            feat_a,
            pool4,
            feat_b,
            red_a,
            red_b,
            fused_in,
            detect,
            head_in,
            context,
        };
        Ok((DetectorOutput { cls, reg }, cache))
    }

    pub fn predict(&self, input: &Tensor<T>) -> Result<DetectorOutput<T>> {
        self.forward(input).map(|(out, _)| out)
    }

    /// Accumulates parameter gradients for the given output gradients.
    /// Returns the gradient with respect to the input when requested.
    pub fn backward(
        &mut self,
        cache: &ForwardCache<T>,
        grad_cls: &Tensor<T>,
        grad_reg: &Tensor<T>,
        want_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let head_in = &cache.head_in;
        let (fh, fw) = (head_in.h(), head_in.w());
        let plane = fh * fw;
        let k = self.num_branches();
        if grad_cls.shape() != [1, 2 * k, fh, fw] || grad_reg.shape() != [1, 4 * k, fh, fw] {
            return Err(Error::Shape("output gradients do not match the forward pass".into()));
        }
        let mut g_head_in = Tensor::zeros(head_in.shape());
        for b in 0..k {
            let ctx = &cache.context[b];
            let gc = Tensor::from_vec(
                [1, 2, fh, fw],
                grad_cls.data()[2 * b * plane..2 * (b + 1) * plane].to_vec(),
            )?;
            let gr = Tensor::from_vec(
                [1, 4, fh, fw],
                grad_reg.data()[4 * b * plane..4 * (b + 1) * plane].to_vec(),
            )?;
            let mut g_ctx = self.head_cls.backward(ctx, &gc, true)?.expect("input grad");
            g_ctx.add_assign(&self.head_reg.backward(ctx, &gr, true)?.expect("input grad"))?;
            ops::relu_backward_inplace(ctx, &mut g_ctx)?;
            let spec = ConvSpec::same(3, self.dilations[b]);
            let g = self
                .head_context
                .backward_with(head_in, &g_ctx, spec, true)?
                .expect("input grad");
            g_head_in.add_assign(&g)?;
        }
        ops::relu_backward_inplace(head_in, &mut g_head_in)?;
        let mut g_detect = self
            .head_reduce
            .backward(&cache.detect, &g_head_in, true)?
            .expect("input grad");
        ops::relu_backward_inplace(&cache.detect, &mut g_detect)?;
        let g_fused = self
            .fuse
            .backward(&cache.fused_in, &g_detect, true)?
            .expect("input grad");
        let (mut g_red_a, g_up_b) = ops::split_channels(&g_fused, cache.red_a.c())?;
        let mut g_red_b = ops::bilinear_upsample_x2_backward(cache.red_b.shape(), &g_up_b)?;
        ops::relu_backward_inplace(&cache.red_b, &mut g_red_b)?;
        let mut g_feat_b = self
            .reduce_b
            .backward(&cache.feat_b, &g_red_b, true)?
            .expect("input grad");
        ops::relu_backward_inplace(&cache.red_a, &mut g_red_a)?;
        let mut g_feat_a = self
            .reduce_a
            .backward(&cache.feat_a, &g_red_a, true)?
            .expect("input grad");

        ops::relu_backward_inplace(&cache.feat_b, &mut g_feat_b)?;
        let g_pool4 = self
            .conv5
            .backward(&cache.pool4.output, &g_feat_b, true)?
            .expect("input grad");
        g_feat_a.add_assign(&ops::maxpool2x2_backward(
            cache.feat_a.shape(),
            &cache.pool4.argmax,
            &g_pool4,
        )?)?;
        ops::relu_backward_inplace(&cache.feat_a, &mut g_feat_a)?;
        let g_pool3 = self
            .conv4
            .backward(&cache.pool3.output, &g_feat_a, true)?
            .expect("input grad");
        let mut g_c3 = ops::maxpool2x2_backward(cache.c3.shape(), &cache.pool3.argmax, &g_pool3)?;
        ops::relu_backward_inplace(&cache.c3, &mut g_c3)?;
        let g_pool2 = self
            .conv3
            .backward(&cache.pool2.output, &g_c3, true)?
            .expect("input grad");
        let mut g_c2 = ops::maxpool2x2_backward(cache.c2.shape(), &cache.pool2.argmax, &g_pool2)?;
        ops::relu_backward_inplace(&cache.c2, &mut g_c2)?;
        let g_pool1 = self
            .conv2
            .backward(&cache.pool1.output, &g_c2, true)?
            .expect("input grad");
        let mut g_c1 = ops::maxpool2x2_backward(cache.c1.shape(), &cache.pool1.argmax, &g_pool1)?;
        ops::relu_backward_inplace(&cache.c1, &mut g_c1)?;
        self.conv1.backward(&cache.input, &g_c1, want_input_grad)
    }

    /// Perturbation hook for tests: mutable access to a parameter by name.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params_mut().into_iter().find(|p| p.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params().into_iter().find(|p| p.name == name)
    }

    /// Draws a fresh random perturbation of every parameter; used by gradient
    /// checks to move away from the zero-bias initialization.
    pub fn jitter(&mut self, scale: f64, seed: u64) {
        let mut rng = rng::stream(seed, &[0x717]);
        for p in self.params_mut() {
            for v in p.value.data_mut() {
                *v += T::from_f64_lossy(rng.random_range(-scale..scale));
            }
        }
    }
}
