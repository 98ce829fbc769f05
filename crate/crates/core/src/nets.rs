//! The three network families: residual translation generators, PatchGAN
//! discriminators and embedding recognizers.
//!
//! Every network keeps its weights in a [`ParamSet`] and exposes a forward
//! pass that records onto a caller-supplied [`Graph`], so the same weights
//! can be bound trainable (their own update step) or frozen (supervising
//! another network).

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamSet};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;
const CONV_INIT: Init = Init::Normal { std: 0.02 };

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let w = params.add(format!("{name}.weight"), &[cout, cin, k, k], init);
        let b = bias.then(|| params.add(format!("{name}.bias"), &[cout], Init::Zeros));
        Self { w, b, stride, pad }
    }

    fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.get(self.w), self.b.map(|b| p.get(b)), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
struct UpConv {
    w: ParamId,
}

impl UpConv {
    fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv_transpose2d(x, p.get(self.w), None, 2, 1, 1)
    }
}

// ---------------------------------------------------------------------------
// Generator

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub input_channels: usize,
    pub base_filters: usize,
    pub num_residual_blocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::for_image_size(256)
    }
}

impl GeneratorConfig {
    /// 9 residual blocks for 256px inputs, 6 for 128px and below.
    pub fn for_image_size(size: usize) -> Self {
        Self {
            input_channels: 3,
            base_filters: 64,
            num_residual_blocks: if size > 128 { 9 } else { 6 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_residual_blocks < 1 {
            return Err(Error::Config("num_residual_blocks must be at least 1".into()));
        }
        if self.base_filters == 0 || self.input_channels == 0 {
            return Err(Error::Config("generator filters and channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamSet,
    stem: Conv,
    down: [Conv; 2],
    blocks: Vec<[Conv; 2]>,
    up: [UpConv; 2],
    head: Conv,
}

/// 7x7 stem, two stride-2 downsamplers, residual blocks, two fractionally
/// strided upsamplers and a 7x7 `tanh` head, instance-normalized throughout.
pub fn build_generator(config: &GeneratorConfig) -> Result<Generator> {
    config.validate()?;
    let (c, f) = (config.input_channels, config.base_filters);
    let mut p = ParamSet::new();
    let stem = Conv::new(&mut p, "stem", c, f, 7, 1, 0, false, CONV_INIT);
    let down = [
        Conv::new(&mut p, "down0", f, 2 * f, 3, 2, 1, false, CONV_INIT),
        Conv::new(&mut p, "down1", 2 * f, 4 * f, 3, 2, 1, false, CONV_INIT),
    ];
    let blocks = (0..config.num_residual_blocks)
        .map(|i| {
            [
                Conv::new(&mut p, &format!("res{i}.conv0"), 4 * f, 4 * f, 3, 1, 0, false, CONV_INIT),
                Conv::new(&mut p, &format!("res{i}.conv1"), 4 * f, 4 * f, 3, 1, 0, false, CONV_INIT),
            ]
        })
        .collect();
    let up = [
        UpConv {
            w: p.add("up0.weight", &[4 * f, 2 * f, 3, 3], CONV_INIT),
        },
        UpConv {
            w: p.add("up1.weight", &[2 * f, f, 3, 3], CONV_INIT),
        },
    ];
    let head = Conv::new(&mut p, "head", f, c, 7, 1, 0, true, CONV_INIT);
    Ok(Generator {
        config: config.clone(),
        params: p,
        stem,
        down,
        blocks,
        up,
        head,
    })
}

impl Generator {
    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let (_, c, h, w) = {
            let v = g.value(x);
            v.dims4()?
        };
        if c != self.config.input_channels || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!(
                "generator needs {} channels and sides divisible by 4, got {c}x{h}x{w}",
                self.config.input_channels
            )));
        }
        let norm_relu = |v: Var| -> Result<Var> { Ok(g.relu(g.instance_norm(v, NORM_EPS)?)) };
        let mut h = g.reflect_pad(x, 3)?;
        h = norm_relu(self.stem.forward(g, p, h)?)?;
        for d in &self.down {
            h = norm_relu(d.forward(g, p, h)?)?;
        }
        for [a, b] in &self.blocks {
            let mut r = g.reflect_pad(h, 1)?;
            r = norm_relu(a.forward(g, p, r)?)?;
            r = g.reflect_pad(r, 1)?;
            r = g.instance_norm(b.forward(g, p, r)?, NORM_EPS)?;
            h = g.add(h, r)?;
        }
        for u in &self.up {
            h = norm_relu(u.forward(g, p, h)?)?;
        }
        h = g.reflect_pad(h, 3)?;
        Ok(g.tanh(self.head.forward(g, p, h)?))
    }

    /// Evaluate on a batch without recording gradients.
    pub fn apply(&self, images: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let x = g.constant(images.clone());
        let y = self.forward(&g, &p, x)?;
        let out = g.value(y).clone();
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Discriminator

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub input_channels: usize,
    pub base_filters: usize,
    pub num_downsampling_layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            base_filters: 64,
            num_downsampling_layers: 3,
        }
    }
}

/// Kernel, stride and padding of one convolution in a stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_downsampling_layers < 1 || self.base_filters == 0 || self.input_channels == 0 {
            return Err(Error::Config(
                "discriminator needs at least one downsampling layer and positive widths".into(),
            ));
        }
        Ok(())
    }

    /// Stride-2 blocks, one stride-1 block, then the stride-1 score conv; all 4x4 with pad 1.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = vec![
            LayerSpec {
                kernel: 4,
                stride: 2,
                pad: 1
            };
            self.num_downsampling_layers
        ];
        specs.extend([LayerSpec {
            kernel: 4,
            stride: 1,
            pad: 1,
        }; 2]);
        specs
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.layer_specs())
    }

    pub fn output_side(&self, input: usize) -> Option<usize> {
        self.layer_specs().iter().try_fold(input, |side, l| {
            (side + 2 * l.pad)
                .checked_sub(l.kernel)
                .map(|s| s / l.stride + 1)
        })
    }
}

/// Receptive field of a conv stack: `1 + sum_i (k_i - 1) * prod_{j<i} s_j`.
pub fn receptive_field(layers: &[LayerSpec]) -> usize {
    let mut rf = 1;
    let mut jump = 1;
    for l in layers {
        rf += (l.kernel - 1) * jump;
        jump *= l.stride;
    }
    rf
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamSet,
    convs: Vec<Conv>,
}

/// PatchGAN critic: 4x4 convolutions with leaky-ReLU(0.2), instance norm on
/// every block but the first, ending in a one-channel score map.
pub fn build_discriminator(config: &DiscriminatorConfig) -> Result<Discriminator> {
    config.validate()?;
    let mut p = ParamSet::new();
    let specs = config.layer_specs();
    let mut convs = Vec::with_capacity(specs.len());
    let mut cin = config.input_channels;
    let last = specs.len() - 1;
    for (i, s) in specs.iter().enumerate() {
        let cout = if i == last {
            1
        } else {
            config.base_filters << i.min(3)
        };
        let bias = i == 0 || i == last;
        convs.push(Conv::new(
            &mut p,
            &format!("conv{i}"),
            cin,
            cout,
            s.kernel,
            s.stride,
            s.pad,
            bias,
            CONV_INIT,
        ));
        cin = cout;
    }
    Ok(Discriminator {
        config: config.clone(),
        params: p,
        convs,
    })
}

impl Discriminator {
    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Raw patch scores `[N, 1, h, w]`.
    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let last = self.convs.len() - 1;
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(g, p, h)?;
            if i == last {
                break;
            }
            if i > 0 {
                h = g.instance_norm(h, NORM_EPS)?;
            }
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        Ok(h)
    }

    pub fn apply(&self, images: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let x = g.constant(images.clone());
        let y = self.forward(&g, &p, x)?;
        let out = g.value(y).clone();
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Recognizer

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    /// Three stride-2 convolutions, flattened so face layout survives.
    DeskScaleCnn,
    /// Five blocks of paired 3x3 convolutions with 2x2 max pooling, then fc6.
    Vgg16Style,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecognizerConfig {
    pub embedding_dim: usize,
    pub backbone: Backbone,
    pub num_identities: usize,
    pub base_filters: usize,
    /// Side length the trunk expects; larger inputs are box-downsampled to it.
    pub input_size: usize,
    /// Project embeddings onto the unit sphere.
    pub normalize_embeddings: bool,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            backbone: Backbone::DeskScaleCnn,
            num_identities: 8,
            base_filters: 16,
            input_size: 64,
            normalize_embeddings: true,
        }
    }
}

impl RecognizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.num_identities == 0 || self.base_filters == 0 {
            return Err(Error::Config(
                "recognizer embedding_dim, num_identities and base_filters must be positive".into(),
            ));
        }
        let min = match self.backbone {
            Backbone::DeskScaleCnn => 8,
            Backbone::Vgg16Style => 32,
        };
        if self.input_size < min {
            return Err(Error::Config(format!(
                "recognizer input_size must be at least {min} for {:?}",
                self.backbone
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Recognizer {
    config: RecognizerConfig,
    params: ParamSet,
    trunk: Vec<Conv>,
    fc6: Option<(ParamId, ParamId)>,
    fc7: (ParamId, ParamId),
    fc8: (ParamId, ParamId),
}

/// Embedding network whose `fc7` layer is the identity feature and whose
/// `fc8` layer classifies identities.
pub fn build_recognizer(config: &RecognizerConfig) -> Result<Recognizer> {
    config.validate()?;
    let mut p = ParamSet::new();
    let f = config.base_filters;
    let relu_init = Init::FanIn {
        gain: std::f64::consts::SQRT_2,
    };
    let mut trunk = Vec::new();
    let features = match config.backbone {
        Backbone::DeskScaleCnn => {
            let widths = [3, f, 2 * f, 4 * f];
            for i in 0..3 {
                trunk.push(Conv::new(
                    &mut p,
                    &format!("conv{i}"),
                    widths[i],
                    widths[i + 1],
                    3,
                    2,
                    1,
                    true,
                    relu_init,
                ));
            }
            let side = config.input_size.div_ceil(8);
            4 * f * side * side
        }
        Backbone::Vgg16Style => {
            let widths = [f, 2 * f, 4 * f, 8 * f, 8 * f];
            let mut cin = 3;
            for (b, &w) in widths.iter().enumerate() {
                for j in 0..2 {
                    trunk.push(Conv::new(
                        &mut p,
                        &format!("block{b}.conv{j}"),
                        if j == 0 { cin } else { w },
                        w,
                        3,
                        1,
                        1,
                        true,
                        relu_init,
                    ));
                }
                cin = w;
            }
            let side = config.input_size >> 5;
            8 * f * side * side
        }
    };
    let linear = |p: &mut ParamSet, name: &str, fin: usize, fout: usize| {
        (
            p.add(format!("{name}.weight"), &[fout, fin], relu_init),
            p.add(format!("{name}.bias"), &[fout], Init::Zeros),
        )
    };
    let (fc6, fc7_in) = match config.backbone {
        Backbone::DeskScaleCnn => (None, features),
        Backbone::Vgg16Style => (Some(linear(&mut p, "fc6", features, 4 * config.embedding_dim)), 4 * config.embedding_dim),
    };
    let fc7 = linear(&mut p, "fc7", fc7_in, config.embedding_dim);
    let fc8 = linear(&mut p, "fc8", config.embedding_dim, config.num_identities);
    Ok(Recognizer {
        config: config.clone(),
        params: p,
        trunk,
        fc6,
        fc7,
        fc8,
    })
}

impl Recognizer {
    pub fn config(&self) -> &RecognizerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn fit_input(&self, g: &Graph, x: Var) -> Result<Var> {
        let (_, c, h, w) = {
            let v = g.value(x);
            v.dims4()?
        };
        let s = self.config.input_size;
        if c != 3 || h != w || h % s != 0 {
            return Err(Error::Shape(format!(
                "recognizer expects 3 x k*{s} x k*{s} images, got {c}x{h}x{w}"
            )));
        }
        if h == s {
            Ok(x)
        } else {
            g.avg_pool(x, h / s)
        }
    }

    /// The `fc7` embedding `[N, embedding_dim]`.
    pub fn embed_var(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = self.fit_input(g, x)?;
        match self.config.backbone {
            Backbone::DeskScaleCnn => {
                for c in &self.trunk {
                    h = g.leaky_relu(c.forward(g, p, h)?, LEAKY_SLOPE);
                }
                let n = g.shape(h)[0];
                let flat: usize = g.shape(h)[1..].iter().product();
                h = g.reshape(h, &[n, flat])?;
            }
            Backbone::Vgg16Style => {
                for pair in self.trunk.chunks(2) {
                    for c in pair {
                        h = g.relu(c.forward(g, p, h)?);
                    }
                    h = g.max_pool2(h)?;
                }
                let n = g.shape(h)[0];
                let flat: usize = g.shape(h)[1..].iter().product();
                h = g.reshape(h, &[n, flat])?;
                let (w6, b6) = self.fc6.expect("vgg backbone has fc6");
                h = g.relu(g.linear(h, p.get(w6), Some(p.get(b6)))?);
            }
        }
        let e = g.linear(h, p.get(self.fc7.0), Some(p.get(self.fc7.1)))?;
        if self.config.normalize_embeddings {
            g.l2_normalize_rows(e)
        } else {
            Ok(e)
        }
    }

    /// Identity logits `[N, num_identities]` computed on top of the embedding.
    pub fn classify_var(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let e = self.embed_var(g, p, x)?;
        g.linear(e, p.get(self.fc8.0), Some(p.get(self.fc8.1)))
    }

    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let x = g.constant(images.clone());
        let e = self.embed_var(&g, &p, x)?;
        let out = g.value(e).clone();
        Ok(out)
    }

    pub fn classify(&self, images: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let x = g.constant(images.clone());
        let e = self.classify_var(&g, &p, x)?;
        let out = g.value(e).clone();
        Ok(out)
    }
}

/// Scalar parameter count of any network's weights.
pub fn count_parameters(params: &ParamSet) -> usize {
    params.count()
}

/// Reinitialize weights from `seed` (conv weights N(0, 0.02) for the synthesis nets).
pub fn init_parameters(params: &mut ParamSet, seed: u64) {
    params.init(seed)
}
