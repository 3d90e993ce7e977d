//! Generator and discriminator networks.
//!
//! The generator is a U-Net over each slice whose bottleneck features are run
//! through a bidirectional LSTM along the slice axis. It emits a softmax
//! segmentation map per slice and one disease distribution per patient. The
//! disease head is a small dense network over a standardised selection of
//! the final LSTM states, the pooled deepest encoder skip and the log of the
//! predicted class fractions (by default only the last).
//!
//! The discriminator scores every pixel of an (image, segmentation) pair
//! independently with 1x1 convolutions, adding a per-slice context vector
//! computed by a pooled convolutional path and a bidirectional LSTM.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::lstm::BiLstm;
use crate::params::{Bound, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
const HEAD_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub pool_depth: usize,
    pub num_seg_classes: usize,
    pub num_diseases: usize,
    /// Defaults to half the flattened bottleneck length.
    pub lstm_hidden: Option<usize>,
    pub dropout_p: f64,
    /// Number of innermost decoder blocks followed by dropout.
    pub dropout_blocks: usize,
    pub height: usize,
    pub width: usize,
    /// 3x3 convolutions per encoder scale, shallowest first.
    pub encoder_convs: Vec<usize>,
    /// 3x3 convolutions per decoder block, deepest first.
    pub decoder_convs: Vec<usize>,
    pub cls_hidden: usize,
    pub init_std: f64,
    pub head_inputs: HeadInputs,
    /// Weight of each new patient in the running statistics that
    /// standardise the disease-head input.
    pub head_norm_momentum: f64,
}

/// Feature groups concatenated into the disease head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadInputs {
    /// Final forward and backward bottleneck LSTM states.
    pub lstm_states: bool,
    /// Pooled deepest encoder skip, averaged over slices.
    pub deep_skip: bool,
    /// Log of the predicted per-class area fractions over the volume.
    pub class_fractions: bool,
}

impl Default for HeadInputs {
    fn default() -> Self {
        Self {
            lstm_states: false,
            deep_skip: false,
            class_fractions: true,
        }
    }
}

impl HeadInputs {
    fn len(&self, lstm: usize, deep: usize, classes: usize) -> usize {
        [
            (self.lstm_states, lstm),
            (self.deep_skip, deep),
            (self.class_fractions, classes),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| n)
        .sum()
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            base_channels: 4,
            pool_depth: 4,
            num_seg_classes: 3,
            num_diseases: 2,
            lstm_hidden: None,
            dropout_p: 0.5,
            dropout_blocks: 2,
            height: 32,
            width: 32,
            encoder_convs: alloc::vec![2, 2, 2, 2],
            decoder_convs: alloc::vec![2, 0, 0, 0],
            cls_hidden: 64,
            init_std: 0.02,
            head_inputs: HeadInputs::default(),
            head_norm_momentum: 0.01,
        }
    }
}

fn check_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{} must be positive", name)));
    }
    Ok(())
}

fn check_extent(h: usize, w: usize, depth: usize) -> Result<()> {
    let f = 1usize << depth;
    if h % f != 0 || w % f != 0 {
        return Err(Error::Config(format!(
            "input {}x{} not divisible by 2^{} = {}",
            h, w, depth, f
        )));
    }
    Ok(())
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("in_channels", self.in_channels),
            ("base_channels", self.base_channels),
            ("pool_depth", self.pool_depth),
            ("num_seg_classes", self.num_seg_classes),
            ("num_diseases", self.num_diseases),
            ("height", self.height),
            ("width", self.width),
            ("cls_hidden", self.cls_hidden),
        ] {
            check_positive(n, v)?;
        }
        if self.num_seg_classes < 2 || self.num_diseases < 2 {
            return Err(Error::Config(
                "need at least two segmentation classes and two diseases".into(),
            ));
        }
        check_extent(self.height, self.width, self.pool_depth)?;
        if self.encoder_convs.len() != self.pool_depth || self.decoder_convs.len() != self.pool_depth {
            return Err(Error::Config(format!(
                "encoder_convs/decoder_convs need {} entries",
                self.pool_depth
            )));
        }
        if self.encoder_convs.contains(&0) {
            return Err(Error::Config("every encoder scale needs at least one conv".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} not in [0,1)", self.dropout_p)));
        }
        if self.lstm_hidden == Some(0) {
            return Err(Error::Config("lstm_hidden must be positive".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        let h = &self.head_inputs;
        if !(h.lstm_states || h.deep_skip || h.class_fractions) {
            return Err(Error::Config("head_inputs selects no features".into()));
        }
        if !(self.head_norm_momentum > 0.0 && self.head_norm_momentum <= 1.0) {
            return Err(Error::Config(format!(
                "head_norm_momentum {} not in (0,1]",
                self.head_norm_momentum
            )));
        }
        Ok(())
    }

    pub fn encoder_channels(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    pub fn bottleneck_extent(&self) -> (usize, usize) {
        (self.height >> self.pool_depth, self.width >> self.pool_depth)
    }

    pub fn bottleneck_len(&self) -> usize {
        let (h, w) = self.bottleneck_extent();
        self.encoder_channels(self.pool_depth - 1) * h * w
    }

    pub fn lstm_hidden(&self) -> usize {
        self.lstm_hidden.unwrap_or((self.bottleneck_len() / 2).max(1))
    }

    /// 3x3 convolutions on the encoder/decoder path (heads and transposed
    /// convolutions excluded).
    pub fn conv_layer_count(&self) -> usize {
        self.encoder_convs.iter().sum::<usize>() + self.decoder_convs.iter().sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Image modalities; the segmentation channels are added on top.
    pub in_channels: usize,
    pub num_seg_classes: usize,
    pub base_channels: usize,
    pub pool_depth: usize,
    pub lstm_hidden: usize,
    pub pixel_hidden: usize,
    pub height: usize,
    pub width: usize,
    pub init_std: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            num_seg_classes: 3,
            base_channels: 4,
            pool_depth: 4,
            lstm_hidden: 16,
            pixel_hidden: 8,
            height: 32,
            width: 32,
            init_std: 0.02,
        }
    }
}

impl DiscriminatorConfig {
    pub fn matching(g: &GeneratorConfig) -> Self {
        Self {
            in_channels: g.in_channels,
            num_seg_classes: g.num_seg_classes,
            height: g.height,
            width: g.width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("in_channels", self.in_channels),
            ("num_seg_classes", self.num_seg_classes),
            ("base_channels", self.base_channels),
            ("pool_depth", self.pool_depth),
            ("lstm_hidden", self.lstm_hidden),
            ("pixel_hidden", self.pixel_hidden),
            ("height", self.height),
            ("width", self.width),
        ] {
            check_positive(n, v)?;
        }
        check_extent(self.height, self.width, self.pool_depth)?;
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    fn context_channels(&self, layer: usize) -> usize {
        self.base_channels << layer.min(self.pool_depth - 1)
    }

    /// Shape of the score map for one slice.
    pub fn score_map_shape(&self) -> [usize; 3] {
        [1, self.height, self.width]
    }

    /// Convolutions on the context path: one per scale plus one at the
    /// pooled resolution.
    pub fn conv_layer_count(&self) -> usize {
        self.pool_depth + 1
    }
}

/// 3x3 convolution without bias, instance norm, leaky ReLU.
#[derive(Clone, Debug)]
struct ConvNorm {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

impl ConvNorm {
    fn new<T: Real>(s: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            w: s.add_normal(format!("{name}.w"), &[c_out, c_in, 3, 3], std, rng),
            gamma: s.add_const(format!("{name}.gamma"), &[c_out], 1.0),
            beta: s.add_const(format!("{name}.beta"), &[c_out], 0.0),
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, b.var(self.w), None)?;
        let y = g.instance_norm(y, b.var(self.gamma), b.var(self.beta))?;
        Ok(g.leaky_relu(y, T::of(LEAKY_SLOPE)))
    }
}

#[derive(Clone, Debug)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

impl Affine {
    fn conv<T: Real>(
        s: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        Self {
            w: s.add_normal(format!("{name}.w"), &[c_out, c_in, k, k], std, rng),
            b: s.add_const(format!("{name}.b"), &[c_out], 0.0),
        }
    }

    fn dense<T: Real>(s: &mut ParamStore<T>, name: &str, n_in: usize, n_out: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            w: s.add_normal(format!("{name}.w"), &[n_out, n_in], std, rng),
            b: s.add_const(format!("{name}.b"), &[n_out], 0.0),
        }
    }

    fn conv_apply<T: Real>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, b.var(self.w), Some(b.var(self.b)))
    }

    fn up_apply<T: Real>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        g.upconv2d(x, b.var(self.w), Some(b.var(self.b)))
    }

    fn dense_apply<T: Real>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        g.dense(x, b.var(self.w), Some(b.var(self.b)))
    }
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    up: Affine,
    convs: Vec<ConvNorm>,
}

#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    pub params: ParamStore<T>,
    encoder: Vec<Vec<ConvNorm>>,
    lstm: BiLstm,
    lstm_proj: Option<Affine>,
    decoder: Vec<DecoderBlock>,
    seg_head: Affine,
    head_mean: ParamId,
    head_var: ParamId,
    cls_hidden: Affine,
    cls_out: Affine,
}

/// Graph outputs of one generator pass over a patient.
#[derive(Clone, Debug)]
pub struct GenOutput {
    /// `[num_seg_classes, H, W]` per slice, softmax-normalised over classes.
    pub seg_probs: Vec<Var>,
    /// `[num_diseases]`, softmax-normalised.
    pub disease_probs: Var,
    /// Disease-head input before standardisation.
    pub head_features: Var,
}

impl<T: Real> Generator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(seed, 0x6e6e);
        let std = config.init_std;
        let mut s = ParamStore::new();
        let mut encoder = Vec::new();
        let mut c_prev = config.in_channels;
        for scale in 0..config.pool_depth {
            let c = config.encoder_channels(scale);
            let mut convs = Vec::new();
            for j in 0..config.encoder_convs[scale] {
                convs.push(ConvNorm::new(
                    &mut s,
                    &format!("enc{scale}.conv{j}"),
                    c_prev,
                    c,
                    std,
                    &mut rng,
                ));
                c_prev = c;
            }
            encoder.push(convs);
        }
        let flat = config.bottleneck_len();
        let hidden = config.lstm_hidden();
        let lstm = BiLstm::new(&mut s, "bottleneck.lstm", flat, hidden, std, &mut rng);
        let lstm_proj =
            (2 * hidden != flat).then(|| Affine::dense(&mut s, "bottleneck.proj", 2 * hidden, flat, std, &mut rng));
        let mut decoder = Vec::new();
        for (i, scale) in (0..config.pool_depth).rev().enumerate() {
            let c_skip = config.encoder_channels(scale);
            let up = Affine::conv(&mut s, &format!("dec{i}.up"), c_prev, c_skip, 2, std, &mut rng);
            let mut c = 2 * c_skip;
            let mut convs = Vec::new();
            for j in 0..config.decoder_convs[i] {
                convs.push(ConvNorm::new(
                    &mut s,
                    &format!("dec{i}.conv{j}"),
                    c,
                    c_skip,
                    std,
                    &mut rng,
                ));
                c = c_skip;
            }
            c_prev = c;
            decoder.push(DecoderBlock { up, convs });
        }
        let seg_head = Affine::conv(&mut s, "seg_head", c_prev, config.num_seg_classes, 1, std, &mut rng);
        let deep = config.encoder_channels(config.pool_depth - 1);
        let head_len = config.head_inputs.len(2 * hidden, deep, config.num_seg_classes);
        // running statistics, stored with the parameters but never bound to a
        // loss, so they receive zero gradient and the optimiser leaves them alone
        let head_mean = s.add_const("cls.norm.mean", &[head_len], 0.0);
        let head_var = s.add_const("cls.norm.var", &[head_len], 1.0);
        let cls_hidden = Affine::dense(&mut s, "cls.hidden", head_len, config.cls_hidden, std, &mut rng);
        let cls_out = Affine::dense(&mut s, "cls.out", config.cls_hidden, config.num_diseases, std, &mut rng);
        Ok(Self {
            config,
            params: s,
            encoder,
            lstm,
            lstm_proj,
            decoder,
            seg_head,
            head_mean,
            head_var,
            cls_hidden,
            cls_out,
        })
    }

    /// Builds the forward pass for one patient (`xs[i]` is slice `i`,
    /// `[in_channels, H, W]`).
    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, xs: &[Var], mode: Mode, rng: &mut Rng) -> Result<GenOutput> {
        let cfg = &self.config;
        if xs.is_empty() {
            return Err(Error::Empty("generator_forward"));
        }
        for (i, &x) in xs.iter().enumerate() {
            if g.shape(x) != [cfg.in_channels, cfg.height, cfg.width] {
                return Err(shape_err(
                    "generator_forward",
                    format!(
                        "slice {} has shape {:?}, expected [{}, {}, {}]",
                        i,
                        g.shape(x),
                        cfg.in_channels,
                        cfg.height,
                        cfg.width
                    ),
                ));
            }
        }
        let leak = T::of(LEAKY_SLOPE);
        let mut skips: Vec<Vec<Var>> = Vec::with_capacity(xs.len());
        let mut flat = Vec::with_capacity(xs.len());
        let (bh, bw) = cfg.bottleneck_extent();
        for &x in xs {
            let mut h = x;
            let mut sk = Vec::with_capacity(cfg.pool_depth);
            for scale in &self.encoder {
                for conv in scale {
                    h = conv.apply(g, b, h)?;
                }
                sk.push(h);
                h = g.maxpool2d(h)?;
            }
            let n = g.value(h).len();
            flat.push(g.reshape(h, &[n])?);
            skips.push(sk);
        }
        let lstm = self.lstm.forward(g, b, &flat)?;
        let deep_c = cfg.encoder_channels(cfg.pool_depth - 1);
        let train = mode == Mode::Train;
        let mut seg_probs = Vec::with_capacity(xs.len());
        let mut fractions = Vec::with_capacity(xs.len());
        for (s, &o) in lstm.outputs.iter().enumerate() {
            let mut h = match &self.lstm_proj {
                Some(p) => p.dense_apply(g, b, o)?,
                None => o,
            };
            h = g.reshape(h, &[deep_c, bh, bw])?;
            for (i, block) in self.decoder.iter().enumerate() {
                let skip = skips[s][cfg.pool_depth - 1 - i];
                let up = block.up.up_apply(g, b, h)?;
                let up = g.leaky_relu(up, leak);
                h = g.concat_channel(&[up, skip])?;
                for conv in &block.convs {
                    h = conv.apply(g, b, h)?;
                }
                if i < cfg.dropout_blocks {
                    h = g.dropout(h, cfg.dropout_p, train, rng)?;
                }
            }
            let logits = self.seg_head.conv_apply(g, b, h)?;
            let probs = g.softmax_channel(logits)?;
            fractions.push(g.global_avg_pool(probs)?);
            seg_probs.push(probs);
        }
        let inv = T::one() / T::of(xs.len() as f64);
        let inputs = &cfg.head_inputs;
        let mut parts = Vec::with_capacity(3);
        if inputs.lstm_states {
            parts.push(lstm.summary);
        }
        if inputs.deep_skip {
            let deep: Vec<Var> = skips
                .iter()
                .map(|sk| g.global_avg_pool(sk[cfg.pool_depth - 1]))
                .collect::<Result<_>>()?;
            let deep = g.add_n(&deep)?;
            parts.push(g.scale(deep, inv));
        }
        if inputs.class_fractions {
            // the log puts a 1% and a 2% lesion load a usable distance apart
            let f = g.add_n(&fractions)?;
            let f = g.scale(f, inv);
            parts.push(g.ln(f));
        }
        let feat = g.concat_channel(&parts)?;
        // standardise with running statistics: the head's biases move about
        // lr per step and cannot chase an offset of several units
        let mean = g.constant(self.params.get(self.head_mean).value.clone());
        let var = &self.params.get(self.head_var).value;
        let eps = T::of(HEAD_NORM_EPS);
        let inv_std = var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let inv_std = g.constant(Tensor::new(var.shape().to_vec(), inv_std)?);
        let centred = g.sub(feat, mean)?;
        let normed = g.mul(centred, inv_std)?;
        let hid = self.cls_hidden.dense_apply(g, b, normed)?;
        let hid = g.leaky_relu(hid, leak);
        let logits = self.cls_out.dense_apply(g, b, hid)?;
        let disease_probs = g.softmax_channel(logits)?;
        Ok(GenOutput {
            seg_probs,
            disease_probs,
            head_features: feat,
        })
    }

    /// Inference-mode prediction on plain tensors.
    pub fn predict(&self, slices: &[Tensor<T>]) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let xs: Vec<Var> = slices.iter().map(|t| g.constant(t.clone())).collect();
        let mut rng = Rng::seed(0);
        let out = self.forward(&mut g, &b, &xs, Mode::Infer, &mut rng)?;
        Ok((
            out.seg_probs.iter().map(|&v| g.value(v).clone()).collect(),
            g.value(out.disease_probs).clone(),
        ))
    }

    /// Folds one patient's disease-head input into the exponentially
    /// weighted running mean and variance.
    pub fn update_head_stats(&mut self, features: &[T]) -> Result<()> {
        let n = self.params.get(self.head_mean).value.len();
        if features.len() != n {
            return Err(shape_err(
                "update_head_stats",
                format!("{} features, expected {}", features.len(), n),
            ));
        }
        if let Some(x) = features.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("disease-head feature {}", x)));
        }
        let m = T::of(self.config.head_norm_momentum);
        let mut deltas = Vec::with_capacity(n);
        for (mu, &x) in self
            .params
            .get_mut(self.head_mean)
            .value
            .data_mut()
            .iter_mut()
            .zip(features)
        {
            let d = x - *mu;
            *mu += m * d;
            deltas.push(d);
        }
        for (v, d) in self
            .params
            .get_mut(self.head_var)
            .value
            .data_mut()
            .iter_mut()
            .zip(deltas)
        {
            *v = (T::one() - m) * (*v + m * d * d);
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            lstm: self.lstm.clone(),
            lstm_proj: self.lstm_proj.clone(),
            decoder: self.decoder.clone(),
            seg_head: self.seg_head.clone(),
            head_mean: self.head_mean,
            head_var: self.head_var,
            cls_hidden: self.cls_hidden.clone(),
            cls_out: self.cls_out.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<T>,
    first: Affine,
    context: Vec<ConvNorm>,
    last: Affine,
    lstm: BiLstm,
    ctx_proj: Affine,
    pixel_in: Affine,
    pixel_out: Affine,
}

impl<T: Real> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(seed, 0xd15c);
        let std = config.init_std;
        let mut s = ParamStore::new();
        let c_in = config.in_channels + config.num_seg_classes;
        let first = Affine::conv(&mut s, "ctx.conv0", c_in, config.context_channels(0), 3, std, &mut rng);
        let mut context = Vec::new();
        for l in 1..config.pool_depth {
            context.push(ConvNorm::new(
                &mut s,
                &format!("ctx.conv{l}"),
                config.context_channels(l - 1),
                config.context_channels(l),
                std,
                &mut rng,
            ));
        }
        let c_last = config.context_channels(config.pool_depth);
        let last = Affine::conv(
            &mut s,
            &format!("ctx.conv{}", config.pool_depth),
            config.context_channels(config.pool_depth - 1),
            c_last,
            3,
            std,
            &mut rng,
        );
        let flat = c_last * (config.height >> config.pool_depth) * (config.width >> config.pool_depth);
        let lstm = BiLstm::new(&mut s, "ctx.lstm", flat, config.lstm_hidden, std, &mut rng);
        let ctx_proj = Affine::dense(
            &mut s,
            "ctx.proj",
            2 * config.lstm_hidden,
            config.pixel_hidden,
            std,
            &mut rng,
        );
        let pixel_in = Affine::conv(&mut s, "pixel.in", c_in, config.pixel_hidden, 1, std, &mut rng);
        let pixel_out = Affine::conv(&mut s, "pixel.out", config.pixel_hidden, 1, 1, std, &mut rng);
        Ok(Self {
            config,
            params: s,
            first,
            context,
            last,
            lstm,
            ctx_proj,
            pixel_in,
            pixel_out,
        })
    }

    /// Per-pixel real/fake scores in (0,1), `[1, H, W]` per slice.
    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, xs: &[Var], ys: &[Var]) -> Result<Vec<Var>> {
        let cfg = &self.config;
        if xs.is_empty() {
            return Err(Error::Empty("discriminator_forward"));
        }
        if xs.len() != ys.len() {
            return Err(shape_err(
                "discriminator_forward",
                format!("{} image slices vs {} segmentation slices", xs.len(), ys.len()),
            ));
        }
        let leak = T::of(LEAKY_SLOPE);
        let mut inputs = Vec::with_capacity(xs.len());
        let mut flat = Vec::with_capacity(xs.len());
        for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
            let (sx, sy) = (g.shape(x), g.shape(y));
            if sx != [cfg.in_channels, cfg.height, cfg.width] || sy != [cfg.num_seg_classes, cfg.height, cfg.width] {
                return Err(shape_err(
                    "discriminator_forward",
                    format!(
                        "slice {}: image {:?} and segmentation {:?} not aligned with config",
                        i, sx, sy
                    ),
                ));
            }
            let xy = g.concat_channel(&[x, y])?;
            let mut h = self.first.conv_apply(g, b, xy)?;
            h = g.leaky_relu(h, leak);
            h = g.maxpool2d(h)?;
            for conv in &self.context {
                h = conv.apply(g, b, h)?;
                h = g.maxpool2d(h)?;
            }
            h = self.last.conv_apply(g, b, h)?;
            h = g.leaky_relu(h, leak);
            let n = g.value(h).len();
            flat.push(g.reshape(h, &[n])?);
            inputs.push(xy);
        }
        let lstm = self.lstm.forward(g, b, &flat)?;
        let mut scores = Vec::with_capacity(xs.len());
        for (&xy, &ctx) in inputs.iter().zip(&lstm.outputs) {
            let c = self.ctx_proj.dense_apply(g, b, ctx)?;
            let p = self.pixel_in.conv_apply(g, b, xy)?;
            let p = g.add_channel_bias(p, c)?;
            let p = g.leaky_relu(p, leak);
            let logit = self.pixel_out.conv_apply(g, b, p)?;
            scores.push(g.sigmoid(logit));
        }
        Ok(scores)
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config.clone(),
            params: self.params.cast(),
            first: self.first.clone(),
            context: self.context.clone(),
            last: self.last.clone(),
            lstm: self.lstm.clone(),
            ctx_proj: self.ctx_proj.clone(),
            pixel_in: self.pixel_in.clone(),
            pixel_out: self.pixel_out.clone(),
        }
    }
}

/// `[K, H, W]` one-hot encoding of a label slice.
pub fn one_hot_slice<T: Real>(labels: &[u8], k: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    if labels.len() != h * w {
        return Err(shape_err(
            "one_hot_slice",
            format!("{} labels for {}x{}", labels.len(), h, w),
        ));
    }
    let mut data = alloc::vec![T::zero(); k * h * w];
    for (p, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= k {
            return Err(Error::LabelOutOfRange {
                label: l,
                num_classes: k,
                context: String::new(),
            });
        }
        data[l * h * w + p] = T::one();
    }
    Tensor::new([k, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slices(rng: &mut Rng, n: usize, c: usize, h: usize, w: usize) -> Vec<Tensor<f64>> {
        (0..n)
            .map(|_| Tensor::new([c, h, w], (0..c * h * w).map(|_| rng.normal()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn default_path_has_ten_convs() {
        let c = GeneratorConfig::default();
        assert_eq!(c.conv_layer_count(), 10);
        assert_eq!(c.pool_depth, 4);
        assert_eq!(DiscriminatorConfig::default().conv_layer_count(), 5);
    }

    #[test]
    fn bottleneck_extent_and_divisibility() {
        let c = GeneratorConfig::default();
        assert_eq!(c.bottleneck_extent(), (2, 2));
        let bad = GeneratorConfig {
            height: 33,
            ..GeneratorConfig::default()
        };
        assert!(matches!(Generator::<f64>::new(bad, 1), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Generator::<f32>::new(GeneratorConfig::default(), 42).unwrap();
        let b = Generator::<f32>::new(GeneratorConfig::default(), 42).unwrap();
        assert_eq!(a.params, b.params);
        let c = Generator::<f32>::new(GeneratorConfig::default(), 43).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn generator_output_shapes_and_normalisation() {
        let cfg = GeneratorConfig {
            num_seg_classes: 4,
            in_channels: 1,
            ..GeneratorConfig::default()
        };
        let gen = Generator::<f64>::new(cfg, 3).unwrap();
        let mut rng = Rng::seed(1);
        let xs = slices(&mut rng, 8, 1, 32, 32);
        let (seg, dis) = gen.predict(&xs).unwrap();
        assert_eq!(seg.len(), 8);
        for s in &seg {
            assert_eq!(s.shape(), &[4, 32, 32]);
            for p in 0..32 * 32 {
                let sum: f64 = (0..4).map(|c| s.data()[c * 1024 + p]).sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
        assert!((dis.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let (seg2, dis2) = gen.predict(&xs).unwrap();
        assert_eq!(seg, seg2);
        assert_eq!(dis, dis2);
    }

    #[test]
    fn head_running_mean_tracks_features() {
        let cfg = GeneratorConfig {
            head_norm_momentum: 0.5,
            ..GeneratorConfig::default()
        };
        let mut gen = Generator::<f64>::new(cfg, 3).unwrap();
        let id = gen.params.find("cls.norm.mean").unwrap();
        let n = gen.params.get(id).value.len();
        let mut rng = Rng::seed(4);
        let xs = slices(&mut rng, 2, 2, 32, 32);
        let (_, before) = gen.predict(&xs).unwrap();

        let feats: Vec<f64> = (0..n).map(|i| i as f64 - 3.0).collect();
        for _ in 0..3 {
            gen.update_head_stats(&feats).unwrap();
        }
        for (m, x) in gen.params.get(id).value.data().iter().zip(&feats) {
            assert!((m - 0.875 * x).abs() < 1e-12);
        }
        let (_, after) = gen.predict(&xs).unwrap();
        assert_ne!(before, after);

        assert!(gen.update_head_stats(&feats[1..]).is_err());
        let mut bad = feats.clone();
        bad[0] = f64::NAN;
        assert!(matches!(gen.update_head_stats(&bad), Err(Error::NonFinite(_))));
        assert!(Generator::<f64>::new(
            GeneratorConfig {
                head_norm_momentum: 0.0,
                ..GeneratorConfig::default()
            },
            3
        )
        .is_err());
    }

    #[test]
    fn disease_loss_reaches_segmentation_path() {
        let gen = Generator::<f64>::new(GeneratorConfig::default(), 3).unwrap();
        let mut rng = Rng::seed(2);
        let xs = slices(&mut rng, 3, 2, 32, 32);
        let mut g = Graph::new();
        let b = gen.params.bind(&mut g);
        let vs: Vec<Var> = xs.into_iter().map(|t| g.constant(t)).collect();
        let out = gen.forward(&mut g, &b, &vs, Mode::Infer, &mut rng).unwrap();
        let loss = g.weighted_l1(out.disease_probs, &[1.0, 0.0], &[1.0, 1.0]).unwrap();
        g.backward(loss).unwrap();
        let grad_norm = |name: &str| {
            let id = gen.params.find(name).unwrap();
            g.grad(b.var(id))
                .map_or(0.0, |d| d.iter().map(|x| x.abs()).sum::<f64>())
        };
        assert!(grad_norm("seg_head.w") > 0.0);
        assert!(grad_norm("enc0.conv0.w") > 0.0);
        assert!(grad_norm("cls.hidden.w") > 0.0);
    }

    #[test]
    fn channel_mismatch_is_error() {
        let gen = Generator::<f64>::new(GeneratorConfig::default(), 3).unwrap();
        let mut rng = Rng::seed(1);
        let xs = slices(&mut rng, 2, 3, 32, 32);
        assert!(gen.predict(&xs).is_err());
    }

    #[test]
    fn reversed_sequence_keeps_normalisation() {
        let gen = Generator::<f64>::new(GeneratorConfig::default(), 9).unwrap();
        let mut rng = Rng::seed(2);
        let mut xs = slices(&mut rng, 5, 2, 32, 32);
        let (_, a) = gen.predict(&xs).unwrap();
        xs.reverse();
        let (_, b) = gen.predict(&xs).unwrap();
        assert_eq!(a.len(), b.len());
        assert!((b.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn channel_bookkeeping_sweep() {
        for base in [4, 8, 16] {
            for h in [16, 32, 64] {
                for w in [16, 32, 64] {
                    let cfg = GeneratorConfig {
                        base_channels: base,
                        height: h,
                        width: w,
                        in_channels: 1,
                        ..GeneratorConfig::default()
                    };
                    let gen = Generator::<f32>::new(cfg.clone(), 1).unwrap();
                    let x = Tensor::zeros([1, h, w]);
                    let (seg, _) = gen.predict(&[x]).unwrap();
                    assert_eq!(seg[0].shape(), &[cfg.num_seg_classes, h, w]);
                }
            }
        }
    }

    #[test]
    fn discriminator_scores_in_unit_interval() {
        let dcfg = DiscriminatorConfig::default();
        let d = Discriminator::<f64>::new(dcfg.clone(), 5).unwrap();
        let mut rng = Rng::seed(3);
        let mut g = Graph::new();
        let b = d.params.bind_frozen(&mut g);
        let xs: Vec<Var> = slices(&mut rng, 3, 2, 32, 32)
            .into_iter()
            .map(|t| g.constant(t))
            .collect();
        let labels: Vec<u8> = (0..1024).map(|i| (i % 3) as u8).collect();
        let real: Vec<Var> = (0..3)
            .map(|_| g.constant(one_hot_slice(&labels, 3, 32, 32).unwrap()))
            .collect();
        let fake: Vec<Var> = (0..3)
            .map(|_| g.constant(Tensor::full([3, 32, 32], 1.0 / 3.0)))
            .collect();
        let sr = d.forward(&mut g, &b, &xs, &real).unwrap();
        let sf = d.forward(&mut g, &b, &xs, &fake).unwrap();
        for (a, bb) in sr.iter().zip(&sf) {
            assert_eq!(g.shape(*a), &dcfg.score_map_shape());
            assert_eq!(g.shape(*a), g.shape(*bb));
            assert!(g.value(*a).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let short = g.constant(Tensor::zeros([3, 16, 16]));
        assert!(d.forward(&mut g, &b, &xs[..1], &[short]).is_err());
    }
}
