//! The two-stream network: a shared convolutional extractor ending in global
//! max pooling, one identity head, and one head per attribute.
//!
//! There is a single parameter set. Source and target batches run through it
//! as separate passes, so batch-norm statistics never mix domains.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Domain, FeatureBatch};
use crate::tape::{BnState, Mode, Param, ParamId, ParamKind, ParamStore, Tape, Var};
use crate::tensor::{lit, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub input: InputShape,
    /// 3×3 convolutions, each followed by a leaky ReLU.
    pub stages: Vec<ConvStage>,
    pub leaky_slope: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            input: InputShape {
                height: 32,
                width: 16,
                channels: 3,
            },
            stages: [16, 32, 64]
                .into_iter()
                .map(|out_channels| ConvStage {
                    out_channels,
                    stride: 2,
                })
                .collect(),
            leaky_slope: 0.01,
        }
    }
}

impl ExtractorConfig {
    pub const KERNEL: usize = 3;

    /// Channels of the last stage, which is the pooled feature dimension.
    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_channels)
    }

    /// Spatial size of the last stage's maps.
    pub fn final_extent(&self) -> (usize, usize) {
        self.stages.iter().fold((self.input.height, self.input.width), |(h, w), s| {
            let pad = Self::KERNEL / 2;
            (
                (h + 2 * pad - Self::KERNEL) / s.stride.max(1) + 1,
                (w + 2 * pad - Self::KERNEL) / s.stride.max(1) + 1,
            )
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("extractor needs at least one stage".into()));
        }
        let InputShape {
            height,
            width,
            channels,
        } = self.input;
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Config(format!("input shape {height}×{width}×{channels}")));
        }
        if self.stages.iter().any(|s| s.out_channels == 0 || s.stride == 0) {
            return Err(Error::Config("stage channels and strides must be positive".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky slope {} outside (0,1)", self.leaky_slope)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            dropout: 0.5,
            leaky_slope: 0.01,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bn_eps >= 0.0 && self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config("batch-norm eps/momentum out of range".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky slope {} outside (0,1)", self.leaky_slope)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub extractor: ExtractorConfig,
    #[serde(default)]
    pub head: HeadConfig,
    /// Number of source identities `K`.
    pub num_identities: usize,
    /// Number of attributes `M`.
    pub num_attributes: usize,
    /// Logits per attribute head.
    #[serde(default = "default_attr_dim")]
    pub attr_dim: usize,
}

fn default_attr_dim() -> usize {
    1
}

impl ModelConfig {
    pub fn new(num_identities: usize, num_attributes: usize) -> Self {
        ModelConfig {
            extractor: ExtractorConfig::default(),
            head: HeadConfig::default(),
            num_identities,
            num_attributes,
            attr_dim: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        self.head.validate()?;
        if self.num_identities == 0 || self.attr_dim == 0 {
            return Err(Error::Config("head output dimensions must be >= 1".into()));
        }
        Ok(())
    }
}

/// How one forward pass behaves.
pub struct PassOptions<'a, R: ?Sized> {
    pub mode: Mode,
    pub rng: &'a mut R,
    /// Whether train-mode batch norm folds this pass into the running stats.
    pub update_running: bool,
}

#[derive(Clone, Debug)]
struct Stage {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

#[derive(Clone, Debug)]
pub struct Head<T> {
    gamma: ParamId,
    beta: ParamId,
    weight: ParamId,
    bias: ParamId,
    pub bn: BnState<T>,
    out_dim: usize,
}

impl<T: Real> Head<T> {
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    pub fn beta(&self) -> ParamId {
        self.beta
    }
}

/// Tape handles for one pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub feature_maps: Var,
    pub pooled: Var,
    pub id_logits: Var,
    pub attr_logits: Vec<Var>,
}

/// Materialized outputs of one pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// Last-stage maps, `n×C×H′×W′`.
    pub feature_maps: Tensor<T>,
    pub pooled: FeatureBatch<T>,
    pub id_logits: Tensor<T>,
    pub attr_logits: Vec<Tensor<T>>,
}

impl ForwardVars {
    pub fn materialize<T: Real>(&self, tape: &Tape<T>, domain: Domain) -> Result<ForwardOutput<T>> {
        Ok(ForwardOutput {
            feature_maps: tape.value(self.feature_maps).clone(),
            pooled: FeatureBatch::new(tape.value(self.pooled).clone(), domain)?,
            id_logits: tape.value(self.id_logits).clone(),
            attr_logits: self.attr_logits.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct MmfaModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    stages: Vec<Stage>,
    id_head: Head<T>,
    attr_heads: Vec<Head<T>>,
}

fn uniform_init<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lit::<T>(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

impl<T: Real> MmfaModel<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut stages = Vec::new();
        let mut in_ch = config.extractor.input.channels;
        let k = ExtractorConfig::KERNEL;
        for (i, s) in config.extractor.stages.iter().enumerate() {
            let fan_in = in_ch * k * k;
            let weight = params.add(Param::new(
                format!("stage{i}.weight"),
                uniform_init(&[s.out_channels, in_ch, k, k], fan_in, rng),
                ParamKind::Weight,
            ));
            let bias = params.add(Param::new(
                format!("stage{i}.bias"),
                Tensor::zeros(&[s.out_channels]),
                ParamKind::Bias,
            ));
            stages.push(Stage {
                weight,
                bias,
                stride: s.stride,
            });
            in_ch = s.out_channels;
        }
        let d = config.extractor.feature_dim();
        let id_head = Self::make_head(&mut params, "id_head", d, config.num_identities, &config.head, rng);
        let attr_heads = (0..config.num_attributes)
            .map(|m| {
                Self::make_head(
                    &mut params,
                    &format!("attr_head{m}"),
                    d,
                    config.attr_dim,
                    &config.head,
                    rng,
                )
            })
            .collect();
        Ok(MmfaModel {
            config,
            params,
            stages,
            id_head,
            attr_heads,
        })
    }

    fn make_head<R: Rng + ?Sized>(
        params: &mut ParamStore<T>,
        name: &str,
        d: usize,
        out: usize,
        cfg: &HeadConfig,
        rng: &mut R,
    ) -> Head<T> {
        Head {
            gamma: params.add(Param::new(
                format!("{name}.bn.gamma"),
                Tensor::full(&[d], T::one()),
                ParamKind::BnScale,
            )),
            beta: params.add(Param::new(format!("{name}.bn.beta"), Tensor::zeros(&[d]), ParamKind::BnShift)),
            weight: params.add(Param::new(
                format!("{name}.fc.weight"),
                uniform_init(&[d, out], d, rng),
                ParamKind::Weight,
            )),
            bias: params.add(Param::new(format!("{name}.fc.bias"), Tensor::zeros(&[out]), ParamKind::Bias)),
            bn: BnState::new(d, cfg.bn_eps, cfg.bn_momentum),
            out_dim: out,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn id_head(&self) -> &Head<T> {
        &self.id_head
    }

    pub fn attr_heads(&self) -> &[Head<T>] {
        &self.attr_heads
    }

    pub fn feature_dim(&self) -> usize {
        self.config.extractor.feature_dim()
    }

    /// Every head's batch-norm state with its parameter-name prefix.
    pub fn bn_states(&self) -> Vec<(String, &BnState<T>)> {
        let mut out = vec![("id_head.bn".to_string(), &self.id_head.bn)];
        for (m, h) in self.attr_heads.iter().enumerate() {
            out.push((format!("attr_head{m}.bn"), &h.bn));
        }
        out
    }

    pub fn bn_states_mut(&mut self) -> Vec<(String, &mut BnState<T>)> {
        let mut out = vec![("id_head.bn".to_string(), &mut self.id_head.bn)];
        for (m, h) in self.attr_heads.iter_mut().enumerate() {
            out.push((format!("attr_head{m}.bn"), &mut h.bn));
        }
        out
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let (n, c, h, w) = images.dims4()?;
        let InputShape {
            height,
            width,
            channels,
        } = self.config.extractor.input;
        if (c, h, w) != (channels, height, width) {
            return Err(Error::dim(format!(
                "images are {c}×{h}×{w}, extractor expects {channels}×{height}×{width}"
            )));
        }
        if n == 0 {
            return Err(Error::Batch("empty image batch".into()));
        }
        Ok(())
    }

    /// Conv stages then global max pooling: `n×C×H×W → (maps, n×D)`.
    pub fn extract(&self, tape: &mut Tape<T>, images: Var) -> Result<(Var, Var)> {
        self.check_images(tape.value(images))?;
        let slope = lit::<T>(self.config.extractor.leaky_slope);
        let mut x = images;
        for s in &self.stages {
            let w = tape.param(&self.params, s.weight);
            let b = tape.param(&self.params, s.bias);
            let y = tape.conv2d(x, w, b, s.stride)?;
            x = tape.leaky_relu(y, slope);
        }
        let pooled = tape.global_max_pool(x)?;
        Ok((x, pooled))
    }

    /// BN → leaky ReLU → dropout → linear; returns raw logits.
    pub fn head_forward<R: Rng + ?Sized>(
        params: &ParamStore<T>,
        head: &mut Head<T>,
        cfg: &HeadConfig,
        tape: &mut Tape<T>,
        pooled: Var,
        opts: &mut PassOptions<'_, R>,
    ) -> Result<Var> {
        let d = params.get(head.weight).value.shape()[0];
        let (_, pd) = tape.value(pooled).dims2()?;
        if pd != d {
            return Err(Error::dim(format!("head expects {d} features, got {pd}")));
        }
        let gamma = tape.param(params, head.gamma);
        let beta = tape.param(params, head.beta);
        let x = tape.batch_norm(pooled, gamma, beta, &mut head.bn, opts.mode, opts.update_running)?;
        let x = tape.leaky_relu(x, lit(cfg.leaky_slope));
        let x = tape.dropout(x, cfg.dropout, opts.rng, opts.mode)?;
        let w = tape.param(params, head.weight);
        let b = tape.param(params, head.bias);
        tape.linear(x, w, b)
    }

    /// One full pass over a batch of images.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        images: Tensor<T>,
        opts: &mut PassOptions<'_, R>,
    ) -> Result<ForwardVars> {
        let input = tape.constant(images);
        let (feature_maps, pooled) = self.extract(tape, input)?;
        let cfg = self.config.head.clone();
        let id_logits = Self::head_forward(&self.params, &mut self.id_head, &cfg, tape, pooled, opts)?;
        let mut attr_logits = Vec::with_capacity(self.attr_heads.len());
        for head in &mut self.attr_heads {
            attr_logits.push(Self::head_forward(&self.params, head, &cfg, tape, pooled, opts)?);
        }
        Ok(ForwardVars {
            feature_maps,
            pooled,
            id_logits,
            attr_logits,
        })
    }

    /// Source and target passes through the shared parameters.
    ///
    /// Each pass normalizes with its own batch statistics. Only the source
    /// pass feeds the running statistics, and each pass draws dropout masks
    /// from its own generator, so the source stream never depends on the
    /// target batch.
    pub fn forward_all<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        source: Tensor<T>,
        target: Tensor<T>,
        source_opts: &mut PassOptions<'_, R>,
        target_opts: &mut PassOptions<'_, R>,
    ) -> Result<(ForwardVars, ForwardVars)> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Batch("both domains need a nonempty batch".into()));
        }
        let s = self.forward(tape, source, source_opts)?;
        let t = self.forward(tape, target, target_opts)?;
        Ok((s, t))
    }

    /// Eval-mode forward pass; consumes no randomness.
    pub fn forward_eval(&mut self, images: Tensor<T>, domain: Domain) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut opts = PassOptions {
            mode: Mode::Eval,
            rng: &mut rng,
            update_running: false,
        };
        let vars = self.forward(&mut tape, images, &mut opts)?;
        vars.materialize(&tape, domain)
    }

    /// Pooled mid-level features only, no heads: `n×C×H×W → n×D`.
    pub fn embed(&self, images: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let input = tape.constant(images);
        let (_, pooled) = self.extract(&mut tape, input)?;
        Ok(tape.value(pooled).clone())
    }

    /// Last-stage maps and pooled vector for one `C×H×W` image.
    pub fn feature_maps(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let batch = image.clone().reshape(shape)?;
        let mut tape = Tape::new();
        let input = tape.constant(batch);
        let (maps, pooled) = self.extract(&mut tape, input)?;
        let maps = tape.value(maps).index_outer(0);
        let pooled = tape.value(pooled).index_outer(0);
        Ok((maps, pooled))
    }
}
