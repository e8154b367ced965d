//! The detector networks: TgramNet temporal branch, CNN fusion of the
//! spectral and temporal grams into a single-channel feature, a reduced
//! MobileFaceNet-style projector, and the segment / frame-wise heads.

use crate::autodiff::{self as ad, kaiming_uniform, ParamStore, Scalar, Tensor};
use crate::dsp::{self, DspConfig, SpectralGram};
use crate::error::{Error, Result};
use crate::io::AccelTrace;
use crate::rng::SplitMix64;

pub const TGRAM_BLOCKS: usize = 3;
pub const FUSION_CH: usize = 16;
pub const MFN_STEM_CH: usize = 32;
pub const MFN_BLOCKS: usize = 3;
pub const MFN_OUT_CH: usize = 64;
pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-side frame lookahead induced by the time-axis 3-wide
/// convolutions: TgramNet blocks, both fusion convs, the MFN stem and
/// each depthwise conv contribute one frame per side. Pointwise convs
/// contribute none.
pub fn receptive_field_frames() -> usize {
    TGRAM_BLOCKS + 2 + 1 + MFN_BLOCKS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Segment,
    Streaming,
}

impl Head {
    pub fn as_str(&self) -> &'static str {
        match self {
            Head::Segment => "segment",
            Head::Streaming => "streaming",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub sample_rate_hz: u32,
    pub dsp: DspConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            sample_rate_hz: 250,
            dsp: DspConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Frame period in seconds.
    pub fn hop_s(&self) -> f64 {
        self.dsp.hop as f64 / self.sample_rate_hz as f64
    }

    /// Mel rows after the two height-strided MFN stages.
    pub fn projected_rows(&self) -> usize {
        self.dsp.n_mels / 4
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dsp.n_mels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "n_mels must be divisible by 4, got {}",
                self.dsp.n_mels
            )));
        }
        Ok(())
    }
}

fn mfn_block_channels(block: usize) -> (usize, usize) {
    let c_in = if block == 0 { MFN_STEM_CH } else { MFN_OUT_CH };
    (c_in, 2 * c_in)
}

fn mfn_block_stride(block: usize) -> (usize, usize) {
    if block == 0 {
        (2, 1)
    } else {
        (1, 1)
    }
}

/// Every parameter the architecture expects, in checkpoint order.
pub fn param_specs(cfg: &ModelConfig, head: Head) -> Vec<(String, Vec<usize>)> {
    let m = cfg.dsp.n_mels;
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    let mut p = |name: &str, shape: Vec<usize>| specs.push((name.to_string(), shape));

    p("tgram.stem.conv.w", vec![m, 1, cfg.dsp.n_fft]);
    p("tgram.stem.conv.b", vec![m]);
    for i in 0..TGRAM_BLOCKS {
        p(&format!("tgram.block{i}.ln.gamma"), vec![m]);
        p(&format!("tgram.block{i}.ln.beta"), vec![m]);
        p(&format!("tgram.block{i}.conv.w"), vec![m, m, 3]);
        p(&format!("tgram.block{i}.conv.b"), vec![m]);
    }
    p("fusion.conv1.w", vec![FUSION_CH, 6, 3, 3]);
    p("fusion.conv1.b", vec![FUSION_CH]);
    for stat in ["gamma", "beta", "running_mean", "running_var"] {
        p(&format!("fusion.bn1.{stat}"), vec![FUSION_CH]);
    }
    p("fusion.conv2.w", vec![1, FUSION_CH, 3, 3]);
    p("fusion.conv2.b", vec![1]);
    p("mfn.stem.conv.w", vec![MFN_STEM_CH, 1, 3, 3]);
    p("mfn.stem.conv.b", vec![MFN_STEM_CH]);
    for stat in ["gamma", "beta", "running_mean", "running_var"] {
        p(&format!("mfn.stem.bn.{stat}"), vec![MFN_STEM_CH]);
    }
    for i in 0..MFN_BLOCKS {
        let (c_in, e) = mfn_block_channels(i);
        p(&format!("mfn.block{i}.expand.w"), vec![e, c_in, 1, 1]);
        p(&format!("mfn.block{i}.expand.b"), vec![e]);
        for stat in ["gamma", "beta", "running_mean", "running_var"] {
            p(&format!("mfn.block{i}.expand_bn.{stat}"), vec![e]);
        }
        p(&format!("mfn.block{i}.dw.w"), vec![e, 1, 3, 3]);
        p(&format!("mfn.block{i}.dw.b"), vec![e]);
        p(&format!("mfn.block{i}.project.w"), vec![MFN_OUT_CH, e, 1, 1]);
        p(&format!("mfn.block{i}.project.b"), vec![MFN_OUT_CH]);
        for stat in ["gamma", "beta", "running_mean", "running_var"] {
            p(&format!("mfn.block{i}.project_bn.{stat}"), vec![MFN_OUT_CH]);
        }
    }
    match head {
        Head::Segment => {
            p("head.seg.linear.w", vec![1, MFN_OUT_CH]);
            p("head.seg.linear.b", vec![1]);
        }
        Head::Streaming => {
            p("head.stream.linear.w", vec![1, MFN_OUT_CH * cfg.projected_rows()]);
            p("head.stream.linear.b", vec![1]);
        }
    }
    specs
}

/// Fusion detector with one of the two heads attached.
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub head: Head,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model with Kaiming-uniform conv/linear weights, unit
    /// norm scales and zero biases, all drawn from `seed`.
    pub fn new(cfg: ModelConfig, head: Head, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::new(seed);
        let mut params = ParamStore::new();
        for (name, shape) in param_specs(&cfg, head) {
            let t = init_tensor(&mut rng, &name, &shape);
            params.insert(name, t)?;
        }
        Ok(Model { cfg, head, params })
    }

    /// Rebuild a model around checkpointed values, validating that the
    /// stored names and shapes match this architecture exactly.
    pub fn from_store(cfg: ModelConfig, head: Head, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(&cfg, head);
        let expected: Vec<&String> = specs.iter().map(|(n, _)| n).collect();
        let missing: Vec<String> = specs
            .iter()
            .filter(|(n, _)| store.get(n).is_err())
            .map(|(n, _)| n.clone())
            .collect();
        let extra: Vec<String> = store
            .names()
            .into_iter()
            .filter(|n| !expected.contains(&n))
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Format(format!(
                "checkpoint does not match {} architecture: missing {missing:?}, extra {extra:?}",
                head.as_str()
            )));
        }
        let mut params = ParamStore::new();
        for (name, shape) in specs {
            let src = store.get(&name)?;
            if src.shape() != shape {
                return Err(Error::Format(format!(
                    "checkpoint tensor `{name}` has shape {:?}, expected {shape:?}",
                    src.shape()
                )));
            }
            let t = if is_running_stat(&name) {
                Tensor::from_vec(shape, src.to_vec())?
            } else {
                Tensor::param(shape, src.to_vec())?
            };
            params.insert(name, t)?;
        }
        Ok(Model { cfg, head, params })
    }

    fn p(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name)
    }

    /// Log-Mel gram of the trace as a constant (3, n_mels, T) tensor.
    pub fn spectral(&self, trace: &AccelTrace) -> Result<Tensor<T>> {
        let gram = dsp::log_mel_gram(trace, &self.cfg.dsp)?;
        spectral_to_tensor(&gram)
    }

    /// TgramNet branch: per-axis learned time-domain features, weights
    /// shared across axes. Output (3, n_mels, T), framed identically to
    /// the spectral gram.
    pub fn tgram(&self, trace: &AccelTrace) -> Result<Tensor<T>> {
        if trace.len() < self.cfg.dsp.n_fft {
            return Err(Error::Data(format!(
                "trace of {} samples shorter than n_fft {}",
                trace.len(),
                self.cfg.dsp.n_fft
            )));
        }
        let m = self.cfg.dsp.n_mels;
        let mut per_axis = Vec::with_capacity(3);
        for axis in 0..3 {
            let signal: Vec<T> = trace.samples.iter().map(|s| T::from_f32(s[axis])).collect();
            let x = Tensor::from_vec(vec![1, signal.len()], signal)?;
            let mut h = ad::conv1d(
                &x,
                self.p("tgram.stem.conv.w")?,
                self.p("tgram.stem.conv.b")?,
                self.cfg.dsp.hop,
                0,
            )?;
            for i in 0..TGRAM_BLOCKS {
                h = ad::layer_norm_ch(
                    &h,
                    self.p(&format!("tgram.block{i}.ln.gamma"))?,
                    self.p(&format!("tgram.block{i}.ln.beta"))?,
                )?;
                h = ad::leaky_relu(&h, LEAKY_SLOPE);
                h = ad::conv1d(
                    &h,
                    self.p(&format!("tgram.block{i}.conv.w"))?,
                    self.p(&format!("tgram.block{i}.conv.b"))?,
                    1,
                    1,
                )?;
            }
            let frames = h.shape()[1];
            per_axis.push(ad::reshape(&h, vec![1, m, frames])?);
        }
        ad::concat0(&per_axis.iter().collect::<Vec<_>>())
    }

    /// Fusion module: (3, m, T) + (3, m, T) -> single-channel (1, m, T).
    pub fn fuse(&self, hs: &Tensor<T>, ht: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        Ok(self
            .fuse_batch(&[(hs.clone(), ht.clone())], training)?
            .pop()
            .expect("one fused output per input pair"))
    }

    /// Batched fusion: normalization statistics are shared across all
    /// items of the batch in training mode, so that the running
    /// statistics used at evaluation time describe the same
    /// distribution the network was trained on.
    pub fn fuse_batch(
        &self,
        pairs: &[(Tensor<T>, Tensor<T>)],
        training: bool,
    ) -> Result<Vec<Tensor<T>>> {
        let mut hidden = Vec::with_capacity(pairs.len());
        for (hs, ht) in pairs {
            if hs.shape() != ht.shape() {
                return Err(Error::Shape(format!(
                    "fuse: spectral {:?} vs temporal {:?}",
                    hs.shape(),
                    ht.shape()
                )));
            }
            let x = ad::concat0(&[hs, ht])?;
            hidden.push(ad::conv2d(
                &x,
                self.p("fusion.conv1.w")?,
                self.p("fusion.conv1.b")?,
                (1, 1),
                (1, 1),
                1,
            )?);
        }
        let hidden = self.bn_batch(&hidden, "fusion.bn1", training)?;
        hidden
            .iter()
            .map(|h| {
                ad::conv2d(
                    &ad::relu(h),
                    self.p("fusion.conv2.w")?,
                    self.p("fusion.conv2.b")?,
                    (1, 1),
                    (1, 1),
                    1,
                )
            })
            .collect()
    }

    /// Batch normalization over the whole mini-batch: the items are laid
    /// side by side along the trailing axes so the per-channel statistics
    /// (and the running-statistics update) cover every item jointly, then
    /// carved back apart. Evaluation mode is per item by construction
    /// (running stats only).
    fn bn_batch(&self, xs: &[Tensor<T>], prefix: &str, training: bool) -> Result<Vec<Tensor<T>>> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let rm = self.p(&format!("{prefix}.running_mean"))?;
        let rv = self.p(&format!("{prefix}.running_var"))?;
        let one = |x: &Tensor<T>| ad::batch_norm(x, gamma, beta, rm, rv, BN_MOMENTUM, training);
        if xs.len() == 1 || !training {
            return xs.iter().map(one).collect();
        }
        let cat = ad::concat_trailing(&xs.iter().collect::<Vec<_>>())?;
        let normed = one(&cat)?;
        let mut out = Vec::with_capacity(xs.len());
        let mut offset = 0;
        for x in xs {
            let m: usize = x.shape()[1..].iter().product();
            out.push(ad::slice_trailing(&normed, offset, x.shape())?);
            offset += m;
        }
        Ok(out)
    }

    /// One MFN bottleneck: expand 1x1 + bn + relu, depthwise 3x3,
    /// project 1x1 + bn, residual when shapes match. The time axis is
    /// never strided.
    pub fn mfn_block(&self, block: usize, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        Ok(self
            .mfn_block_batch(block, std::slice::from_ref(x), training)?
            .pop()
            .expect("one block output per input"))
    }

    fn mfn_block_batch(
        &self,
        block: usize,
        xs: &[Tensor<T>],
        training: bool,
    ) -> Result<Vec<Tensor<T>>> {
        let stride = mfn_block_stride(block);
        let (_, e) = mfn_block_channels(block);
        let expanded: Vec<Tensor<T>> = xs
            .iter()
            .map(|x| {
                ad::conv2d(
                    x,
                    self.p(&format!("mfn.block{block}.expand.w"))?,
                    self.p(&format!("mfn.block{block}.expand.b"))?,
                    (1, 1),
                    (0, 0),
                    1,
                )
            })
            .collect::<Result<_>>()?;
        let expanded = self.bn_batch(&expanded, &format!("mfn.block{block}.expand_bn"), training)?;
        let projected: Vec<Tensor<T>> = expanded
            .iter()
            .map(|h| {
                let h = ad::conv2d(
                    &ad::relu(h),
                    self.p(&format!("mfn.block{block}.dw.w"))?,
                    self.p(&format!("mfn.block{block}.dw.b"))?,
                    stride,
                    (1, 1),
                    e,
                )?;
                ad::conv2d(
                    &h,
                    self.p(&format!("mfn.block{block}.project.w"))?,
                    self.p(&format!("mfn.block{block}.project.b"))?,
                    (1, 1),
                    (0, 0),
                    1,
                )
            })
            .collect::<Result<_>>()?;
        let projected =
            self.bn_batch(&projected, &format!("mfn.block{block}.project_bn"), training)?;
        projected
            .into_iter()
            .zip(xs)
            .map(|(h, x)| if h.shape() == x.shape() { ad::add(&h, x) } else { Ok(h) })
            .collect()
    }

    /// MFN projector: (1, m, T) -> (64, m/4, T).
    pub fn project(&self, h: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        Ok(self
            .project_batch(std::slice::from_ref(h), training)?
            .pop()
            .expect("one projection per input"))
    }

    /// Batched MFN projector (shared normalization statistics, as in
    /// `fuse_batch`).
    pub fn project_batch(&self, hs: &[Tensor<T>], training: bool) -> Result<Vec<Tensor<T>>> {
        let stems: Vec<Tensor<T>> = hs
            .iter()
            .map(|h| {
                ad::conv2d(
                    h,
                    self.p("mfn.stem.conv.w")?,
                    self.p("mfn.stem.conv.b")?,
                    (2, 1),
                    (1, 1),
                    1,
                )
            })
            .collect::<Result<_>>()?;
        let stems = self.bn_batch(&stems, "mfn.stem.bn", training)?;
        let mut xs: Vec<Tensor<T>> = stems.iter().map(ad::relu).collect();
        for i in 0..MFN_BLOCKS {
            xs = self.mfn_block_batch(i, &xs, training)?;
        }
        Ok(xs)
    }

    /// Segment head: pooled projection -> scalar in-bed probability.
    /// The rectification before pooling matters: the projector ends in
    /// a normalization that leaves every channel zero-mean over exactly
    /// the axes the pool averages, so pooling the raw projection would
    /// collapse to a constant regardless of input.
    pub fn segment_prob(&self, hhat: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = ad::global_avg_pool(&ad::relu(hhat))?;
        let row = ad::reshape(&pooled, vec![1, MFN_OUT_CH])?;
        let z = ad::linear(&row, self.p("head.seg.linear.w")?, self.p("head.seg.linear.b")?)?;
        ad::reshape(&ad::sigmoid(&z), vec![])
    }

    /// Streaming head: per-frame probability vector of length T,
    /// weights shared across frames.
    pub fn frame_probs(&self, hhat: &Tensor<T>) -> Result<Tensor<T>> {
        let frames = ad::flatten_frames(hhat)?;
        let t = frames.shape()[0];
        let z = ad::linear(
            &frames,
            self.p("head.stream.linear.w")?,
            self.p("head.stream.linear.b")?,
        )?;
        ad::reshape(&ad::sigmoid(&z), vec![t])
    }

    /// Full Track-1 pipeline: trace -> scalar probability.
    pub fn forward_segment(&self, trace: &AccelTrace, training: bool) -> Result<Tensor<T>> {
        let hs = self.spectral(trace)?;
        let ht = self.tgram(trace)?;
        let h = self.fuse(&hs, &ht, training)?;
        let hhat = self.project(&h, training)?;
        self.segment_prob(&hhat)
    }

    /// Full Track-2 pipeline: trace -> per-frame probabilities.
    pub fn forward_streaming(&self, trace: &AccelTrace, training: bool) -> Result<Tensor<T>> {
        let hs = self.spectral(trace)?;
        let ht = self.tgram(trace)?;
        let h = self.fuse(&hs, &ht, training)?;
        let hhat = self.project(&h, training)?;
        self.frame_probs(&hhat)
    }

    fn project_traces(
        &self,
        traces: &[&AccelTrace],
        training: bool,
    ) -> Result<Vec<Tensor<T>>> {
        let pairs: Vec<(Tensor<T>, Tensor<T>)> = traces
            .iter()
            .map(|t| Ok((self.spectral(t)?, self.tgram(t)?)))
            .collect::<Result<_>>()?;
        let fused = self.fuse_batch(&pairs, training)?;
        self.project_batch(&fused, training)
    }

    /// Track-1 pipeline over a whole mini-batch; in training mode the
    /// normalization statistics are shared across the batch.
    pub fn forward_segment_batch(
        &self,
        traces: &[&AccelTrace],
        training: bool,
    ) -> Result<Vec<Tensor<T>>> {
        self.project_traces(traces, training)?
            .iter()
            .map(|hhat| self.segment_prob(hhat))
            .collect()
    }

    /// Track-2 pipeline over a whole mini-batch (see
    /// `forward_segment_batch`).
    pub fn forward_streaming_batch(
        &self,
        traces: &[&AccelTrace],
        training: bool,
    ) -> Result<Vec<Tensor<T>>> {
        self.project_traces(traces, training)?
            .iter()
            .map(|hhat| self.frame_probs(hhat))
            .collect()
    }
}

fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

fn init_tensor<T: Scalar>(rng: &mut SplitMix64, name: &str, shape: &[usize]) -> Tensor<T> {
    if name.ends_with(".gamma") || name.ends_with(".running_var") {
        let ones = vec![T::one(); shape.iter().product()];
        if name.ends_with(".running_var") {
            Tensor::from_vec(shape.to_vec(), ones).unwrap()
        } else {
            Tensor::param(shape.to_vec(), ones).unwrap()
        }
    } else if name.ends_with(".beta") || name.ends_with(".b") {
        Tensor::param(shape.to_vec(), vec![T::zero(); shape.iter().product()]).unwrap()
    } else if name.ends_with(".running_mean") {
        Tensor::from_vec(shape.to_vec(), vec![T::zero(); shape.iter().product()]).unwrap()
    } else {
        // conv / linear weight: fan_in = product of all but the leading
        // output-channel dimension
        let fan_in: usize = shape[1..].iter().product();
        kaiming_uniform(rng, shape.to_vec(), fan_in)
    }
}

/// Narrow a spectral gram into a constant model input tensor.
pub fn spectral_to_tensor<T: Scalar>(gram: &SpectralGram) -> Result<Tensor<T>> {
    Tensor::from_vec(
        gram.shape().to_vec(),
        gram.data.iter().map(|v| T::from_f64(*v)).collect(),
    )
}
