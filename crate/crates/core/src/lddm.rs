//! Latent diffusion conditioned on a downsampled one-hot map and a modality.
//!
//! The denoiser sees `[z_t ‖ y]` and, after its first convolution, a
//! per-channel offset built from a sinusoidal timestep embedding and a
//! learned two-row modality embedding:
//!
//! ```text
//! a0  = silu(conv_in([z_t ‖ y]) + time(t) + modality(m))
//! a1  = silu(gn1(conv1(a0)))
//! a2  = silu(gn2(conv2(a1)))
//! out = conv_out(a2 + a0)
//! ```
//!
//! By default the output is a prediction of the clean latent; noise
//! prediction is available through [`Target::Noise`].

use std::path::Path;

use thiserror::Error;

use crate::autoenc::{AeError, AutoencoderPair, ModalityId, LATENT_CHANNELS, LATENT_FACTOR};
use crate::image::Image;
use crate::neural::{
    add_channel_bias, add_channel_bias_backward, concat_channels, load_into, mse, read_weights,
    save_module, silu, silu_backward, Adam, AdamConfig, Conv2d, Dense, GroupNorm, Module,
    NeuralError, NamedTensor, Parameter, Scalar, SeededRng, Tensor,
};
use crate::segmap::{downsample_onehot, one_hot_encode, SegMap};

pub const TIME_EMBED_DIM: usize = 16;
pub const DEFAULT_HIDDEN: usize = 32;
pub const NORM_GROUPS: usize = 4;

#[derive(Debug, Error)]
pub enum LdmError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Autoencoder(#[from] AeError),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("timestep {t} outside 1..={max}")]
    Timestep { t: usize, max: usize },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },
}

pub type Result<T, E = LdmError> = std::result::Result<T, E>;

/// Linear beta schedule with derived cumulative products, in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(LdmError::Schedule("at least one timestep is required".into()));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(LdmError::Schedule(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(LdmError::Timestep {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    /// `ᾱ_t` for `t` in `1..=T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// Coefficients `(c0, ct, variance)` of the posterior `q(z_{t-1} | z_t, z0)`
    /// with mean `c0 * z0 + ct * z_t`. At `t = 1` the mean is `z0` exactly.
    pub fn posterior(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check(t)?;
        if t == 1 {
            return Ok((1.0, 0.0, 0.0));
        }
        let ab = self.alpha_bars[t - 1];
        let ab_prev = self.alpha_bars[t - 2];
        let beta = self.betas[t - 1];
        Ok((
            ab_prev.sqrt() * beta / (1.0 - ab),
            (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
            beta * (1.0 - ab_prev) / (1.0 - ab),
        ))
    }
}

/// Forward noising with an explicit `ᾱ`: `√ᾱ · z0 + √(1 − ᾱ) · noise`.
pub fn q_sample_with<T: Scalar>(z0: &Tensor<T>, alpha_bar: f64, noise: &Tensor<T>) -> Result<Tensor<T>> {
    z0.same_shape(noise, "q_sample")?;
    let (a, b) = (T::lit(alpha_bar.sqrt()), T::lit((1.0 - alpha_bar).sqrt()));
    let data = z0.data().iter().zip(noise.data()).map(|(&z, &e)| a * z + b * e).collect();
    Ok(Tensor::new(z0.shape().to_vec(), data)?)
}

pub fn q_sample<T: Scalar>(z0: &Tensor<T>, t: usize, noise: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    q_sample_with(z0, sched.alpha_bar(t)?, noise)
}

/// What the denoiser output is regressed against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    CleanLatent,
    Noise,
}

impl Target {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "z0" => Some(Self::CleanLatent),
            "eps" => Some(Self::Noise),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::CleanLatent => "z0",
            Self::Noise => "eps",
        }
    }
}

/// Sinusoidal embedding of integer timesteps, `[N, TIME_EMBED_DIM]`.
pub fn time_embedding<T: Scalar>(ts: &[usize]) -> Tensor<T> {
    let half = TIME_EMBED_DIM / 2;
    let mut out = Vec::with_capacity(ts.len() * TIME_EMBED_DIM);
    for &t in ts {
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            out.push(T::lit((t as f64 * freq).sin()));
        }
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            out.push(T::lit((t as f64 * freq).cos()));
        }
    }
    Tensor::new(vec![ts.len(), TIME_EMBED_DIM], out).expect("sized")
}

fn modality_onehot<T: Scalar>(ms: &[ModalityId]) -> Tensor<T> {
    let mut out = vec![T::zero(); ms.len() * 2];
    for (i, m) in ms.iter().enumerate() {
        out[i * 2 + m.index()] = T::one();
    }
    Tensor::new(vec![ms.len(), 2], out).expect("sized")
}

/// Anything that maps `(z_t, y, t, m)` to a latent-shaped prediction.
pub trait LatentPredictor<T: Scalar> {
    fn predict(&self, z_t: &Tensor<T>, y: &Tensor<T>, ts: &[usize], ms: &[ModalityId]) -> Result<Tensor<T>>;
}

pub struct DenoiserCache<T> {
    x: Tensor<T>,
    temb: Tensor<T>,
    monehot: Tensor<T>,
    h0: Tensor<T>,
    a0: Tensor<T>,
    h1: Tensor<T>,
    n1: Tensor<T>,
    a1: Tensor<T>,
    h2: Tensor<T>,
    n2: Tensor<T>,
    r: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Denoiser<T> {
    num_classes: usize,
    /// When false, the modality embedding is not added (its parameter is
    /// kept so weight files stay interchangeable).
    pub condition_on_modality: bool,
    conv_in: Conv2d<T>,
    time: Dense<T>,
    modality: Dense<T>,
    conv1: Conv2d<T>,
    gn1: GroupNorm<T>,
    conv2: Conv2d<T>,
    gn2: GroupNorm<T>,
    conv_out: Conv2d<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(num_classes: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = SeededRng::stream(seed, 4);
        Self {
            num_classes,
            condition_on_modality: true,
            conv_in: Conv2d::new("ldm.conv_in", LATENT_CHANNELS + num_classes, hidden, &mut rng),
            time: Dense::new("ldm.time", TIME_EMBED_DIM, hidden, true, &mut rng),
            modality: Dense::new("ldm.modality", 2, hidden, false, &mut rng),
            conv1: Conv2d::new("ldm.conv1", hidden, hidden, &mut rng),
            gn1: GroupNorm::new("ldm.gn1", NORM_GROUPS, hidden),
            conv2: Conv2d::new("ldm.conv2", hidden, hidden, &mut rng),
            gn2: GroupNorm::new("ldm.gn2", NORM_GROUPS, hidden),
            conv_out: Conv2d::new("ldm.conv_out", hidden, LATENT_CHANNELS, &mut rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn hidden(&self) -> usize {
        self.conv_in.outputs()
    }

    pub fn forward(
        &self,
        z_t: &Tensor<T>,
        y: &Tensor<T>,
        ts: &[usize],
        ms: &[ModalityId],
    ) -> Result<(Tensor<T>, DenoiserCache<T>)> {
        let (n, c, h, w) = z_t.dims4("denoiser")?;
        if c != LATENT_CHANNELS || y.shape() != [n, self.num_classes, h, w] {
            return Err(LdmError::Input(format!(
                "latent {:?} and condition {:?} do not fit a denoiser for {} classes",
                z_t.shape(),
                y.shape(),
                self.num_classes
            )));
        }
        if ts.len() != n || ms.len() != n {
            return Err(LdmError::Input(format!(
                "{n} latents but {} timesteps and {} modalities",
                ts.len(),
                ms.len()
            )));
        }
        let x = concat_channels(z_t, y)?;
        let temb = time_embedding(ts);
        let monehot = modality_onehot(ms);
        let mut e = self.time.forward(&temb)?;
        if self.condition_on_modality {
            e.add_assign(&self.modality.forward(&monehot)?)?;
        }
        let h0 = add_channel_bias(&self.conv_in.forward(&x)?, &e)?;
        let a0 = silu(&h0);
        let h1 = self.conv1.forward(&a0)?;
        let n1 = self.gn1.forward(&h1)?;
        let a1 = silu(&n1);
        let h2 = self.conv2.forward(&a1)?;
        let n2 = self.gn2.forward(&h2)?;
        let mut r = silu(&n2);
        r.add_assign(&a0)?;
        let out = self.conv_out.forward(&r)?;
        Ok((
            out,
            DenoiserCache {
                x,
                temb,
                monehot,
                h0,
                a0,
                h1,
                n1,
                a1,
                h2,
                n2,
                r,
            },
        ))
    }

    /// Accumulates parameter gradients for an output gradient.
    pub fn backward(&mut self, cache: &DenoiserCache<T>, gout: &Tensor<T>) -> Result<()> {
        let g_r = self.conv_out.backward(&cache.r, gout)?;
        let g = silu_backward(&cache.n2, &g_r)?;
        let g = self.gn2.backward(&cache.h2, &g)?;
        let g = self.conv2.backward(&cache.a1, &g)?;
        let g = silu_backward(&cache.n1, &g)?;
        let g = self.gn1.backward(&cache.h1, &g)?;
        let mut g_a0 = self.conv1.backward(&cache.a0, &g)?;
        g_a0.add_assign(&g_r)?;
        let g_h0 = silu_backward(&cache.h0, &g_a0)?;
        let g_e = add_channel_bias_backward(&g_h0)?;
        self.time.backward(&cache.temb, &g_e)?;
        if self.condition_on_modality {
            self.modality.backward(&cache.monehot, &g_e)?;
        }
        self.conv_in.backward(&cache.x, &g_h0)?;
        Ok(())
    }
}

impl<T: Scalar> LatentPredictor<T> for Denoiser<T> {
    fn predict(&self, z_t: &Tensor<T>, y: &Tensor<T>, ts: &[usize], ms: &[ModalityId]) -> Result<Tensor<T>> {
        Ok(self.forward(z_t, y, ts, ms)?.0)
    }
}

impl<T: Scalar> Module<T> for Denoiser<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.conv_in.params();
        v.extend(self.time.params());
        v.extend(self.modality.params());
        v.extend(self.conv1.params());
        v.extend(self.gn1.params());
        v.extend(self.conv2.params());
        v.extend(self.gn2.params());
        v.extend(self.conv_out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.conv_in.params_mut();
        v.extend(self.time.params_mut());
        v.extend(self.modality.params_mut());
        v.extend(self.conv1.params_mut());
        v.extend(self.gn1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.gn2.params_mut());
        v.extend(self.conv_out.params_mut());
        v
    }
}

/// Denoiser plus the scalar that maps encoder latents to roughly unit
/// variance before diffusion (stored as `ldm.latent_scale`).
#[derive(Clone, Debug)]
pub struct LatentDiffusion<T> {
    pub denoiser: Denoiser<T>,
    pub latent_scale: Parameter<T>,
}

impl<T: Scalar> LatentDiffusion<T> {
    pub fn new(denoiser: Denoiser<T>, latent_scale: f64) -> Self {
        Self {
            denoiser,
            latent_scale: Parameter::new("ldm.latent_scale", Tensor::full(&[1], T::lit(latent_scale))),
        }
    }

    pub fn scale(&self) -> T {
        self.latent_scale.value.data()[0]
    }

    /// Loads weights; the class count and width come from the file.
    pub fn from_weights(weights: &[NamedTensor]) -> Result<Self> {
        let conv_in = weights
            .iter()
            .find(|w| w.name == "ldm.conv_in.weight")
            .ok_or_else(|| NeuralError::MissingParameter("ldm.conv_in.weight".into()))?;
        let shape = conv_in.tensor.shape();
        if shape.len() != 4 || shape[1] <= LATENT_CHANNELS {
            return Err(NeuralError::BadWeights(format!("ldm.conv_in.weight has shape {shape:?}")).into());
        }
        let mut model = Self::new(Denoiser::new(shape[1] - LATENT_CHANNELS, shape[0], 0), 1.0);
        load_into(&mut model, weights)?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let weights = read_weights(std::fs::File::open(path).map_err(NeuralError::from)?)?;
        Self::from_weights(&weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_module(self, path)?;
        Ok(())
    }
}

impl<T: Scalar> Module<T> for LatentDiffusion<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.denoiser.params();
        v.push(&self.latent_scale);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.denoiser.params_mut();
        v.push(&mut self.latent_scale);
        v
    }
}

/// Condition tensor `[1, C, H/4, W/4]` for a segmentation map.
pub fn condition_for<T: Scalar>(seg: &SegMap) -> Result<Tensor<T>> {
    let down = downsample_onehot(&one_hot_encode(seg), LATENT_FACTOR)
        .map_err(|e| LdmError::Input(e.to_string()))?;
    let c = down.num_classes() as usize;
    Ok(Tensor::from_f32(&[1, c, down.height(), down.width()], &down.to_planes())?)
}

/// The two terms of the second-stage loss for one batch, each a mean over
/// the batch. Both modalities share each scene's timestep and noise draw.
pub struct LdmBatch<'a, T> {
    pub z_rgb: &'a Tensor<T>,
    pub z_ir: &'a Tensor<T>,
    pub y: &'a Tensor<T>,
    pub ts: &'a [usize],
    pub noise: &'a Tensor<T>,
}

/// Noised inputs and regression targets for modality `m`.
pub fn ldm_inputs<T: Scalar>(
    batch: &LdmBatch<'_, T>,
    m: ModalityId,
    sched: &NoiseSchedule,
    target: Target,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let z0 = match m {
        ModalityId::Rgb => batch.z_rgb,
        ModalityId::Ir => batch.z_ir,
    };
    let n = z0.shape()[0];
    if batch.ts.len() != n {
        return Err(LdmError::Input(format!("{n} latents, {} timesteps", batch.ts.len())));
    }
    z0.same_shape(batch.noise, "ldm batch")?;
    let per = z0.len() / n;
    let mut z_t = Vec::with_capacity(z0.len());
    for (i, &t) in batch.ts.iter().enumerate() {
        let a = T::lit(sched.alpha_bar(t)?.sqrt());
        let b = T::lit((1.0 - sched.alpha_bar(t)?).sqrt());
        let zs = &z0.data()[i * per..(i + 1) * per];
        let es = &batch.noise.data()[i * per..(i + 1) * per];
        z_t.extend(zs.iter().zip(es).map(|(&z, &e)| a * z + b * e));
    }
    let z_t = Tensor::new(z0.shape().to_vec(), z_t)?;
    let tgt = match target {
        Target::CleanLatent => z0.clone(),
        Target::Noise => batch.noise.clone(),
    };
    Ok((z_t, tgt))
}

/// `(rgb term, ir term)`; the loss is their sum.
pub fn ldm_loss_terms<T: Scalar, P: LatentPredictor<T>>(
    model: &P,
    batch: &LdmBatch<'_, T>,
    sched: &NoiseSchedule,
    target: Target,
) -> Result<(T, T)> {
    let mut terms = [T::zero(); 2];
    for m in ModalityId::ALL {
        let (z_t, tgt) = ldm_inputs(batch, m, sched, target)?;
        let ms = vec![m; batch.ts.len()];
        let pred = model.predict(&z_t, batch.y, batch.ts, &ms)?;
        terms[m.index()] = mse(&pred, &tgt)?.0;
    }
    Ok((terms[0], terms[1]))
}

/// Forward and backward over one batch; gradients accumulate into `den`.
pub fn ldm_step<T: Scalar>(
    den: &mut Denoiser<T>,
    batch: &LdmBatch<'_, T>,
    sched: &NoiseSchedule,
    target: Target,
) -> Result<(T, T)> {
    let mut terms = [T::zero(); 2];
    for m in ModalityId::ALL {
        let (z_t, tgt) = ldm_inputs(batch, m, sched, target)?;
        let ms = vec![m; batch.ts.len()];
        let (pred, cache) = den.forward(&z_t, batch.y, batch.ts, &ms)?;
        let (l, g) = mse(&pred, &tgt)?;
        den.backward(&cache, &g)?;
        terms[m.index()] = l;
    }
    Ok((terms[0], terms[1]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LdmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub final_lr_fraction: f64,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: usize,
    pub target: Target,
    pub condition_on_modality: bool,
    /// Decay of the moving average of the weights that is monitored and
    /// returned. 0 returns the raw weights.
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for LdmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-3,
            final_lr_fraction: 0.1,
            timesteps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            hidden: DEFAULT_HIDDEN,
            target: Target::CleanLatent,
            condition_on_modality: true,
            ema_decay: 0.99,
            seed: 11,
        }
    }
}

impl LdmTrainConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// One epoch of second-stage training.
///
/// `total`, `rgb` and `ir` evaluate the loss over the whole training corpus
/// after the epoch, with one set of timestep and noise draws fixed for the
/// run, so successive epochs are compared on identical draws. `train` is the
/// running mean of the minibatch losses seen during the epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LdmEpochLog {
    pub total: f64,
    pub rgb: f64,
    pub ir: f64,
    pub train: f64,
}

/// Encoded, unscaled latents and conditions for the training corpus, each
/// item `[1, ...]`.
pub struct LatentCorpus<T> {
    pub z_rgb: Vec<Tensor<T>>,
    pub z_ir: Vec<Tensor<T>>,
    pub y: Vec<Tensor<T>>,
}

impl<T: Scalar> LatentCorpus<T> {
    pub fn encode<'a>(
        ae: &AutoencoderPair<T>,
        scenes: impl IntoIterator<Item = (&'a SegMap, &'a Image, &'a Image)>,
    ) -> Result<Self> {
        let (mut z_rgb, mut z_ir, mut y) = (Vec::new(), Vec::new(), Vec::new());
        for (seg, rgb, ir) in scenes {
            z_rgb.push(ae.encode_image(rgb, ModalityId::Rgb)?);
            z_ir.push(ae.encode_image(ir, ModalityId::Ir)?);
            y.push(condition_for(seg)?);
        }
        Ok(Self { z_rgb, z_ir, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Reciprocal of the standard deviation over every latent element of
    /// both modalities.
    pub fn unit_scale(&self) -> f64 {
        let vals = self
            .z_rgb
            .iter()
            .chain(&self.z_ir)
            .flat_map(|z| z.data().iter().map(|v| v.as_f64()));
        let (mut n, mut s, mut s2) = (0.0, 0.0, 0.0);
        for v in vals {
            n += 1.0;
            s += v;
            s2 += v * v;
        }
        let var = s2 / n - (s / n) * (s / n);
        if var > 0.0 {
            1.0 / var.sqrt()
        } else {
            1.0
        }
    }
}

/// Timesteps for one epoch: scene at position `k` of the shuffled order gets
/// stratum `k` of `T` equal slices of the corpus, offset by a random shift.
/// Every timestep stays equally likely for every scene, and each epoch
/// covers the schedule evenly.
fn stratified_timesteps(n: usize, steps: usize, rng: &mut SeededRng) -> Vec<usize> {
    let shift = rng.below(steps);
    (0..n).map(|k| (k * steps / n + shift) % steps + 1).collect()
}

/// Second training stage on precomputed latents.
pub fn train_ldm<T: Scalar>(
    corpus: &LatentCorpus<T>,
    cfg: &LdmTrainConfig,
) -> Result<(LatentDiffusion<T>, Vec<LdmEpochLog>)> {
    if corpus.is_empty() {
        return Err(LdmError::Input("empty training corpus".into()));
    }
    if cfg.batch_size == 0 {
        return Err(LdmError::Input("batch size must be at least 1".into()));
    }
    let sched = cfg.schedule()?;
    let num_classes = corpus.y[0].shape()[1];
    let scale = corpus.unit_scale();
    let k = T::lit(scale);
    let z_rgb: Vec<Tensor<T>> = corpus.z_rgb.iter().map(|z| z.map(|v| v * k)).collect();
    let z_ir: Vec<Tensor<T>> = corpus.z_ir.iter().map(|z| z.map(|v| v * k)).collect();

    let mut den = Denoiser::<T>::new(num_classes, cfg.hidden, cfg.seed);
    den.condition_on_modality = cfg.condition_on_modality;
    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut rng = SeededRng::stream(cfg.seed, 5);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let latent_shape = corpus.z_rgb[0].shape()[1..].to_vec();
    let batch_shape = |n: usize| {
        let mut shape = vec![n];
        shape.extend(&latent_shape);
        shape
    };
    let stack = |v: &[Tensor<T>], idx: &[usize]| {
        Tensor::stack(&idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>())
    };

    let mut monitor_rng = SeededRng::stream(cfg.seed, 6);
    let monitor_ts = stratified_timesteps(corpus.len(), sched.steps(), &mut monitor_rng);
    let monitor_noise: Vec<Tensor<T>> = (0..corpus.len())
        .map(|_| monitor_rng.normal_tensor(&batch_shape(1)))
        .collect();
    let evaluate = |den: &Denoiser<T>| -> Result<(f64, f64)> {
        let all: Vec<usize> = (0..corpus.len()).collect();
        let (mut s0, mut s1) = (0.0, 0.0);
        for chunk in all.chunks(64) {
            let (zr, zi, y) = (stack(&z_rgb, chunk)?, stack(&z_ir, chunk)?, stack(&corpus.y, chunk)?);
            let noise = stack(&monitor_noise, chunk)?;
            let ts: Vec<usize> = chunk.iter().map(|&i| monitor_ts[i]).collect();
            let batch = LdmBatch {
                z_rgb: &zr,
                z_ir: &zi,
                y: &y,
                ts: &ts,
                noise: &noise,
            };
            let (l0, l1) = ldm_loss_terms(den, &batch, &sched, cfg.target)?;
            s0 += l0.as_f64() * chunk.len() as f64;
            s1 += l1.as_f64() * chunk.len() as f64;
        }
        let n = corpus.len() as f64;
        Ok((s0 / n, s1 / n))
    };
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut ema = den.clone();
    let mut updates = 0u64;

    for epoch in 0..cfg.epochs {
        adam.set_learning_rate(crate::autoenc::cosine_lr(
            cfg.learning_rate,
            cfg.final_lr_fraction,
            epoch,
            cfg.epochs,
        ));
        rng.shuffle(&mut order);
        let ts_all = stratified_timesteps(order.len(), sched.steps(), &mut rng);
        let (mut train, mut batches) = (0.0, 0);
        for (chunk, ts) in order.chunks(cfg.batch_size).zip(ts_all.chunks(cfg.batch_size)) {
            let (zr, zi, y) = (stack(&z_rgb, chunk)?, stack(&z_ir, chunk)?, stack(&corpus.y, chunk)?);
            let noise = rng.normal_tensor::<T>(&batch_shape(chunk.len()));
            let batch = LdmBatch {
                z_rgb: &zr,
                z_ir: &zi,
                y: &y,
                ts,
                noise: &noise,
            };
            den.zero_grad();
            let (l0, l1) = ldm_step(&mut den, &batch, &sched, cfg.target)?;
            let (l0, l1) = (l0.as_f64(), l1.as_f64());
            if !(l0.is_finite() && l1.is_finite()) {
                return Err(LdmError::NonFiniteLoss {
                    epoch,
                    detail: format!("rgb term {l0}, ir term {l1}"),
                });
            }
            adam.step(&mut den.params_mut())?;
            updates += 1;
            ema_update(&mut ema, &den, cfg.ema_decay, updates);
            train += l0 + l1;
            batches += 1;
        }
        let (rgb, ir) = evaluate(&ema)?;
        log.push(LdmEpochLog {
            total: rgb + ir,
            rgb,
            ir,
            train: train / batches as f64,
        });
    }
    Ok((LatentDiffusion::new(ema, scale), log))
}

/// `ema <- d * ema + (1 - d) * current`, with the decay ramped up over the
/// first updates so the average is not dominated by the initialization.
fn ema_update<T: Scalar>(ema: &mut Denoiser<T>, current: &Denoiser<T>, decay: f64, updates: u64) {
    let d = decay.min((1 + updates) as f64 / (10 + updates) as f64);
    let (a, b) = (T::lit(d), T::lit(1.0 - d));
    for (e, c) in ema.params_mut().into_iter().zip(current.params()) {
        for (ev, &cv) in e.value.data_mut().iter_mut().zip(c.value.data()) {
            *ev = a * *ev + b * cv;
        }
    }
}

/// Reverse process from seeded standard-normal noise, in the scaled latent
/// space. Each step turns the prediction into a clean-latent estimate and
/// moves to the posterior mean, adding posterior noise except at `t = 1`.
pub fn sample<T: Scalar, P: LatentPredictor<T>>(
    model: &P,
    y: &Tensor<T>,
    m: ModalityId,
    sched: &NoiseSchedule,
    target: Target,
    seed: u64,
) -> Result<Tensor<T>> {
    let (n, _, h, w) = y.dims4("sample")?;
    let mut rng = SeededRng::new(seed);
    let mut z = rng.normal_tensor::<T>(&[n, LATENT_CHANNELS, h, w]);
    let ms = vec![m; n];
    for t in (1..=sched.steps()).rev() {
        let ts = vec![t; n];
        let pred = model.predict(&z, y, &ts, &ms)?;
        let z0 = match target {
            Target::CleanLatent => pred,
            Target::Noise => {
                let ab = sched.alpha_bar(t)?;
                let (a, b) = (T::lit(1.0 / ab.sqrt()), T::lit((1.0 - ab).sqrt()));
                let data = z.data().iter().zip(pred.data()).map(|(&zt, &e)| a * (zt - b * e)).collect();
                Tensor::new(z.shape().to_vec(), data)?
            }
        };
        let (c0, ct, var) = sched.posterior(t)?;
        let (c0, ct) = (T::lit(c0), T::lit(ct));
        let mut next: Vec<T> = z0.data().iter().zip(z.data()).map(|(&a, &b)| c0 * a + ct * b).collect();
        if t > 1 {
            let sd = var.sqrt();
            for v in &mut next {
                *v += T::lit(sd * rng.normal());
            }
        }
        z = Tensor::new(z.shape().to_vec(), next)?;
    }
    Ok(z)
}

/// Generates a modality-`m` image for a segmentation map.
pub fn reconstruct<T: Scalar>(
    seg: &SegMap,
    m: ModalityId,
    ae: &AutoencoderPair<T>,
    ldm: &LatentDiffusion<T>,
    sched: &NoiseSchedule,
    target: Target,
    seed: u64,
) -> Result<Image> {
    let y = condition_for::<T>(seg)?;
    if y.shape()[1] != ldm.denoiser.num_classes() {
        return Err(LdmError::Input(format!(
            "map has {} classes, denoiser was trained for {}",
            y.shape()[1],
            ldm.denoiser.num_classes()
        )));
    }
    let z = sample(&ldm.denoiser, &y, m, sched, target, seed)?;
    let inv = T::one() / ldm.scale();
    Ok(ae.decode_image(&z.map(|v| v * inv), m)?)
}
