//! Per-modality autoencoders sharing one latent shape, trained with
//! reconstruction losses plus a cross-modal contrastive loss.
//!
//! Encoder: conv(c→16) silu pool, conv(16→32) silu pool, conv(32→4), giving a
//! `[4, H/4, W/4]` latent. Decoder: conv(4→32) silu up, conv(32→16) silu up,
//! conv(16→16) silu, conv(16→c). The raw decoder output is unbounded during
//! training; [`AutoencoderPair::decode`] clamps it to `[0, 1]`.

use std::path::Path;

use thiserror::Error;

use crate::image::Image;
use crate::neural::{
    avg_pool2, avg_pool2_backward, load_into, mse, read_weights, save_module, silu,
    silu_backward, upsample2, upsample2_backward, Adam, AdamConfig, Conv2d, Module, NeuralError,
    NamedTensor, Parameter, Scalar, SeededRng, Tensor,
};

/// Spatial downsampling factor between image and latent.
pub const LATENT_FACTOR: usize = 4;
/// Latent channels.
pub const LATENT_CHANNELS: usize = 4;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

const ENC_WIDTHS: [usize; 2] = [16, 32];
const DEC_WIDTHS: [usize; 3] = [32, 16, 16];

#[derive(Debug, Error)]
pub enum AeError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("contrastive batch mismatch: {0} RGB latents vs {1} IR latents")]
    BatchMismatch(usize, usize),
    #[error("latent {0} has zero norm")]
    ZeroNorm(usize),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },
}

pub type Result<T, E = AeError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModalityId {
    Rgb = 0,
    Ir = 1,
}

impl ModalityId {
    pub const ALL: [ModalityId; 2] = [ModalityId::Rgb, ModalityId::Ir];

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Self::Rgb),
            1 => Some(Self::Ir),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn channels(self) -> usize {
        match self {
            Self::Rgb => 3,
            Self::Ir => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Rgb => "rgb",
            Self::Ir => "ir",
        }
    }

    /// Bit in a frame's modality mask.
    pub fn mask_bit(self) -> u8 {
        1 << self.index()
    }

    /// Image file extension for this modality.
    pub fn extension(self) -> &'static str {
        match self {
            Self::Rgb => "ppm",
            Self::Ir => "pgm",
        }
    }
}

impl std::fmt::Display for ModalityId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Activations kept by the encoder for its backward pass.
pub struct EncoderCache<T> {
    x: Tensor<T>,
    a1: Tensor<T>,
    p1: Tensor<T>,
    a2: Tensor<T>,
    p2: Tensor<T>,
}

/// Activations kept by the decoder for its backward pass.
pub struct DecoderCache<T> {
    z: Tensor<T>,
    b1: Tensor<T>,
    u1: Tensor<T>,
    b2: Tensor<T>,
    u2: Tensor<T>,
    b3: Tensor<T>,
    h3: Tensor<T>,
}

/// Encoder and decoder for one modality.
#[derive(Clone, Debug)]
pub struct ModalityAutoencoder<T> {
    pub modality: ModalityId,
    enc: [Conv2d<T>; 3],
    dec: [Conv2d<T>; 4],
}

impl<T: Scalar> ModalityAutoencoder<T> {
    pub fn new(modality: ModalityId, rng: &mut SeededRng) -> Self {
        let c = modality.channels();
        let p = format!("ae.{}", modality.name());
        let enc = [
            Conv2d::new(&format!("{p}.enc1"), c, ENC_WIDTHS[0], rng),
            Conv2d::new(&format!("{p}.enc2"), ENC_WIDTHS[0], ENC_WIDTHS[1], rng),
            Conv2d::new(&format!("{p}.enc3"), ENC_WIDTHS[1], LATENT_CHANNELS, rng),
        ];
        let dec = [
            Conv2d::new(&format!("{p}.dec1"), LATENT_CHANNELS, DEC_WIDTHS[0], rng),
            Conv2d::new(&format!("{p}.dec2"), DEC_WIDTHS[0], DEC_WIDTHS[1], rng),
            Conv2d::new(&format!("{p}.dec3"), DEC_WIDTHS[1], DEC_WIDTHS[2], rng),
            Conv2d::new(&format!("{p}.dec4"), DEC_WIDTHS[2], c, rng),
        ];
        Self { modality, enc, dec }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4("encode")?;
        if c != self.modality.channels() {
            return Err(AeError::Input(format!(
                "{} encoder expects {} channels, got {c}",
                self.modality,
                self.modality.channels()
            )));
        }
        if h % LATENT_FACTOR != 0 || w % LATENT_FACTOR != 0 {
            return Err(AeError::Input(format!(
                "{w}x{h} is not divisible by {LATENT_FACTOR}"
            )));
        }
        Ok(())
    }

    pub fn encode_forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, EncoderCache<T>)> {
        self.check_input(x)?;
        let a1 = self.enc[0].forward(x)?;
        let p1 = avg_pool2(&silu(&a1))?;
        let a2 = self.enc[1].forward(&p1)?;
        let p2 = avg_pool2(&silu(&a2))?;
        let z = self.enc[2].forward(&p2)?;
        Ok((
            z,
            EncoderCache {
                x: x.clone(),
                a1,
                p1,
                a2,
                p2,
            },
        ))
    }

    /// Accumulates encoder gradients and returns the gradient of the input.
    pub fn encode_backward(&mut self, cache: &EncoderCache<T>, gz: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.enc[2].backward(&cache.p2, gz)?;
        let g = avg_pool2_backward(cache.a2.shape(), &g)?;
        let g = silu_backward(&cache.a2, &g)?;
        let g = self.enc[1].backward(&cache.p1, &g)?;
        let g = avg_pool2_backward(cache.a1.shape(), &g)?;
        let g = silu_backward(&cache.a1, &g)?;
        Ok(self.enc[0].backward(&cache.x, &g)?)
    }

    pub fn decode_forward(&self, z: &Tensor<T>) -> Result<(Tensor<T>, DecoderCache<T>)> {
        let (_, c, _, _) = z.dims4("decode")?;
        if c != LATENT_CHANNELS {
            return Err(AeError::Input(format!(
                "latent has {c} channels, expected {LATENT_CHANNELS}"
            )));
        }
        let b1 = self.dec[0].forward(z)?;
        let u1 = upsample2(&silu(&b1))?;
        let b2 = self.dec[1].forward(&u1)?;
        let u2 = upsample2(&silu(&b2))?;
        let b3 = self.dec[2].forward(&u2)?;
        let h3 = silu(&b3);
        let out = self.dec[3].forward(&h3)?;
        Ok((
            out,
            DecoderCache {
                z: z.clone(),
                b1,
                u1,
                b2,
                u2,
                b3,
                h3,
            },
        ))
    }

    /// Accumulates decoder gradients and returns the gradient of the latent.
    pub fn decode_backward(&mut self, cache: &DecoderCache<T>, gout: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.dec[3].backward(&cache.h3, gout)?;
        let g = silu_backward(&cache.b3, &g)?;
        let g = self.dec[2].backward(&cache.u2, &g)?;
        let g = upsample2_backward(&g)?;
        let g = silu_backward(&cache.b2, &g)?;
        let g = self.dec[1].backward(&cache.u1, &g)?;
        let g = upsample2_backward(&g)?;
        let g = silu_backward(&cache.b1, &g)?;
        Ok(self.dec[0].backward(&cache.z, &g)?)
    }
}

impl<T: Scalar> Module<T> for ModalityAutoencoder<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        self.enc.iter().chain(&self.dec).flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.enc
            .iter_mut()
            .chain(&mut self.dec)
            .flat_map(|l| l.params_mut())
            .collect()
    }
}

/// The two dedicated autoencoders.
#[derive(Clone, Debug)]
pub struct AutoencoderPair<T> {
    pub rgb: ModalityAutoencoder<T>,
    pub ir: ModalityAutoencoder<T>,
}

impl<T: Scalar> AutoencoderPair<T> {
    /// Each modality initializes from its own stream of `seed`, so neither
    /// network's initial weights depend on the other's.
    pub fn new(seed: u64) -> Self {
        Self {
            rgb: ModalityAutoencoder::new(ModalityId::Rgb, &mut SeededRng::stream(seed, 1)),
            ir: ModalityAutoencoder::new(ModalityId::Ir, &mut SeededRng::stream(seed, 2)),
        }
    }

    pub fn get(&self, m: ModalityId) -> &ModalityAutoencoder<T> {
        match m {
            ModalityId::Rgb => &self.rgb,
            ModalityId::Ir => &self.ir,
        }
    }

    pub fn get_mut(&mut self, m: ModalityId) -> &mut ModalityAutoencoder<T> {
        match m {
            ModalityId::Rgb => &mut self.rgb,
            ModalityId::Ir => &mut self.ir,
        }
    }

    /// Latents `[N, 4, H/4, W/4]` for a batch of modality-`m` images.
    pub fn encode(&self, x: &Tensor<T>, m: ModalityId) -> Result<Tensor<T>> {
        Ok(self.get(m).encode_forward(x)?.0)
    }

    pub fn encode_image(&self, image: &Image, m: ModalityId) -> Result<Tensor<T>> {
        self.encode(&image.to_tensor(), m)
    }

    /// Decoded images, clamped to `[0, 1]`.
    pub fn decode(&self, z: &Tensor<T>, m: ModalityId) -> Result<Tensor<T>> {
        let out = self.get(m).decode_forward(z)?.0;
        Ok(out.map(|v| v.max(T::zero()).min(T::one())))
    }

    pub fn decode_image(&self, z: &Tensor<T>, m: ModalityId) -> Result<Image> {
        Ok(Image::from_tensor(&self.decode(z, m)?, 0)?)
    }

    pub fn load_weights(&mut self, weights: &[NamedTensor]) -> Result<()> {
        load_into(self, weights)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let weights = read_weights(std::fs::File::open(path).map_err(NeuralError::from)?)?;
        let mut pair = Self::new(0);
        pair.load_weights(&weights)?;
        Ok(pair)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_module(self, path)?;
        Ok(())
    }
}

impl<T: Scalar> Module<T> for AutoencoderPair<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.rgb.params();
        v.extend(self.ir.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.rgb.params_mut();
        v.extend(self.ir.params_mut());
        v
    }
}

fn normalize_rows<T: Scalar>(z: &Tensor<T>) -> Result<(Vec<Vec<T>>, Vec<T>)> {
    let n = z.shape()[0];
    let d = z.len() / n.max(1);
    let mut units = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let row = &z.data()[i * d..(i + 1) * d];
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm <= T::zero() {
            return Err(AeError::ZeroNorm(i));
        }
        units.push(row.iter().map(|&v| v / norm).collect());
        norms.push(norm);
    }
    Ok((units, norms))
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Cosine similarity of two flattened latents.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    (dot(a, b) / (na * nb)).as_f64()
}

/// Symmetric InfoNCE over the cross-modal cosine-similarity matrix.
///
/// Returns the loss and its gradients with respect to both latent batches.
pub fn contrastive_loss<T: Scalar>(
    z_rgb: &Tensor<T>,
    z_ir: &Tensor<T>,
    temperature: f64,
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    let (n, m) = (z_rgb.shape()[0], z_ir.shape()[0]);
    if n != m || n == 0 {
        return Err(AeError::BatchMismatch(n, m));
    }
    if z_rgb.shape() != z_ir.shape() {
        return Err(NeuralError::ShapeMismatch {
            op: "contrastive_loss",
            detail: format!("{:?} vs {:?}", z_rgb.shape(), z_ir.shape()),
        }
        .into());
    }
    let (u, nu) = normalize_rows(z_rgb)?;
    let (v, nv) = normalize_rows(z_ir)?;
    let inv_t = T::lit(1.0 / temperature);
    let s: Vec<Vec<T>> = (0..n)
        .map(|i| (0..n).map(|j| dot(&u[i], &v[j]) * inv_t).collect())
        .collect();

    // Row-wise and column-wise softmax.
    let softmax = |vals: Vec<T>| -> (Vec<T>, T) {
        let mx = vals.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = vals.iter().map(|&x| (x - mx).exp()).collect();
        let z: T = e.iter().copied().sum();
        (e.iter().map(|&x| x / z).collect(), mx + z.ln())
    };
    let mut loss = T::zero();
    let mut ds = vec![vec![T::zero(); n]; n];
    let scale = T::lit(0.5 / n as f64);
    for i in 0..n {
        let (p, lse) = softmax(s[i].clone());
        loss += lse - s[i][i];
        for j in 0..n {
            ds[i][j] += scale * p[j];
        }
        ds[i][i] -= scale;
    }
    for j in 0..n {
        let (p, lse) = softmax((0..n).map(|i| s[i][j]).collect());
        loss += lse - s[j][j];
        for i in 0..n {
            ds[i][j] += scale * p[i];
        }
        ds[j][j] -= scale;
    }
    loss *= scale;

    let d = u[0].len();
    let mut gu = vec![vec![T::zero(); d]; n];
    let mut gv = vec![vec![T::zero(); d]; n];
    for i in 0..n {
        for j in 0..n {
            let k = ds[i][j] * inv_t;
            for e in 0..d {
                gu[i][e] += k * v[j][e];
                gv[j][e] += k * u[i][e];
            }
        }
    }
    // Back through the normalization: g_z = (g_u - u (u . g_u)) / |z|.
    let unnormalize = |units: &[Vec<T>], grads: &[Vec<T>], norms: &[T]| -> Vec<T> {
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let proj = dot(&units[i], &grads[i]);
            out.extend((0..d).map(|e| (grads[i][e] - units[i][e] * proj) / norms[i]));
        }
        out
    };
    let g_rgb = Tensor::new(z_rgb.shape().to_vec(), unnormalize(&u, &gu, &nu))?;
    let g_ir = Tensor::new(z_ir.shape().to_vec(), unnormalize(&v, &gv, &nv))?;
    Ok((loss, g_rgb, g_ir))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate at the last epoch as a fraction of the initial one,
    /// reached along a half cosine. 1 keeps the rate constant.
    pub final_lr_fraction: f64,
    pub temperature: f64,
    pub weight_contrastive: f64,
    pub weight_rgb: f64,
    pub weight_ir: f64,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            learning_rate: 2e-3,
            final_lr_fraction: 0.1,
            temperature: DEFAULT_TEMPERATURE,
            weight_contrastive: 1.0,
            weight_rgb: 1.0,
            weight_ir: 1.0,
            seed: 7,
        }
    }
}

/// Learning rate for `epoch` of `epochs` under a half-cosine decay.
pub fn cosine_lr(base: f64, final_fraction: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return base;
    }
    let progress = epoch as f64 / (epochs - 1) as f64;
    let k = final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    base * k
}

/// Per-epoch means over batches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AeEpochLog {
    pub total: f64,
    pub contrastive: f64,
    pub recon_rgb: f64,
    pub recon_ir: f64,
}

/// Paired images as `[1, C, H, W]` tensors.
pub struct PairedImages<T> {
    pub rgb: Vec<Tensor<T>>,
    pub ir: Vec<Tensor<T>>,
}

impl<T: Scalar> PairedImages<T> {
    pub fn from_images<'a>(pairs: impl IntoIterator<Item = (&'a Image, &'a Image)>) -> Self {
        let (rgb, ir) = pairs
            .into_iter()
            .map(|(r, i)| (r.to_tensor(), i.to_tensor()))
            .unzip();
        Self { rgb, ir }
    }

    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let r: Vec<Tensor<T>> = idx.iter().map(|&i| self.rgb[i].clone()).collect();
        let ir: Vec<Tensor<T>> = idx.iter().map(|&i| self.ir[i].clone()).collect();
        Ok((Tensor::stack(&r)?, Tensor::stack(&ir)?))
    }
}

/// Splits `0..n` into batches once per run. Only the order in which the
/// batches are visited changes between epochs, so the contrastive term sees
/// the same negatives every epoch and the epoch means are comparable.
pub fn fixed_batches(n: usize, batch_size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// One forward and backward pass over a batch. Gradients accumulate into
/// `pair`; returns `(total, contrastive, recon_rgb, recon_ir)`.
pub fn ae_step<T: Scalar>(
    pair: &mut AutoencoderPair<T>,
    x_rgb: &Tensor<T>,
    x_ir: &Tensor<T>,
    cfg: &AeTrainConfig,
) -> Result<(T, T, T, T)> {
    let (z_rgb, enc_rgb) = pair.rgb.encode_forward(x_rgb)?;
    let (z_ir, enc_ir) = pair.ir.encode_forward(x_ir)?;
    let (out_rgb, dec_rgb) = pair.rgb.decode_forward(&z_rgb)?;
    let (out_ir, dec_ir) = pair.ir.decode_forward(&z_ir)?;
    let (l_rgb, mut g_rgb) = mse(&out_rgb, x_rgb)?;
    let (l_ir, mut g_ir) = mse(&out_ir, x_ir)?;
    let (l_c, mut gz_rgb_c, mut gz_ir_c) = contrastive_loss(&z_rgb, &z_ir, cfg.temperature)?;

    let (wc, wr, wi) = (
        T::lit(cfg.weight_contrastive),
        T::lit(cfg.weight_rgb),
        T::lit(cfg.weight_ir),
    );
    let total = wc * l_c + wr * l_rgb + wi * l_ir;

    g_rgb.scale(wr);
    g_ir.scale(wi);
    gz_rgb_c.scale(wc);
    gz_ir_c.scale(wc);
    let mut gz_rgb = pair.rgb.decode_backward(&dec_rgb, &g_rgb)?;
    let mut gz_ir = pair.ir.decode_backward(&dec_ir, &g_ir)?;
    gz_rgb.add_assign(&gz_rgb_c)?;
    gz_ir.add_assign(&gz_ir_c)?;
    pair.rgb.encode_backward(&enc_rgb, &gz_rgb)?;
    pair.ir.encode_backward(&enc_ir, &gz_ir)?;
    Ok((total, l_c, l_rgb, l_ir))
}

/// First training stage. Returns the trained pair and a per-epoch log.
pub fn train_autoencoders<T: Scalar>(
    data: &PairedImages<T>,
    cfg: &AeTrainConfig,
) -> Result<(AutoencoderPair<T>, Vec<AeEpochLog>)> {
    if data.is_empty() {
        return Err(AeError::Input("empty training corpus".into()));
    }
    if cfg.batch_size == 0 {
        return Err(AeError::Input("batch size must be at least 1".into()));
    }
    let mut pair = AutoencoderPair::<T>::new(cfg.seed);
    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut shuffle_rng = SeededRng::stream(cfg.seed, 3);
    let batches = fixed_batches(data.len(), cfg.batch_size, &mut shuffle_rng);
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        adam.set_learning_rate(cosine_lr(
            cfg.learning_rate,
            cfg.final_lr_fraction,
            epoch,
            cfg.epochs,
        ));
        shuffle_rng.shuffle(&mut order);
        let mut sums = [0.0f64; 4];
        for &b in &order {
            let (x_rgb, x_ir) = data.batch(&batches[b])?;
            pair.zero_grad();
            let (total, l_c, l_rgb, l_ir) = ae_step(&mut pair, &x_rgb, &x_ir, cfg)?;
            let parts = [total, l_c, l_rgb, l_ir].map(Scalar::as_f64);
            if parts.iter().any(|v| !v.is_finite()) {
                return Err(AeError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!(
                        "total {} contrastive {} rgb {} ir {}",
                        parts[0], parts[1], parts[2], parts[3]
                    ),
                });
            }
            adam.step(&mut pair.params_mut())?;
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += p;
            }
        }
        let k = batches.len() as f64;
        log.push(AeEpochLog {
            total: sums[0] / k,
            contrastive: sums[1] / k,
            recon_rgb: sums[2] / k,
            recon_ir: sums[3] / k,
        });
    }
    Ok((pair, log))
}

/// Mean cosine similarity of paired and of mismatched cross-modal latents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub paired: f64,
    pub unpaired: f64,
}

impl Alignment {
    pub fn gap(&self) -> f64 {
        self.paired - self.unpaired
    }
}

pub fn latent_alignment<T: Scalar>(pair: &AutoencoderPair<T>, data: &PairedImages<T>) -> Result<Alignment> {
    if data.len() < 2 {
        return Err(AeError::Input("alignment needs at least two pairs".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x_rgb, x_ir) = data.batch(&idx)?;
    let z_rgb = pair.encode(&x_rgb, ModalityId::Rgb)?;
    let z_ir = pair.encode(&x_ir, ModalityId::Ir)?;
    let n = data.len();
    let d = z_rgb.len() / n;
    let row = |z: &Tensor<T>, i: usize| z.data()[i * d..(i + 1) * d].to_vec();
    let (mut paired, mut unpaired) = (0.0, 0.0);
    for i in 0..n {
        let a = row(&z_rgb, i);
        for j in 0..n {
            let c = cosine(&a, &row(&z_ir, j));
            if i == j {
                paired += c;
            } else {
                unpaired += c;
            }
        }
    }
    Ok(Alignment {
        paired: paired / n as f64,
        unpaired: unpaired / (n * (n - 1)) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let a = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let b = t(&[1, 3], &[-1.0, 0.5, 2.0]);
        let (l, _, _) = contrastive_loss(&a, &b, 0.07).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn orthonormal_pair() {
        let z = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let (l, _, _) = contrastive_loss(&z, &z, 1.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn scale_invariant() {
        let mut rng = SeededRng::new(3);
        let a = rng.normal_tensor::<f64>(&[4, 2, 2, 2]);
        let b = rng.normal_tensor::<f64>(&[4, 2, 2, 2]);
        let (l1, _, _) = contrastive_loss(&a, &b, 0.07).unwrap();
        let (l2, _, _) = contrastive_loss(&a.map(|v| 3.5 * v), &b.map(|v| 3.5 * v), 0.07).unwrap();
        assert!((l1 - l2).abs() < 1e-12 * l1.abs().max(1.0));
    }

    #[test]
    fn errors() {
        let a = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[1, 2], &[1.0, 0.0]);
        assert!(matches!(
            contrastive_loss(&a, &b, 0.07),
            Err(AeError::BatchMismatch(2, 1))
        ));
        let z = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(contrastive_loss(&a, &z, 0.07), Err(AeError::ZeroNorm(1))));
    }

    #[test]
    fn shared_latent_shape() {
        let pair = AutoencoderPair::<f32>::new(1);
        let zr = pair.encode(&Tensor::zeros(&[2, 3, 16, 12]), ModalityId::Rgb).unwrap();
        let zi = pair.encode(&Tensor::zeros(&[2, 1, 16, 12]), ModalityId::Ir).unwrap();
        assert_eq!(zr.shape(), &[2, 4, 4, 3]);
        assert_eq!(zr.shape(), zi.shape());
        assert_eq!(pair.decode(&zr, ModalityId::Rgb).unwrap().shape(), &[2, 3, 16, 12]);
        assert_eq!(pair.decode(&zr, ModalityId::Ir).unwrap().shape(), &[2, 1, 16, 12]);
    }

    #[test]
    fn encode_input_errors() {
        let pair = AutoencoderPair::<f32>::new(1);
        assert!(pair.encode(&Tensor::zeros(&[1, 1, 8, 8]), ModalityId::Rgb).is_err());
        assert!(pair.encode(&Tensor::zeros(&[1, 3, 10, 8]), ModalityId::Rgb).is_err());
    }

    #[test]
    fn decode_clamps() {
        let pair = AutoencoderPair::<f32>::new(5);
        let mut rng = SeededRng::new(9);
        let z = rng.normal_tensor::<f32>(&[1, 4, 2, 2]).map(|v| 50.0 * v);
        let out = pair.decode(&z, ModalityId::Rgb).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(1.0, 0.1, 0, 10) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 0.1, 9, 10) - 0.1).abs() < 1e-12);
        assert_eq!(cosine_lr(0.5, 0.1, 0, 1), 0.5);
    }
}
