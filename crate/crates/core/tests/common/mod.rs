//! Central finite-difference checks shared by the gradient and acceptance
//! tests. Everything runs in `f64`.

#![allow(dead_code)]

use semcom::autoenc::{ae_step, contrastive_loss, AeTrainConfig, AutoencoderPair, ModalityId};
use semcom::lddm::Denoiser;
use semcom::neural::{
    add_channel_bias, add_channel_bias_backward, avg_pool2, avg_pool2_backward, concat_channels,
    mse, silu, silu_backward, split_channels, upsample2, upsample2_backward, Conv2d, Dense,
    GroupNorm, Module, SeededRng, Tensor,
};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Denominator floor so that two near-zero derivatives do not produce a
/// large ratio from rounding alone.
const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `sum(out * r)`, a scalar whose gradient with respect to `out` is `r`.
pub fn project(out: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Max relative error of `grad` against central differences of `f` at `x`.
/// `stride` > 1 checks every `stride`-th coordinate only.
pub fn check_input(
    x: &Tensor<f64>,
    grad: &Tensor<f64>,
    stride: usize,
    f: impl Fn(&Tensor<f64>) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in (0..x.len()).step_by(stride) {
        let v = x.data()[i];
        probe.data_mut()[i] = v + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = v - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = v;
        worst = worst.max(rel_err(grad.data()[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

/// Max relative error of the accumulated parameter gradients of `module`
/// against central differences of `f`. Gradients must already be populated.
pub fn check_params<M: Module<f64> + Clone>(module: &M, stride: usize, f: impl Fn(&M) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = module.clone();
    let analytic: Vec<Vec<f64>> = module.params().iter().map(|p| p.grad.data().to_vec()).collect();
    for (pi, grads) in analytic.iter().enumerate() {
        for i in (0..grads.len()).step_by(stride) {
            let v = probe.params()[pi].value.data()[i];
            probe.params_mut()[pi].value.data_mut()[i] = v + FD_STEP;
            let up = f(&probe);
            probe.params_mut()[pi].value.data_mut()[i] = v - FD_STEP;
            let down = f(&probe);
            probe.params_mut()[pi].value.data_mut()[i] = v;
            worst = worst.max(rel_err(grads[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// One named check and its worst relative error.
pub struct GradResult {
    pub name: &'static str,
    pub max_rel_err: f64,
}

fn rng_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape)
}

pub fn dense() -> GradResult {
    let mut rng = SeededRng::new(101);
    let mut layer = Dense::<f64>::new("d", 5, 4, true, &mut rng);
    let x = rng_tensor(&mut rng, &[3, 5]);
    let r = rng_tensor(&mut rng, &[3, 4]);
    layer.zero_grad();
    let gx = layer.backward(&x, &r).unwrap();
    let e_in = check_input(&x, &gx, 1, |x| project(&layer.forward(x).unwrap(), &r));
    let e_p = check_params(&layer, 1, |l| project(&l.forward(&x).unwrap(), &r));
    GradResult {
        name: "dense",
        max_rel_err: e_in.max(e_p),
    }
}

pub fn conv2d() -> GradResult {
    let mut rng = SeededRng::new(102);
    let mut layer = Conv2d::<f64>::new("c", 3, 4, &mut rng);
    let x = rng_tensor(&mut rng, &[2, 3, 5, 6]);
    let r = rng_tensor(&mut rng, &[2, 4, 5, 6]);
    layer.zero_grad();
    let gx = layer.backward(&x, &r).unwrap();
    let e_in = check_input(&x, &gx, 1, |x| project(&layer.forward(x).unwrap(), &r));
    let e_p = check_params(&layer, 1, |l| project(&l.forward(&x).unwrap(), &r));
    GradResult {
        name: "conv2d",
        max_rel_err: e_in.max(e_p),
    }
}

pub fn group_norm() -> GradResult {
    let mut rng = SeededRng::new(103);
    let mut layer = GroupNorm::<f64>::new("g", 4, 8);
    for p in layer.params_mut() {
        let n = p.value.len();
        p.value = rng_tensor(&mut rng, &[n]);
    }
    let x = rng_tensor(&mut rng, &[2, 8, 3, 3]);
    let r = rng_tensor(&mut rng, &[2, 8, 3, 3]);
    layer.zero_grad();
    let gx = layer.backward(&x, &r).unwrap();
    let e_in = check_input(&x, &gx, 1, |x| project(&layer.forward(x).unwrap(), &r));
    let e_p = check_params(&layer, 1, |l| project(&l.forward(&x).unwrap(), &r));
    GradResult {
        name: "group_norm",
        max_rel_err: e_in.max(e_p),
    }
}

pub fn silu_layer() -> GradResult {
    let mut rng = SeededRng::new(104);
    let x = rng_tensor(&mut rng, &[2, 3, 4, 4]).map(|v| 3.0 * v);
    let r = rng_tensor(&mut rng, &[2, 3, 4, 4]);
    let gx = silu_backward(&x, &r).unwrap();
    GradResult {
        name: "silu",
        max_rel_err: check_input(&x, &gx, 1, |x| project(&silu(x), &r)),
    }
}

pub fn avg_pool() -> GradResult {
    let mut rng = SeededRng::new(105);
    let x = rng_tensor(&mut rng, &[2, 3, 4, 6]);
    let r = rng_tensor(&mut rng, &[2, 3, 2, 3]);
    let gx = avg_pool2_backward(x.shape(), &r).unwrap();
    GradResult {
        name: "avg_pool2",
        max_rel_err: check_input(&x, &gx, 1, |x| project(&avg_pool2(x).unwrap(), &r)),
    }
}

pub fn upsample() -> GradResult {
    let mut rng = SeededRng::new(106);
    let x = rng_tensor(&mut rng, &[2, 3, 3, 2]);
    let r = rng_tensor(&mut rng, &[2, 3, 6, 4]);
    let gx = upsample2_backward(&r).unwrap();
    GradResult {
        name: "upsample2",
        max_rel_err: check_input(&x, &gx, 1, |x| project(&upsample2(x).unwrap(), &r)),
    }
}

pub fn concat() -> GradResult {
    let mut rng = SeededRng::new(107);
    let a = rng_tensor(&mut rng, &[2, 3, 2, 2]);
    let b = rng_tensor(&mut rng, &[2, 2, 2, 2]);
    let r = rng_tensor(&mut rng, &[2, 5, 2, 2]);
    let (ga, gb) = split_channels(&r, 3).unwrap();
    let ea = check_input(&a, &ga, 1, |a| project(&concat_channels(a, &b).unwrap(), &r));
    let eb = check_input(&b, &gb, 1, |b| project(&concat_channels(&a, b).unwrap(), &r));
    GradResult {
        name: "channel_concat",
        max_rel_err: ea.max(eb),
    }
}

pub fn channel_bias() -> GradResult {
    let mut rng = SeededRng::new(108);
    let x = rng_tensor(&mut rng, &[2, 3, 2, 2]);
    let e = rng_tensor(&mut rng, &[2, 3]);
    let r = rng_tensor(&mut rng, &[2, 3, 2, 2]);
    let ge = add_channel_bias_backward(&r).unwrap();
    let ee = check_input(&e, &ge, 1, |e| project(&add_channel_bias(&x, e).unwrap(), &r));
    let ex = check_input(&x, &r, 1, |x| project(&add_channel_bias(x, &e).unwrap(), &r));
    GradResult {
        name: "channel_bias",
        max_rel_err: ee.max(ex),
    }
}

pub fn mse_loss() -> GradResult {
    let mut rng = SeededRng::new(109);
    let p = rng_tensor(&mut rng, &[2, 3, 2, 2]);
    let t = rng_tensor(&mut rng, &[2, 3, 2, 2]);
    let (_, g) = mse(&p, &t).unwrap();
    GradResult {
        name: "mse",
        max_rel_err: check_input(&p, &g, 1, |p| mse(p, &t).unwrap().0),
    }
}

pub fn contrastive() -> GradResult {
    let mut rng = SeededRng::new(110);
    let a = rng_tensor(&mut rng, &[4, 2, 2, 2]);
    let b = rng_tensor(&mut rng, &[4, 2, 2, 2]);
    let (_, ga, gb) = contrastive_loss(&a, &b, 0.5).unwrap();
    let ea = check_input(&a, &ga, 1, |a| contrastive_loss(a, &b, 0.5).unwrap().0);
    let eb = check_input(&b, &gb, 1, |b| contrastive_loss(&a, b, 0.5).unwrap().0);
    GradResult {
        name: "contrastive_loss",
        max_rel_err: ea.max(eb),
    }
}

/// The whole first-stage objective on a tiny batch, every 11th parameter
/// coordinate of both autoencoders.
pub fn autoencoder_pair() -> GradResult {
    let mut rng = SeededRng::new(111);
    let mut pair = AutoencoderPair::<f64>::new(3);
    let x_rgb = rng_tensor(&mut rng, &[3, 3, 8, 8]).map(|v| 0.5 + 0.2 * v);
    let x_ir = rng_tensor(&mut rng, &[3, 1, 8, 8]).map(|v| 0.5 + 0.2 * v);
    let cfg = AeTrainConfig {
        temperature: 0.5,
        weight_contrastive: 0.7,
        weight_rgb: 1.3,
        weight_ir: 0.9,
        ..AeTrainConfig::default()
    };
    pair.zero_grad();
    ae_step(&mut pair, &x_rgb, &x_ir, &cfg).unwrap();
    let err = check_params(&pair, 11, |p| {
        let mut p = p.clone();
        ae_step(&mut p, &x_rgb, &x_ir, &cfg).unwrap().0
    });
    GradResult {
        name: "autoencoder_pair",
        max_rel_err: err,
    }
}

/// The denoiser with both conditioning paths, projected output.
pub fn denoiser() -> GradResult {
    let mut rng = SeededRng::new(112);
    let mut den = Denoiser::<f64>::new(3, 8, 5);
    let z = rng_tensor(&mut rng, &[2, 4, 4, 4]);
    let y = rng_tensor(&mut rng, &[2, 3, 4, 4]);
    let r = rng_tensor(&mut rng, &[2, 4, 4, 4]);
    let ts = [3, 17];
    let ms = [ModalityId::Rgb, ModalityId::Ir];
    den.zero_grad();
    let (_, cache) = den.forward(&z, &y, &ts, &ms).unwrap();
    den.backward(&cache, &r).unwrap();
    let err = check_params(&den, 1, |d| project(&d.forward(&z, &y, &ts, &ms).unwrap().0, &r));
    GradResult {
        name: "denoiser",
        max_rel_err: err,
    }
}

pub fn all_checks() -> Vec<GradResult> {
    vec![
        dense(),
        conv2d(),
        group_norm(),
        silu_layer(),
        avg_pool(),
        upsample(),
        concat(),
        channel_bias(),
        mse_loss(),
        contrastive(),
        autoencoder_pair(),
        denoiser(),
    ]
}

/// The small trained model checked in under `tests/fixtures/tiny`, with its
/// outputs redirected to `out`.
pub fn fixture_config(out: &std::path::Path) -> semcom::config::RunConfig {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny");
    let mut cfg = semcom::config::RunConfig::load(dir.join("config.txt")).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}
