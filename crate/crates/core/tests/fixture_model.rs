//! Behaviour of the small trained model in `tests/fixtures/tiny`.

mod common;

use semcom::autoenc::ModalityId;
use semcom::lddm::{condition_for, sample};
use semcom::metrics::image_mse;
use semcom::neural::{SeededRng, Tensor};
use semcom::pipeline::{eval_corpus, training_corpus, Receiver};
use semcom::segmap::ClassPalette;

fn receiver() -> (semcom::config::RunConfig, Receiver<f32>) {
    let cfg = common::fixture_config(std::path::Path::new("unused"));
    let rx = Receiver::load(&cfg).unwrap();
    (cfg, rx)
}

fn max_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn denoiser_depends_on_modality_and_condition() {
    let (cfg, rx) = receiver();
    let scenes = eval_corpus(&cfg).unwrap();
    let y0 = condition_for::<f32>(&scenes[0].seg).unwrap();
    let y1 = condition_for::<f32>(&scenes[1].seg).unwrap();
    let z = SeededRng::new(4).normal_tensor::<f32>(&[1, 4, 8, 8]);
    let den = &rx.ldm.denoiser;
    let (base, _) = den.forward(&z, &y0, &[25], &[ModalityId::Rgb]).unwrap();
    let (other_m, _) = den.forward(&z, &y0, &[25], &[ModalityId::Ir]).unwrap();
    let (other_y, _) = den.forward(&z, &y1, &[25], &[ModalityId::Rgb]).unwrap();
    assert!(max_abs_diff(&base, &other_m) > 1e-3);
    assert!(max_abs_diff(&base, &other_y) > 1e-3);
}

#[test]
fn autoencoders_reconstruct_held_out_scenes() {
    let (cfg, rx) = receiver();
    for scene in eval_corpus(&cfg).unwrap().iter().take(10) {
        for (m, img) in [(ModalityId::Rgb, &scene.rgb), (ModalityId::Ir, &scene.ir)] {
            let z = rx.ae.encode_image(img, m).unwrap();
            let back = rx.ae.decode_image(&z, m).unwrap();
            let err = image_mse(&back, img).unwrap();
            assert!(err < 0.01, "{m} reconstruction mse {err}");
        }
    }
}

/// Sampled latents live on the same scale as the encoder's latents of the
/// training scenes.
#[test]
fn sampled_latents_stay_in_training_envelope() {
    let (cfg, rx) = receiver();
    let scale = rx.ldm.scale();
    let train = training_corpus(&cfg).unwrap();
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for s in train.iter().take(64) {
        for (m, img) in [(ModalityId::Rgb, &s.rgb), (ModalityId::Ir, &s.ir)] {
            for &v in rx.ae.encode_image(img, m).unwrap().data() {
                lo = lo.min(v * scale);
                hi = hi.max(v * scale);
            }
        }
    }
    let (mut outside, mut total) = (0usize, 0usize);
    for (i, s) in eval_corpus(&cfg).unwrap().iter().take(8).enumerate() {
        let y = condition_for::<f32>(&s.seg).unwrap();
        for m in ModalityId::ALL {
            let z = sample(&rx.ldm.denoiser, &y, m, &rx.schedule, rx.target, 100 + i as u64).unwrap();
            assert!(z.data().iter().all(|v| v.is_finite()));
            outside += z.data().iter().filter(|&&v| v < lo || v > hi).count();
            total += z.len();
        }
    }
    assert!((outside as f64) < 0.01 * total as f64, "{outside} of {total} outside [{lo}, {hi}]");
}

#[test]
fn people_are_hot_in_reconstructed_infrared() {
    let (cfg, rx) = receiver();
    let person = ClassPalette::urban().id_of("person").unwrap();
    let (mut hot, mut n_hot, mut cold, mut n_cold) = (0.0, 0usize, 0.0, 0usize);
    for (i, s) in eval_corpus(&cfg).unwrap().iter().enumerate() {
        if !s.seg.labels().contains(&person) {
            continue;
        }
        let ir = rx.reconstruct(&s.seg, ModalityId::Ir, i as u64).unwrap();
        for (&label, &v) in s.seg.labels().iter().zip(ir.data()) {
            if label == person {
                hot += v as f64;
                n_hot += 1;
            } else if label == 0 {
                cold += v as f64;
                n_cold += 1;
            }
        }
    }
    assert!(n_hot > 0, "no people in the held-out scenes");
    let (hot, cold) = (hot / n_hot as f64, cold / n_cold as f64);
    assert!(hot > cold + 0.3, "person {hot:.3} vs background {cold:.3}");
}
