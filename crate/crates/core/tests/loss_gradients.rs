//! Every loss against central finite differences on random 1×3×8×16 inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tio_core::losses::*;
use tio_core::tensor::gradcheck::check_gradients;
use tio_core::{Tensor, Var};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

fn softmax(logits: &Tensor<f64>) -> Tensor<f64> {
    let tape = tio_core::Tape::new();
    tape.constant(logits.clone()).softmax_channel().unwrap().value().as_ref().clone()
}

const IMG: [usize; 4] = [1, 3, 8, 16];
const MAP: [usize; 4] = [1, 1, 8, 16];

fn check(name: &str, inputs: &[Tensor<f64>], f: impl for<'t> Fn(&'t tio_core::Tape<f64>, &[Var<'t, f64>]) -> tio_core::Result<Var<'t, f64>>) {
    let r = check_gradients(inputs, STEP, f).unwrap();
    assert!(r.max_rel_error() < TOL, "{name}: {:?}", r.rel_errors);
}

#[test]
fn mono_losses() {
    let a = random(&IMG, 0.0, 1.0, 1);
    let b = random(&IMG, 0.0, 1.0, 2);
    let d = random(&MAP, 1.0, 20.0, 3);
    let fx = FeatureExtractor::<f64>::new(4);
    check("rec1", &[a.clone(), b.clone()], |_, v| mono_reconstruction_loss(v[0], v[1], &fx, 0.01));
    check("rec1-perceptual-only", &[a.clone(), b.clone()], |_, v| {
        Ok(mono_reconstruction_loss(v[0], v[1], &fx, 1.0)?.sub(l1_mean(v[0], v[1])?)?)
    });
    check("smoothness", &[d.clone(), a.clone()], |_, v| smoothness_loss(v[0], v[1], 2.0));
    let w = LossWeights::default();
    check("mono-total", &[a, b, d], |_, v| {
        MonoTerms {
            rec: mono_reconstruction_loss(v[0], v[1], &fx, w.beta)?,
            smo: smoothness_loss(v[2], v[1], w.gamma)?,
        }
        .total(&w)
    });
}

#[test]
fn stereo_losses() {
    let a = random(&IMG, 0.0, 1.0, 5);
    let b = random(&IMG, 0.0, 1.0, 6);
    check("ssim", &[a.clone(), b.clone()], |_, v| ssim(v[0], v[1]));
    check("rec2", &[a.clone(), b.clone()], |_, v| stereo_reconstruction_loss(v[0], v[1], 0.15));

    let teacher_d = random(&MAP, 1.0, 20.0, 7);
    let ds = random(&MAP, 1.0, 20.0, 8);
    let m_out = random(&MAP, 0.0, 1.0, 9).map(|v| if v > 0.7 { 1.0 } else { 0.0 });
    check("guidance", &[ds.clone()], |_, v| guidance_loss(&teacher_d, v[0], &m_out));

    let teacher_p = softmax(&random(&[1, 5, 8, 16], -3.0, 3.0, 10));
    let vols = [
        softmax(&random(&[1, 5, 1, 2], -3.0, 3.0, 11)),
        softmax(&random(&[1, 5, 2, 4], -3.0, 3.0, 12)),
        softmax(&random(&[1, 5, 4, 8], -3.0, 3.0, 13)),
    ];
    check("cost-volume", &vols, |_, v| cost_volume_loss(v, &teacher_p, 0.5));

    let w = LossWeights::default();
    check("stereo-total", &[a, b, ds, vols[0].clone(), vols[1].clone(), vols[2].clone()], |_, v| {
        StereoTerms {
            rec: stereo_reconstruction_loss(v[0], v[1], w.alpha)?,
            smo: smoothness_loss(v[2], v[0], w.gamma)?,
            cos: cost_volume_loss(&v[3..6], &teacher_p, 0.5)?,
            gui: guidance_loss(&teacher_d, v[2], &m_out)?,
        }
        .total(&w)
    });
}

#[test]
fn distillation_loss() {
    let ph = softmax(&random(&[1, 5, 8, 16], -3.0, 3.0, 14));
    let logits = random(&[1, 5, 8, 16], -3.0, 3.0, 15);
    check("kl-through-softmax", &[logits.clone()], |_, v| distill_loss(&ph, v[0].softmax_channel()?));
    check("kl-direct", &[softmax(&logits)], |_, v| distill_loss(&ph, v[0]));
}

#[test]
fn losses_non_negative_and_zero_on_identity() {
    let tape = tio_core::Tape::<f64>::new();
    let fx = FeatureExtractor::<f64>::new(1);
    for seed in 0..10 {
        let a = tape.constant(random(&IMG, 0.0, 1.0, 100 + seed));
        let b = tape.constant(random(&IMG, 0.0, 1.0, 200 + seed));
        for l in [
            mono_reconstruction_loss(a, b, &fx, 0.01).unwrap(),
            stereo_reconstruction_loss(a, b, 0.15).unwrap(),
            ssim(a, b).unwrap(),
        ] {
            assert!(l.value().item() >= 0.0);
        }
        assert_eq!(mono_reconstruction_loss(a, a, &fx, 0.01).unwrap().value().item(), 0.0);
        assert!(stereo_reconstruction_loss(a, a, 0.15).unwrap().value().item().abs() < 1e-12);
        let p = softmax(&random(&[1, 4, 8, 16], -2.0, 2.0, 300 + seed));
        let q = softmax(&random(&[1, 4, 8, 16], -2.0, 2.0, 400 + seed));
        assert!(distill_loss(&p, tape.constant(q.clone())).unwrap().value().item() >= 0.0);
        let m = random(&MAP, 0.0, 1.0, 500 + seed);
        let h = hybrid_volume(&p, &softmax(&random(&[1, 4, 8, 16], -2.0, 2.0, 600 + seed)), &m).unwrap();
        check_probability(&h).unwrap();
        // differences scaled below the threshold are ignored entirely
        let a_vol = tape.constant(p.zip_map(&q, |x, y| x + 0.2 * (y - x)).unwrap());
        assert_eq!(cost_volume_loss(&[a_vol], &p, 1.0).unwrap().value().item(), 0.0);
    }
}
