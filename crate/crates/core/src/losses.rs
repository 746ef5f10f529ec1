//! Training objectives for the three steps and their building blocks.
//!
//! Teacher quantities (`P_a`, `d_a`, `P_h`) enter as plain tensors and are placed on the tape as
//! constants, so gradients stop there by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{Tensor, Var};
use crate::Scalar;

/// Loss weights and thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub t1: f64,
    pub t2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.0008,
            lambda2: 0.008,
            lambda3: 0.01,
            lambda4: 0.01,
            alpha: 0.15,
            beta: 0.01,
            gamma: 2.0,
            t1: 1.0,
            t2: 0.13,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.alpha, self.beta, self.gamma,
            self.t1, self.t2,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.alpha > 1.0 {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.t2 <= 0.0 {
            return Err(Error::Config("t2 must be positive".into()));
        }
        Ok(())
    }
}

/// Fixed pyramid of random convolutions standing in for pretrained perceptual features.
///
/// Each stage is a stride-2 3×3 convolution followed by ELU, giving features at strides 2, 4, 8.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<T> {
    weights: Vec<Tensor<T>>,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub const WIDTHS: [usize; 3] = [8, 16, 16];

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let weights = Self::WIDTHS
            .iter()
            .map(|&cout| {
                let bound = (6.0 / (cin * 9) as f64).sqrt();
                let w = Tensor::from_fn(vec![cout, cin, 3, 3], |_| T::lit(rng.gen_range(-bound..bound)));
                cin = cout;
                w
            })
            .collect();
        Self { weights }
    }

    pub fn weights(&self) -> &[Tensor<T>] {
        &self.weights
    }

    /// `φ_1..φ_3` of an image batch.
    pub fn features<'t>(&self, img: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let tape = img.tape();
        let mut x = img;
        let mut out = Vec::with_capacity(self.weights.len());
        for w in &self.weights {
            x = x.conv2d(tape.constant(w.clone()), 2, 1)?.elu();
            out.push(x);
        }
        Ok(out)
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::ShapeMismatch { op, lhs: sa, rhs: sb });
    }
    Ok(())
}

pub fn l1_mean<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape("l1", &a, &b)?;
    a.sub(b)?.abs().mean()
}

/// Per-pixel `(1 - SSIM)/2` on 3×3 mean-pooled statistics, clamped to `[0, 1]`.
pub fn ssim_map<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape("ssim", &a, &b)?;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let mu_a = a.avgpool3x3()?;
    let mu_b = b.avgpool3x3()?;
    let mu_aa = mu_a.square();
    let mu_bb = mu_b.square();
    let mu_ab = mu_a.mul(mu_b)?;
    let s_aa = a.square().avgpool3x3()?.sub(mu_aa)?;
    let s_bb = b.square().avgpool3x3()?.sub(mu_bb)?;
    let s_ab = a.mul(b)?.avgpool3x3()?.sub(mu_ab)?;
    let num = mu_ab.mul_scalar(2.0).add_scalar(C1).mul(s_ab.mul_scalar(2.0).add_scalar(C2))?;
    let den = mu_aa.add(mu_bb)?.add_scalar(C1).mul(s_aa.add(s_bb)?.add_scalar(C2))?;
    Ok(num.div(den)?.one_minus().mul_scalar(0.5).clamp(0.0, 1.0))
}

pub fn ssim<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    ssim_map(a, b)?.mean()
}

/// `mean|Î - I| + β Σ_i mean ‖φ_i(Î) - φ_i(I)‖₂`.
pub fn mono_reconstruction_loss<'t, T: Scalar>(
    recon: Var<'t, T>,
    target: Var<'t, T>,
    fx: &FeatureExtractor<T>,
    beta: f64,
) -> Result<Var<'t, T>> {
    let mut loss = l1_mean(recon, target)?;
    if beta > 0.0 {
        let fr = fx.features(recon)?;
        let ft = fx.features(target)?;
        for (a, b) in fr.into_iter().zip(ft) {
            let norm = a.sub(b)?.square().sum_axis(1)?.sqrt().mean()?;
            loss = loss.add(norm.mul_scalar(beta))?;
        }
    }
    Ok(loss)
}

/// Edge-aware smoothness `mean(|∂x d| e^{-γ|∂x I|}) + mean(|∂y d| e^{-γ|∂y I|})`, image gradients
/// averaged over colour channels.
pub fn smoothness_loss<'t, T: Scalar>(disp: Var<'t, T>, img: Var<'t, T>, gamma: f64) -> Result<Var<'t, T>> {
    let (ds, is) = (disp.shape(), img.shape());
    if ds.len() != 4 || is.len() != 4 || ds[0] != is[0] || ds[2..] != is[2..] {
        return Err(Error::ShapeMismatch { op: "smoothness", lhs: ds, rhs: is });
    }
    let wx = img.diff_x()?.abs().mean_axis(1)?.mul_scalar(-gamma).exp();
    let wy = img.diff_y()?.abs().mean_axis(1)?.mul_scalar(-gamma).exp();
    let tx = disp.diff_x()?.abs().mul(wx)?.mean()?;
    let ty = disp.diff_y()?.abs().mul(wy)?.mean()?;
    tx.add(ty)
}

/// `I' = M ⊙ I_l + (1 - M) ⊙ Ĩ_a`, the mask broadcast over colour channels.
pub fn composite_target<T: Scalar>(left: &Tensor<T>, fill: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = left.dims4()?;
    if fill.shape() != left.shape() || mask.shape() != [n, 1, h, w] {
        return Err(Error::ShapeMismatch {
            op: "composite_target",
            lhs: left.shape().to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let hw = h * w;
    Ok(Tensor::from_fn(left.shape().to_vec(), |i| {
        let m = mask.data()[(i / (c * hw)) * hw + i % hw];
        m * left.data()[i] + (T::one() - m) * fill.data()[i]
    }))
}

/// `α mean|Ĩ_s - I'| + (1 - α) ssim(Ĩ_s, I')`.
pub fn stereo_reconstruction_loss<'t, T: Scalar>(recon: Var<'t, T>, target: Var<'t, T>, alpha: f64) -> Result<Var<'t, T>> {
    let l1 = l1_mean(recon, target)?.mul_scalar(alpha);
    if alpha >= 1.0 {
        return Ok(l1);
    }
    l1.add(ssim(recon, target)?.mul_scalar(1.0 - alpha))
}

/// Hinged L1 between each cost volume and the resampled teacher volume: pixels whose
/// channel-summed difference exceeds `t1` are averaged, the rest ignored; scales are summed.
pub fn cost_volume_loss<'t, T: Scalar>(volumes: &[Var<'t, T>], teacher: &Tensor<T>, t1: f64) -> Result<Var<'t, T>> {
    let Some(first) = volumes.first() else {
        return Err(Error::Empty { op: "cost_volume_loss" });
    };
    let tape = first.tape();
    let (_, levels, _, _) = teacher.dims4()?;
    let mut total = tape.scalar(T::zero());
    for a in volumes {
        let shape = a.shape();
        if shape.len() != 4 || shape[1] != levels {
            return Err(Error::ShapeMismatch {
                op: "cost_volume_loss",
                lhs: shape,
                rhs: teacher.shape().to_vec(),
            });
        }
        let p = teacher.resize_bilinear(shape[2], shape[3])?;
        let diff = a.sub(tape.constant(p))?.abs().sum_axis(1)?;
        let threshold = T::lit(t1);
        let sel = diff.value().map(|v| if v > threshold { T::one() } else { T::zero() });
        let count = sel.sum().to_f64().unwrap();
        if count > 0.0 {
            let term = diff.mul(tape.constant(sel))?.sum().mul_scalar(1.0 / count);
            total = total.add(term)?;
        }
    }
    Ok(total)
}

/// `mean|∂x d_a - ∂x d_s| + mean|∂y d_a - ∂y d_s| + mean(M_out ⊙ |d_a - d_s|)`.
pub fn guidance_loss<'t, T: Scalar>(teacher: &Tensor<T>, disp: Var<'t, T>, out_of_view: &Tensor<T>) -> Result<Var<'t, T>> {
    let tape = disp.tape();
    let da = tape.constant(teacher.clone());
    same_shape("guidance", &da, &disp)?;
    let gx = da.diff_x()?.sub(disp.diff_x()?)?.abs().mean()?;
    let gy = da.diff_y()?.sub(disp.diff_y()?)?.abs().mean()?;
    let m = tape.constant(out_of_view.clone());
    same_shape("guidance", &m, &disp)?;
    let gv = da.sub(disp)?.abs().mul(m)?.mean()?;
    gx.add(gy)?.add(gv)
}

/// Components of the stereo objective.
#[derive(Debug, Clone, Copy)]
pub struct StereoTerms<'t, T> {
    pub rec: Var<'t, T>,
    pub smo: Var<'t, T>,
    pub cos: Var<'t, T>,
    pub gui: Var<'t, T>,
}

impl<'t, T: Scalar> StereoTerms<'t, T> {
    /// `L_rec2 + λ2 L_smo2 + λ3 L_cos + λ4 L_gui`.
    pub fn total(&self, w: &LossWeights) -> Result<Var<'t, T>> {
        self.rec
            .add(self.smo.mul_scalar(w.lambda2))?
            .add(self.cos.mul_scalar(w.lambda3))?
            .add(self.gui.mul_scalar(w.lambda4))
    }
}

/// Components of the monocular objective.
#[derive(Debug, Clone, Copy)]
pub struct MonoTerms<'t, T> {
    pub rec: Var<'t, T>,
    pub smo: Var<'t, T>,
}

impl<'t, T: Scalar> MonoTerms<'t, T> {
    /// `L_rec1 + λ1 L_smo1`.
    pub fn total(&self, w: &LossWeights) -> Result<Var<'t, T>> {
        self.rec.add(self.smo.mul_scalar(w.lambda1))
    }
}

/// `P_h = (1 - M_hoe) ⊙ P_s + M_hoe ⊙ P_a`, mask broadcast over disparity channels.
pub fn hybrid_volume<T: Scalar>(stereo: &Tensor<T>, mono: &Tensor<T>, edge: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = stereo.dims4()?;
    if mono.shape() != stereo.shape() || edge.shape() != [n, 1, h, w] {
        return Err(Error::ShapeMismatch {
            op: "hybrid_volume",
            lhs: stereo.shape().to_vec(),
            rhs: if mono.shape() != stereo.shape() { mono.shape() } else { edge.shape() }.to_vec(),
        });
    }
    let hw = h * w;
    Ok(Tensor::from_fn(stereo.shape().to_vec(), |i| {
        let m = edge.data()[(i / (c * hw)) * hw + i % hw];
        (T::one() - m) * stereo.data()[i] + m * mono.data()[i]
    }))
}

pub const KL_FLOOR: f64 = 1e-8;

/// Pixel-mean of `Σ_n P_h ln(P_h / max(P_m, 1e-8))`, with `0 ln 0 = 0`.
pub fn distill_loss<'t, T: Scalar>(target: &Tensor<T>, student: Var<'t, T>) -> Result<Var<'t, T>> {
    let sshape = student.shape();
    if target.shape() != sshape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "distill_loss",
            lhs: target.shape().to_vec(),
            rhs: sshape,
        });
    }
    let (n, _, h, w) = target.dims4()?;
    let pixels = (n * h * w) as f64;
    let entropy: f64 = target
        .data()
        .iter()
        .map(|&p| {
            let p = p.to_f64().unwrap();
            if p > 0.0 { p * p.ln() } else { 0.0 }
        })
        .sum();
    let tape = student.tape();
    let cross = student
        .max_scalar(KL_FLOOR)
        .log()
        .mul(tape.constant(target.clone()))?
        .sum();
    Ok(cross.neg().add_scalar(entropy).mul_scalar(1.0 / pixels))
}

pub fn check_probability<T: Scalar>(p: &Tensor<T>) -> Result<()> {
    if p.data().iter().any(|&v| !(v >= T::zero())) {
        return Err(invalid("probabilities must be non-negative"));
    }
    crate::warp::check_normalized(p, 1e-4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn img(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), f)
    }

    #[test]
    fn ssim_examples() {
        let tape = Tape::<f64>::new();
        let a = img(&[1, 3, 5, 6], |i| ((i * 13) % 7) as f64 / 7.0);
        let b = img(&[1, 3, 5, 6], |i| ((i * 5) % 11) as f64 / 11.0);
        let same = ssim(tape.constant(a.clone()), tape.constant(a.clone())).unwrap();
        assert!(same.value().item().abs() < 1e-12);

        let zero = tape.constant(Tensor::zeros(vec![1, 3, 4, 4]));
        let one = tape.constant(Tensor::ones(vec![1, 3, 4, 4]));
        let c1 = 1e-4;
        let expect = (1.0 - c1 / (1.0 + c1)) / 2.0;
        let v = ssim(zero, one).unwrap().value().item();
        assert!((v - expect).abs() < 1e-12 && (v - 0.49995).abs() < 1e-6);

        let ab = ssim(tape.constant(a.clone()), tape.constant(b.clone())).unwrap().value().item();
        let ba = ssim(tape.constant(b), tape.constant(a)).unwrap().value().item();
        assert!((ab - ba).abs() < 1e-15 && (0.0..=1.0).contains(&ab));
        assert!(ssim(zero, tape.constant(Tensor::zeros(vec![1, 3, 4, 5]))).is_err());
    }

    #[test]
    fn reconstruction_examples() {
        let tape = Tape::<f64>::new();
        let fx = FeatureExtractor::new(7);
        let a = img(&[1, 3, 8, 16], |i| (i as f64 * 0.37).sin() * 0.5 + 0.5);
        let l = mono_reconstruction_loss(tape.constant(a.clone()), tape.constant(a.clone()), &fx, 0.01).unwrap();
        assert_eq!(l.value().item(), 0.0);
        let shifted = a.map(|v| v + 0.3);
        let l = mono_reconstruction_loss(tape.constant(shifted.clone()), tape.constant(a.clone()), &fx, 0.0).unwrap();
        assert!((l.value().item() - 0.3).abs() < 1e-12);

        assert_eq!(stereo_reconstruction_loss(tape.constant(a.clone()), tape.constant(a.clone()), 0.15).unwrap().value().item(), 0.0);
        let pure = stereo_reconstruction_loss(tape.constant(shifted.clone()), tape.constant(a.clone()), 1.0).unwrap();
        assert!((pure.value().item() - 0.3).abs() < 1e-12);
        let mixed = stereo_reconstruction_loss(tape.constant(shifted.clone()), tape.constant(a.clone()), 0.15).unwrap();
        let s = ssim(tape.constant(shifted), tape.constant(a)).unwrap().value().item();
        assert!((mixed.value().item() - (0.15 * 0.3 + 0.85 * s)).abs() < 1e-12);
    }

    #[test]
    fn smoothness_examples() {
        let tape = Tape::<f64>::new();
        let flat_img = tape.constant(Tensor::full(vec![1, 3, 4, 6], 0.5));
        let d = tape.constant(Tensor::full(vec![1, 1, 4, 6], 3.0));
        assert_eq!(smoothness_loss(d, flat_img, 2.0).unwrap().value().item(), 0.0);
        let ramp = tape.constant(img(&[1, 1, 4, 6], |i| (i % 6) as f64));
        assert!((smoothness_loss(ramp, flat_img, 2.0).unwrap().value().item() - 1.0).abs() < 1e-12);
        let soft = tape.constant(img(&[1, 3, 4, 6], |i| (i % 6) as f64 * 0.1));
        let sharp = tape.constant(img(&[1, 3, 4, 6], |i| (i % 6) as f64 * 0.3));
        let ls = smoothness_loss(ramp, soft, 2.0).unwrap().value().item();
        let lh = smoothness_loss(ramp, sharp, 2.0).unwrap().value().item();
        assert!(lh < ls && ls < 1.0);
    }

    #[test]
    fn composite_examples() {
        let l = img(&[1, 3, 3, 4], |i| i as f64);
        let f = img(&[1, 3, 3, 4], |i| -(i as f64));
        assert_eq!(composite_target(&l, &f, &Tensor::ones(vec![1, 1, 3, 4])).unwrap(), l);
        assert_eq!(composite_target(&l, &f, &Tensor::zeros(vec![1, 1, 3, 4])).unwrap(), f);
        let checker = img(&[1, 1, 3, 4], |i| ((i / 4 + i % 4) % 2) as f64);
        let c = composite_target(&l, &f, &checker).unwrap();
        for ch in 0..3 {
            for y in 0..3 {
                for x in 0..4 {
                    let src = if (x + y) % 2 == 1 { &l } else { &f };
                    assert_eq!(c.at4(0, ch, y, x), src.at4(0, ch, y, x));
                }
            }
        }
    }

    #[test]
    fn cost_volume_examples() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64(vec![1, 2, 1, 1], &[1.0, 0.0]).unwrap());
        let p = Tensor::from_f64(vec![1, 2, 1, 1], &[0.0, 1.0]).unwrap();
        assert!((cost_volume_loss(&[a], &p, 1.0).unwrap().value().item() - 2.0).abs() < 1e-15);

        let teacher = img(&[1, 2, 8, 8], |i| if i < 64 { 0.25 } else { 0.75 });
        let coarse = tape.constant(teacher.resize_bilinear(2, 2).unwrap());
        assert_eq!(cost_volume_loss(&[coarse], &teacher, 1.0).unwrap().value().item(), 0.0);
        let near = tape.constant(img(&[1, 2, 2, 2], |i| if i < 4 { 0.6 } else { 0.4 }));
        assert_eq!(cost_volume_loss(&[near], &teacher, 1.0).unwrap().value().item(), 0.0);
    }

    #[test]
    fn guidance_examples() {
        let tape = Tape::<f64>::new();
        let da = img(&[1, 1, 4, 5], |i| (i as f64 * 0.7).cos() + 3.0);
        let zero = Tensor::zeros(vec![1, 1, 4, 5]);
        let ones = Tensor::ones(vec![1, 1, 4, 5]);
        assert_eq!(guidance_loss(&da, tape.constant(da.clone()), &ones).unwrap().value().item(), 0.0);
        let up = tape.constant(da.map(|v| v + 2.0));
        assert!(guidance_loss(&da, up, &zero).unwrap().value().item().abs() < 1e-12);
        assert!((guidance_loss(&da, up, &ones).unwrap().value().item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn totals_use_weights() {
        let tape = Tape::<f64>::new();
        let one = tape.scalar(1.0);
        let zero = tape.scalar(0.0);
        let w = LossWeights::default();
        let s = StereoTerms { rec: one, smo: one, cos: one, gui: one };
        assert!((s.total(&w).unwrap().value().item() - 1.028).abs() < 1e-12);
        let z = StereoTerms { rec: zero, smo: zero, cos: zero, gui: zero };
        assert_eq!(z.total(&w).unwrap().value().item(), 0.0);
        let bigger = StereoTerms { gui: tape.scalar(1.5), ..s };
        assert!(bigger.total(&w).unwrap().value().item() > 1.028);
        let m = MonoTerms { rec: one, smo: one };
        assert!((m.total(&w).unwrap().value().item() - 1.0008).abs() < 1e-12);
        assert_eq!(MonoTerms { rec: zero, smo: zero }.total(&w).unwrap().value().item(), 0.0);
    }

    #[test]
    fn hybrid_and_distill_examples() {
        let ps = img(&[1, 2, 2, 2], |i| if i < 4 { 0.9 } else { 0.1 });
        let pa = img(&[1, 2, 2, 2], |i| if i < 4 { 0.3 } else { 0.7 });
        let m = |v: f64| Tensor::full(vec![1, 1, 2, 2], v);
        assert_eq!(hybrid_volume(&ps, &pa, &m(0.0)).unwrap(), ps);
        assert_eq!(hybrid_volume(&ps, &pa, &m(1.0)).unwrap(), pa);
        let half = hybrid_volume(&ps, &pa, &m(0.5)).unwrap();
        assert!((half.data()[0] - 0.6).abs() < 1e-12);
        check_probability(&half).unwrap();

        let tape = Tape::<f64>::new();
        assert!(distill_loss(&ps, tape.constant(ps.clone())).unwrap().value().item().abs() < 1e-15);
        let hard = Tensor::from_f64(vec![1, 2, 1, 1], &[1.0, 0.0]).unwrap();
        let even = tape.constant(Tensor::full(vec![1, 2, 1, 1], 0.5));
        assert!((distill_loss(&hard, even).unwrap().value().item() - 2f64.ln()).abs() < 1e-12);
        assert!(distill_loss(&hard, tape.constant(Tensor::full(vec![1, 3, 1, 1], 0.3))).is_err());
    }

    #[test]
    fn weights_validate() {
        LossWeights::default().validate().unwrap();
        assert!(LossWeights { alpha: 1.5, ..Default::default() }.validate().is_err());
        assert!(LossWeights { lambda2: -1.0, ..Default::default() }.validate().is_err());
    }
}
