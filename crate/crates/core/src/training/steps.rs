//! One optimizer update per training step.

use crate::data::StereoSample;
use crate::disparity::{disparity_to_depth_tensor, expected_disparity, expected_disparity_tensor, CameraRig};
use crate::error::{invalid, Result};
use crate::losses::{
    composite_target, cost_volume_loss, distill_loss, guidance_loss, hybrid_volume, mono_reconstruction_loss,
    smoothness_loss, stereo_reconstruction_loss, FeatureExtractor, LossWeights, MonoTerms, StereoTerms,
};
use crate::masks::{half_object_edge_map, occlusion_mask, opposite_occlusion_mask, out_of_view_mask};
use crate::network::{Bound, Branch, Network, Role};
use crate::tensor::{Tape, Tensor, Var};
use crate::warp::{discrete_reconstruct, shift_volume, warp_with_disparity};
use crate::Scalar;

use super::optim::Adam;
use super::schedule::Step;

/// A stack of stereo pairs `B×3×H×W` sharing one rig.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub left: Tensor<T>,
    pub right: Tensor<T>,
    pub rig: CameraRig,
}

impl<T: Scalar> Batch<T> {
    pub fn from_samples(samples: &[StereoSample<T>]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| invalid("empty batch"))?;
        if samples.iter().any(|s| s.rig != first.rig) {
            return Err(invalid("samples in a batch must share the camera rig"));
        }
        let left: Vec<_> = samples.iter().map(|s| &s.left).collect();
        let right: Vec<_> = samples.iter().map(|s| &s.right).collect();
        Ok(Self {
            left: Tensor::concat(&left, 0)?,
            right: Tensor::concat(&right, 0)?,
            rig: first.rig,
        })
    }

    /// Both views mirrored and swapped.
    pub fn mirrored(&self) -> Self {
        Self { left: self.right.flip_w(), right: self.left.flip_w(), rig: self.rig }
    }
}

/// Fixed ingredients of every objective.
#[derive(Debug, Clone)]
pub struct Objective<T> {
    pub weights: LossWeights,
    pub features: FeatureExtractor<T>,
}

/// Loss values of one update: the step's total followed by its components.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: Step,
    pub terms: Vec<(&'static str, f64)>,
}

impl StepReport {
    pub fn total(&self) -> f64 {
        self.terms[0].1
    }
}

fn item<T: Scalar>(v: Var<'_, T>) -> f64 {
    v.value().item().to_f64().unwrap_or(f64::NAN)
}

/// Photometric objective of the auxiliary monocular path: the right view's volume, moved into
/// the left frame level by level, reconstructs the left view from the right one.
pub fn mono_objective<'t, T: Scalar>(
    net: &Network<T>,
    b: &Bound<'t, T>,
    obj: &Objective<T>,
    left: Var<'t, T>,
    right: Var<'t, T>,
) -> Result<MonoTerms<'t, T>> {
    let levels = net.levels();
    let logits = net.forward_mono(b, right, Branch::Auxiliary)?;
    let moved = shift_volume(logits, levels.values())?.softmax_channel()?;
    let recon = discrete_reconstruct(moved, right, levels)?;
    let disp = expected_disparity(logits.softmax_channel()?, levels)?;
    Ok(MonoTerms {
        rec: mono_reconstruction_loss(recon.image, left, &obj.features, obj.weights.beta)?,
        smo: smoothness_loss(disp, right, obj.weights.gamma)?,
    })
}

/// Teacher quantities of the stereo step, all gradient-free.
#[derive(Debug, Clone)]
pub struct StereoTeacher<T> {
    pub prob: Tensor<T>,
    pub disparity: Tensor<T>,
    pub target: Tensor<T>,
    pub out_of_view: Tensor<T>,
}

impl<T: Scalar> StereoTeacher<T> {
    pub fn new(net: &Network<T>, batch: &Batch<T>) -> Result<Self> {
        let prob = net.mono_volume(&batch.left, Branch::Auxiliary)?;
        let disparity = expected_disparity_tensor(&prob, net.levels())?;
        let visible = occlusion_mask(&disparity)?;
        let out_of_view = out_of_view_mask(&disparity)?;
        let (n, _, h, w) = batch.left.dims4()?;
        let tape = Tape::new();
        let fill = warp_with_disparity(tape.constant(batch.right.clone()), tape.constant(disparity.clone()), n, h, w)?;
        let target = composite_target(&batch.left, &fill.image.value(), &visible)?;
        Ok(Self { prob, disparity, target, out_of_view })
    }
}

pub fn stereo_objective<'t, T: Scalar>(
    net: &Network<T>,
    tape: &'t Tape<T>,
    b: &Bound<'t, T>,
    obj: &Objective<T>,
    batch: &Batch<T>,
    teacher: &StereoTeacher<T>,
) -> Result<StereoTerms<'t, T>> {
    let (n, _, h, w) = batch.left.dims4()?;
    let left = tape.constant(batch.left.clone());
    let right = tape.constant(batch.right.clone());
    let out = net.forward_stereo(b, left, right)?;
    let disp = expected_disparity(out.left.softmax_channel()?, net.levels())?;
    let recon = warp_with_disparity(right, disp, n, h, w)?;
    let ws = &obj.weights;
    Ok(StereoTerms {
        rec: stereo_reconstruction_loss(recon.image, tape.constant(teacher.target.clone()), ws.alpha)?,
        smo: smoothness_loss(disp, left, ws.gamma)?,
        cos: cost_volume_loss(&out.left_volumes, &teacher.prob, ws.t1)?,
        gui: guidance_loss(&teacher.disparity, disp, &teacher.out_of_view)?,
    })
}

/// `P_h`, blending the binocular and auxiliary monocular volumes along half-object edges.
pub fn distill_target<T: Scalar>(net: &Network<T>, batch: &Batch<T>, t2: f64) -> Result<Tensor<T>> {
    let stereo = net.stereo_volume(&batch.left, &batch.right)?;
    let mono = net.mono_volume(&batch.left, Branch::Auxiliary)?;
    let disp = expected_disparity_tensor(&stereo, net.levels())?;
    let edge = half_object_edge_map(
        &disparity_to_depth_tensor(&disp, &batch.rig)?,
        &opposite_occlusion_mask(&disp)?,
        t2,
    )?;
    hybrid_volume(&stereo, &mono, &edge)
}

fn apply<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut Adam<T>,
    tape: &Tape<T>,
    b: &Bound<'_, T>,
    loss: Var<'_, T>,
    lr: &dyn Fn(Role) -> f64,
) -> Result<()> {
    tape.backward(loss)?;
    let grads = b.grads();
    let lrs: Vec<f64> = net.params().iter().map(|p| lr(p.role)).collect();
    opt.update(net.params_mut(), &grads, &lrs)
}

/// Photometric update of the monocular path, averaged over the pair and its mirror image.
pub fn step1_update<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut Adam<T>,
    batch: &Batch<T>,
    obj: &Objective<T>,
    lr: &dyn Fn(Role) -> f64,
) -> Result<StepReport> {
    let tape = Tape::new();
    let b = net.bind(&tape, |r| Step::Mono.updates(r));
    let mirror = batch.mirrored();
    let mut parts = Vec::with_capacity(2);
    for pair in [batch, &mirror] {
        let l = tape.constant(pair.left.clone());
        let r = tape.constant(pair.right.clone());
        parts.push(mono_objective(net, &b, obj, l, r)?);
    }
    let rec = parts[0].rec.add(parts[1].rec)?.mul_scalar(0.5);
    let smo = parts[0].smo.add(parts[1].smo)?.mul_scalar(0.5);
    let terms = MonoTerms { rec, smo };
    let total = terms.total(&obj.weights)?;
    let report = StepReport {
        step: Step::Mono,
        terms: vec![("l_m", item(total)), ("l_rec1", item(rec)), ("l_smo1", item(smo))],
    };
    apply(net, opt, &tape, &b, total, lr)?;
    Ok(report)
}

/// Binocular update against the frozen monocular teacher; the encoder stays fixed.
pub fn step2_update<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut Adam<T>,
    batch: &Batch<T>,
    obj: &Objective<T>,
    lr: &dyn Fn(Role) -> f64,
) -> Result<StepReport> {
    let teacher = StereoTeacher::new(net, batch)?;
    let tape = Tape::new();
    let b = net.bind(&tape, |r| Step::Stereo.updates(r));
    let terms = stereo_objective(net, &tape, &b, obj, batch, &teacher)?;
    let total = terms.total(&obj.weights)?;
    let report = StepReport {
        step: Step::Stereo,
        terms: vec![
            ("l_s", item(total)),
            ("l_rec2", item(terms.rec)),
            ("l_smo2", item(terms.smo)),
            ("l_cos", item(terms.cos)),
            ("l_gui", item(terms.gui)),
        ],
    };
    apply(net, opt, &tape, &b, total, lr)?;
    Ok(report)
}

/// Distillation of the hybrid volume into the final monocular branch.
pub fn step3_update<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut Adam<T>,
    batch: &Batch<T>,
    obj: &Objective<T>,
    lr: &dyn Fn(Role) -> f64,
) -> Result<StepReport> {
    let target = distill_target(net, batch, obj.weights.t2)?;
    let tape = Tape::new();
    let b = net.bind(&tape, |r| Step::Distill.updates(r));
    let student = net
        .forward_mono(&b, tape.constant(batch.left.clone()), Branch::Final)?
        .softmax_channel()?;
    let total = distill_loss(&target, student)?;
    let report = StepReport { step: Step::Distill, terms: vec![("l_dis", item(total))] };
    apply(net, opt, &tape, &b, total, lr)?;
    Ok(report)
}

pub fn update<T: Scalar>(
    step: Step,
    net: &mut Network<T>,
    opt: &mut Adam<T>,
    batch: &Batch<T>,
    obj: &Objective<T>,
    lr: &dyn Fn(Role) -> f64,
) -> Result<StepReport> {
    match step {
        Step::Mono => step1_update(net, opt, batch, obj, lr),
        Step::Stereo => step2_update(net, opt, batch, obj, lr),
        Step::Distill => step3_update(net, opt, batch, obj, lr),
    }
}
