use super::{Bound, Branch, ConvIdx, Network};
use crate::error::{Error, Result};
use crate::disparity::expected_disparity_tensor;
use crate::tensor::{Tape, Tensor, Var};
use crate::Scalar;

/// Cost volume `A` and fused feature `F'` of one matching module.
#[derive(Debug, Clone, Copy)]
pub struct MfmOutput<'t, T> {
    pub attention: Var<'t, T>,
    pub feature: Var<'t, T>,
}

/// Stereo logits for both views (each in its own image frame) and the left/right cost volumes
/// at strides 8, 4, 2.
#[derive(Debug, Clone)]
pub struct StereoOutput<'t, T> {
    pub left: Var<'t, T>,
    pub right: Var<'t, T>,
    pub left_volumes: Vec<Var<'t, T>>,
    /// Right-view cost volumes in the mirrored frame.
    pub right_volumes_mirrored: Vec<Var<'t, T>>,
}

impl<T: Scalar> Network<T> {
    fn conv<'t>(&self, b: &Bound<'t, T>, x: Var<'t, T>, c: ConvIdx) -> Result<Var<'t, T>> {
        x.conv2d(b.var(c.w), c.stride, c.pad)?.add(b.var(c.b))
    }

    fn conv_elu<'t>(&self, b: &Bound<'t, T>, x: Var<'t, T>, c: ConvIdx) -> Result<Var<'t, T>> {
        Ok(self.conv(b, x, c)?.elu())
    }

    /// Pyramid `C_1..C_4` at strides 2, 4, 8, 16.
    pub fn encode<'t>(&self, b: &Bound<'t, T>, img: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let shape = img.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] % 16 != 0 || shape[3] % 16 != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::InvalidShape {
                op: "encode",
                shape,
                reason: "expected N×3×H×W with H and W positive multiples of 16".into(),
            });
        }
        let mut x = img.add_scalar(-0.5).mul_scalar(2.0);
        let mut out = Vec::with_capacity(4);
        for stage in &self.layout.encoder {
            x = self.conv_elu(b, x, stage[0])?;
            x = self.conv_elu(b, x, stage[1])?;
            out.push(x);
        }
        Ok(out)
    }

    /// Upsample `f_next` ×2, concatenate the skip feature, fuse, then apply the selected branch.
    pub fn aggregate<'t>(
        &self,
        b: &Bound<'t, T>,
        block: usize,
        f_next: Var<'t, T>,
        skip: Var<'t, T>,
        branch: Branch,
    ) -> Result<Var<'t, T>> {
        let (fs, ss) = (f_next.shape(), skip.shape());
        if fs.len() != 4 || ss.len() != 4 || fs[2] * 2 != ss[2] || fs[3] * 2 != ss[3] {
            return Err(Error::ShapeMismatch { op: "aggregate", lhs: fs, rhs: ss });
        }
        let idx = &self.layout.agg[block];
        let up = f_next.upsample2x()?;
        let x = self.conv_elu(b, Var::concat(&[up, skip], 1)?, idx.shared)?;
        let br = match branch {
            Branch::Auxiliary => idx.aux,
            Branch::Final => idx.fin,
        };
        self.conv_elu(b, x, br)
    }

    /// Shifted-key attention between query features `f_q` and key features `f_k` (same frame,
    /// keys read at `x - b'_n`), followed by the SE fusion of `[A, F_q]`.
    pub fn mfm<'t>(
        &self,
        b: &Bound<'t, T>,
        block: usize,
        f_q: Var<'t, T>,
        f_k: Var<'t, T>,
        full_width: usize,
    ) -> Result<MfmOutput<'t, T>> {
        let (qs, ks) = (f_q.shape(), f_k.shape());
        if qs != ks || qs.len() != 4 {
            return Err(Error::ShapeMismatch { op: "mfm", lhs: qs, rhs: ks });
        }
        let idx = &self.layout.mfm[block];
        let c = qs[1];
        let q = self.conv(b, f_q, idx.q)?;
        let k = self.conv(b, f_k, idx.k)?;
        let scale = 1.0 / (c as f64).sqrt();
        let shifts = self.levels.scaled(qs[3], full_width);
        let scores = shifts
            .iter()
            .map(|&s| q.mul(k.shift_h(&vec![T::lit(s); c])?)?.sum_axis(1))
            .collect::<Result<Vec<_>>>()?;
        let attention = Var::concat(&scores, 1)?.mul_scalar(scale).softmax_channel()?;
        let x = self.conv_elu(b, Var::concat(&[attention, f_q], 1)?, idx.fuse)?;
        let pooled = x.mean_axis(2)?.mean_axis(3)?;
        let gate = self.conv(b, self.conv(b, pooled, idx.se1)?.relu(), idx.se2)?.sigmoid();
        Ok(MfmOutput { attention, feature: x.mul(gate)? })
    }

    fn decode_head<'t>(&self, b: &Bound<'t, T>, f1: Var<'t, T>, head: ConvIdx) -> Result<Var<'t, T>> {
        let x = self.conv_elu(b, f1, self.layout.dec[0])?.upsample2x()?;
        let x = self.conv_elu(b, x, self.layout.dec[1])?;
        self.conv(b, x, head)
    }

    /// Monocular logits `N×L×H×W` through the selected aggregation branch.
    pub fn forward_mono<'t>(&self, b: &Bound<'t, T>, img: Var<'t, T>, branch: Branch) -> Result<Var<'t, T>> {
        let c = self.encode(b, img)?;
        let mut f = c[3];
        for i in 0..3 {
            f = self.aggregate(b, i, f, c[2 - i], branch)?;
        }
        self.decode_head(b, f, self.layout.out_mono)
    }

    /// Binocular logits for both views.
    ///
    /// The right sub-network runs on the mirrored right image, where the mirrored left image
    /// plays the role of the right view; its keys are therefore read in the same `x - b'`
    /// direction, which in the original frame samples left features at `x + b'`. Swapping the
    /// inputs and mirroring both thus mirrors and swaps the outputs exactly.
    pub fn forward_stereo<'t>(&self, b: &Bound<'t, T>, left: Var<'t, T>, right: Var<'t, T>) -> Result<StereoOutput<'t, T>> {
        let (ls, rs) = (left.shape(), right.shape());
        if ls != rs {
            return Err(Error::ShapeMismatch { op: "forward_stereo", lhs: ls, rhs: rs });
        }
        let full_width = ls[3];
        let cl = self.encode(b, left)?;
        let cr = self.encode(b, right.flip_w())?;
        let (mut fl, mut fr) = (cl[3], cr[3]);
        let mut left_volumes = Vec::with_capacity(3);
        let mut right_volumes = Vec::with_capacity(3);
        for i in 0..3 {
            let al = self.aggregate(b, i, fl, cl[2 - i], Branch::Auxiliary)?;
            let ar = self.aggregate(b, i, fr, cr[2 - i], Branch::Auxiliary)?;
            let ml = self.mfm(b, i, al, ar.flip_w(), full_width)?;
            let mr = self.mfm(b, i, ar, al.flip_w(), full_width)?;
            left_volumes.push(ml.attention);
            right_volumes.push(mr.attention);
            fl = ml.feature;
            fr = mr.feature;
        }
        Ok(StereoOutput {
            left: self.decode_head(b, fl, self.layout.out_stereo)?,
            right: self.decode_head(b, fr, self.layout.out_stereo)?.flip_w(),
            left_volumes,
            right_volumes_mirrored: right_volumes,
        })
    }
}

/// Gradient-free inference on plain tensors, each call on its own tape.
impl<T: Scalar> Network<T> {
    /// Monocular probability volume `P`.
    pub fn mono_volume(&self, img: &Tensor<T>, branch: Branch) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let b = self.bind(&tape, |_| false);
        let p = self.forward_mono(&b, tape.constant(img.clone()), branch)?.softmax_channel()?;
        Ok(p.value().as_ref().clone())
    }

    /// Left-view binocular probability volume.
    pub fn stereo_volume(&self, left: &Tensor<T>, right: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let b = self.bind(&tape, |_| false);
        let out = self.forward_stereo(&b, tape.constant(left.clone()), tape.constant(right.clone()))?;
        Ok(out.left.softmax_channel()?.value().as_ref().clone())
    }

    /// Monocular disparity map in pixels.
    pub fn predict_mono(&self, img: &Tensor<T>, branch: Branch) -> Result<Tensor<T>> {
        expected_disparity_tensor(&self.mono_volume(img, branch)?, &self.levels)
    }

    /// Binocular left-view disparity map in pixels.
    pub fn predict_stereo(&self, left: &Tensor<T>, right: &Tensor<T>) -> Result<Tensor<T>> {
        expected_disparity_tensor(&self.stereo_volume(left, right)?, &self.levels)
    }
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use crate::tensor::{Tape, Tensor};

    fn levels() -> DisparityLevels {
        DisparityLevels::exponential(1.0, 24.0, 5).unwrap()
    }

    fn small() -> NetworkConfig {
        NetworkConfig {
            encoder_widths: [4, 8, 8, 8],
            agg_widths: [8, 8, 4],
            decoder_width: 4,
            se_reduction: 2,
        }
    }

    fn image(seed: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![1, 3, h, w], |i| (((i + seed) * 2654435761usize) % 1000) as f64 / 1000.0)
    }

    #[test]
    fn encoder_shapes() {
        let net = Network::<f32>::new(NetworkConfig::default(), levels(), 1).unwrap();
        let tape = Tape::new();
        let b = net.bind(&tape, |_| false);
        let img = tape.constant(image(0, 64, 128).cast());
        let shapes: Vec<_> = net.encode(&b, img).unwrap().iter().map(|v| v.shape()).collect();
        assert_eq!(shapes, vec![vec![1, 16, 32, 64], vec![1, 32, 16, 32], vec![1, 64, 8, 16], vec![1, 128, 4, 8]]);
        assert!(net.encode(&b, tape.constant(Tensor::zeros(vec![1, 3, 40, 128]))).is_err());
    }

    #[test]
    fn mono_output_shape_and_branches() {
        let net = Network::<f64>::new(small(), levels(), 2).unwrap();
        let tape = Tape::new();
        let b = net.bind(&tape, |_| false);
        let img = tape.constant(image(1, 32, 48));
        let va = net.forward_mono(&b, img, Branch::Auxiliary).unwrap();
        let vm = net.forward_mono(&b, img, Branch::Final).unwrap();
        assert_eq!(va.shape(), vec![1, 5, 32, 48]);
        assert_eq!(va.shape(), vm.shape());
        assert!(va.value().max_abs_diff(&vm.value()) > 0.0);

        let mut copy = net.clone();
        copy.copy_auxiliary_to_final();
        let b2 = copy.bind(&tape, |_| false);
        let vm2 = copy.forward_mono(&b2, img, Branch::Final).unwrap();
        assert_eq!(*va.value(), *vm2.value());
    }

    #[test]
    fn stereo_mirror_equivariance() {
        let net = Network::<f64>::new(small(), levels(), 3).unwrap();
        let tape = Tape::new();
        let b = net.bind(&tape, |_| false);
        let l = image(2, 16, 32);
        let r = image(7, 16, 32);
        let out = net.forward_stereo(&b, tape.constant(l.clone()), tape.constant(r.clone())).unwrap();
        let swapped = net
            .forward_stereo(&b, tape.constant(r.flip_w()), tape.constant(l.flip_w()))
            .unwrap();
        assert_eq!(*swapped.left.value(), out.right.value().flip_w());
        assert_eq!(*swapped.right.value(), out.left.value().flip_w());
        assert_eq!(out.left.shape(), vec![1, 5, 16, 32]);
        assert!(net.forward_stereo(&b, tape.constant(l), tape.constant(image(0, 16, 48))).is_err());
    }

    #[test]
    fn path_isolation() {
        let net = Network::<f64>::new(small(), levels(), 4).unwrap();
        let tape = Tape::new();
        let b = net.bind(&tape, |_| true);
        let v = net.forward_mono(&b, tape.constant(image(3, 16, 32)), Branch::Auxiliary).unwrap();
        tape.backward(v.square().mean().unwrap()).unwrap();
        for (p, g) in net.params().iter().zip(b.grads()) {
            let touched = g.map(|g| g.data().iter().any(|&x| x != 0.0)).unwrap_or(false);
            match p.role {
                Role::Mfm | Role::OutStereo | Role::AggFinal => assert!(!touched, "{}", p.name),
                _ => {}
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = Network::<f32>::new(small(), levels(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.tioc");
        net.save(&path, "epoch=3\n").unwrap();
        let (back, archive) = Network::<f32>::load(&path).unwrap();
        assert_eq!(archive.meta_value("epoch"), Some("3"));
        assert_eq!(back.config(), net.config());
        assert_eq!(back.levels(), net.levels());
        for (a, b) in back.params().iter().zip(net.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        for p in net.params() {
            let parts: Vec<_> = p.name.split('/').collect();
            assert_eq!(parts.len(), 3, "{}", p.name);
            assert_eq!(parts[0], p.role.group().name());
        }
    }
}
