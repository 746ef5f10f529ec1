//! Discrete disparity levels and the volume → disparity → depth decoding.

use crate::error::{invalid, Error, Result};
use crate::tensor::{Tensor, Var};
use crate::Scalar;

/// Geometrically spaced disparity candidates `b_0 < … < b_{N-1}`, in full-resolution pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityLevels {
    values: Vec<f64>,
}

impl DisparityLevels {
    /// `b_n = b_min · (b_max / b_min)^(n / (N-1))` with both endpoints pinned exactly.
    pub fn exponential(b_min: f64, b_max: f64, count: usize) -> Result<Self> {
        if !(b_min > 0.0 && b_max > b_min && b_max.is_finite()) {
            return Err(invalid(format!(
                "disparity range must satisfy 0 < b_min < b_max, got [{b_min}, {b_max}]"
            )));
        }
        if count < 2 {
            return Err(invalid(format!("need at least two disparity levels, got {count}")));
        }
        let ratio = b_max / b_min;
        let last = (count - 1) as f64;
        let mut values: Vec<f64> = (0..count)
            .map(|n| b_min * ratio.powf(n as f64 / last))
            .collect();
        values[0] = b_min;
        values[count - 1] = b_max;
        Ok(Self { values })
    }

    /// Arbitrary levels; used by tests that need zero or integer shifts.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("disparity levels must be finite and non-empty"));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// Levels rescaled to a feature map of width `width` (full width `full_width`).
    pub fn scaled(&self, width: usize, full_width: usize) -> Vec<f64> {
        let s = width as f64 / full_width as f64;
        self.values.iter().map(|b| b * s).collect()
    }

    pub fn as_scalars<T: Scalar>(&self) -> Vec<T> {
        self.values.iter().map(|&v| T::lit(v)).collect()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(vec![self.len()], self.as_scalars()).expect("1-D levels")
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        Self::from_values(t.data().iter().map(|v| v.to_f64().unwrap()).collect())
    }
}

/// Stereo rig shared by every sample: baseline in metres and horizontal focal length in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraRig {
    pub baseline: f64,
    pub focal_x: f64,
}

impl CameraRig {
    pub fn new(baseline: f64, focal_x: f64) -> Result<Self> {
        if !(baseline > 0.0 && focal_x > 0.0) {
            return Err(invalid(format!(
                "rig needs positive baseline and focal length, got B={baseline}, f_x={focal_x}"
            )));
        }
        Ok(Self { baseline, focal_x })
    }

    /// `B · f_x`, the constant relating disparity and depth.
    pub fn bf(&self) -> f64 {
        self.baseline * self.focal_x
    }
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            baseline: 0.54,
            focal_x: 100.0,
        }
    }
}

fn check_volume(op: &'static str, shape: &[usize], levels: &DisparityLevels) -> Result<()> {
    match shape {
        [_, c, _, _] if *c == levels.len() => Ok(()),
        _ => Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("expected N×{}×H×W", levels.len()),
        }),
    }
}

/// `d = Σ_n P_n · b_n` for an `N×L×H×W` probability volume; output `N×1×H×W`.
pub fn expected_disparity<'t, T: Scalar>(
    prob: Var<'t, T>,
    levels: &DisparityLevels,
) -> Result<Var<'t, T>> {
    check_volume("expected_disparity", &prob.shape(), levels)?;
    let b = Tensor::new(vec![1, levels.len(), 1, 1], levels.as_scalars())?;
    prob.mul(prob.tape().constant(b))?.sum_axis(1)
}

/// Plain-tensor variant of [`expected_disparity`].
pub fn expected_disparity_tensor<T: Scalar>(prob: &Tensor<T>, levels: &DisparityLevels) -> Result<Tensor<T>> {
    check_volume("expected_disparity", prob.shape(), levels)?;
    let (n, c, h, w) = prob.dims4()?;
    let b = levels.as_scalars::<T>();
    let hw = h * w;
    let mut out = vec![T::zero(); n * hw];
    for s in 0..n {
        for (k, &bk) in b.iter().enumerate().take(c) {
            let src = &prob.data()[(s * c + k) * hw..(s * c + k + 1) * hw];
            for (o, &p) in out[s * hw..(s + 1) * hw].iter_mut().zip(src) {
                *o += p * bk;
            }
        }
    }
    Tensor::new(vec![n, 1, h, w], out)
}

fn ensure_positive<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.data().iter().any(|&v| !(v > T::zero())) {
        return Err(invalid(format!("{what} must be strictly positive everywhere")));
    }
    Ok(())
}

/// `D = B·f_x / d`.
pub fn disparity_to_depth<'t, T: Scalar>(disp: Var<'t, T>, rig: &CameraRig) -> Result<Var<'t, T>> {
    ensure_positive(&disp.value(), "disparity")?;
    let bf = disp.tape().scalar(T::lit(rig.bf()));
    bf.div(disp)
}

/// `d = B·f_x / D`.
pub fn depth_to_disparity<'t, T: Scalar>(depth: Var<'t, T>, rig: &CameraRig) -> Result<Var<'t, T>> {
    ensure_positive(&depth.value(), "depth")?;
    let bf = depth.tape().scalar(T::lit(rig.bf()));
    bf.div(depth)
}

pub fn disparity_to_depth_tensor<T: Scalar>(disp: &Tensor<T>, rig: &CameraRig) -> Result<Tensor<T>> {
    ensure_positive(disp, "disparity")?;
    let bf = T::lit(rig.bf());
    Ok(disp.map(|d| bf / d))
}

pub fn depth_to_disparity_tensor<T: Scalar>(depth: &Tensor<T>, rig: &CameraRig) -> Result<Tensor<T>> {
    ensure_positive(depth, "depth")?;
    let bf = T::lit(rig.bf());
    Ok(depth.map(|d| bf / d))
}
