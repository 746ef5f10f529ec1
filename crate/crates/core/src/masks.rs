//! Visibility and edge maps derived from disparity and depth.
//!
//! All maps are plain `N×1×H×W` tensors: binary maps hold only 0 and 1, the half-object-edge map
//! is continuous in `[0, 1]`.

use crate::error::{invalid, Error, Result};
use crate::tensor::{pool3, PoolKind, Tensor};
use crate::Scalar;

/// A per-pixel weight map (`N×1×H×W`, values in `[0, 1]`).
pub type MaskMap<T> = Tensor<T>;

fn check_map<T: Scalar>(op: &'static str, d: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = d.dims4()?;
    if c != 1 {
        return Err(Error::InvalidShape {
            op,
            shape: d.shape().to_vec(),
            reason: "expected a single-channel map".into(),
        });
    }
    Ok((n, h, w))
}

fn check_non_negative<T: Scalar>(d: &Tensor<T>) -> Result<()> {
    if d.data().iter().any(|&v| !(v >= T::zero())) {
        return Err(invalid("disparity must be non-negative"));
    }
    Ok(())
}

/// Rounded-bucket visibility along every scanline: each pixel targets column
/// `round(x + sign·d(x))`; among pixels sharing a target the largest disparity wins, ties are all
/// visible, and pixels whose target leaves the image stay visible.
fn bucket_visibility<T: Scalar>(op: &'static str, d: &Tensor<T>, sign: f64) -> Result<MaskMap<T>> {
    let (_, _, w) = check_map(op, d)?;
    check_non_negative(d)?;
    let mut out = Tensor::full(d.shape().to_vec(), T::one());
    let mut best = vec![f64::NEG_INFINITY; w];
    let mut target = vec![usize::MAX; w];
    for (row, o) in d.data().chunks(w).zip(out.data_mut().chunks_mut(w)) {
        best.iter_mut().for_each(|b| *b = f64::NEG_INFINITY);
        for (x, &v) in row.iter().enumerate() {
            let dv = v.to_f64().unwrap();
            let t = (x as f64 + sign * dv).round();
            target[x] = if t >= 0.0 && t <= (w - 1) as f64 { t as usize } else { usize::MAX };
            if target[x] != usize::MAX {
                best[target[x]] = best[target[x]].max(dv);
            }
        }
        for x in 0..w {
            if target[x] != usize::MAX && row[x].to_f64().unwrap() < best[target[x]] {
                o[x] = T::zero();
            }
        }
    }
    Ok(out)
}

/// Left-view pixels hidden in the right view (target `x - d`).
pub fn occlusion_mask<T: Scalar>(d: &Tensor<T>) -> Result<MaskMap<T>> {
    bucket_visibility("occlusion_mask", d, -1.0)
}

/// The same test with the mirrored correspondence direction (target `x + d`): treats a left-view
/// disparity map as if it belonged to the right view.
pub fn opposite_occlusion_mask<T: Scalar>(d: &Tensor<T>) -> Result<MaskMap<T>> {
    bucket_visibility("opposite_occlusion_mask", d, 1.0)
}

/// Ones where `x - d(x)` falls outside `[0, W-1]`.
pub fn out_of_view_mask<T: Scalar>(d: &Tensor<T>) -> Result<MaskMap<T>> {
    let (_, _, w) = check_map("out_of_view_mask", d)?;
    let max = T::from_usize(w - 1).unwrap();
    let mut out = d.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let src = T::from_usize(i % w).unwrap() - *v;
        *v = if src >= T::zero() && src <= max { T::zero() } else { T::one() };
    }
    Ok(out)
}

/// `|k * D|` with the 4-neighbour Laplacian and edge replication.
pub fn laplacian_magnitude<T: Scalar>(depth: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = check_map("laplacian_magnitude", depth)?;
    let four = T::lit(4.0);
    let mut out = depth.clone();
    for (src, dst) in depth.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
        let at = |y: usize, x: usize| src[y * w + x];
        for y in 0..h {
            for x in 0..w {
                let c = at(y, x);
                let l = at(y, x.saturating_sub(1));
                let r = at(y, (x + 1).min(w - 1));
                let u = at(y.saturating_sub(1), x);
                let dn = at((y + 1).min(h - 1), x);
                dst[y * w + x] = (l + r + u + dn - four * c).abs();
            }
        }
    }
    Ok(out)
}

/// `M_hoe = M_occ' ⊙ min(maxpool(|k * D_s|) / t2, 1)`.
pub fn half_object_edge_map<T: Scalar>(depth: &Tensor<T>, opposite_occ: &MaskMap<T>, t2: f64) -> Result<MaskMap<T>> {
    if !(t2 > 0.0) {
        return Err(invalid(format!("edge threshold t2 must be positive, got {t2}")));
    }
    if depth.shape() != opposite_occ.shape() {
        return Err(Error::ShapeMismatch {
            op: "half_object_edge_map",
            lhs: depth.shape().to_vec(),
            rhs: opposite_occ.shape().to_vec(),
        });
    }
    let (pooled, _) = pool3(&laplacian_magnitude(depth)?, PoolKind::Max)?;
    let inv = T::lit(1.0 / t2);
    pooled.zip_map(opposite_occ, |e, m| m * (e * inv).min(T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(vals: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, 1, 1, vals.len()], vals.to_vec()).unwrap()
    }

    /// Pairwise oracle: `p` is hidden iff some in-view `q` shares its rounded target with a larger
    /// disparity.
    fn brute_force(d: &[f64], sign: f64) -> Vec<f64> {
        let w = d.len();
        let target = |x: usize| {
            let t = (x as f64 + sign * d[x]).round();
            (t >= 0.0 && t <= (w - 1) as f64).then_some(t as i64)
        };
        (0..w)
            .map(|p| {
                let hidden = target(p).is_some()
                    && (0..w).any(|q| q != p && target(q) == target(p) && d[q] > d[p]);
                if hidden { 0.0 } else { 1.0 }
            })
            .collect()
    }

    #[test]
    fn step_example() {
        let m = occlusion_mask(&row(&[1.0, 1.0, 1.0, 3.0, 3.0, 3.0])).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let m = opposite_occlusion_mask(&row(&[3.0, 3.0, 3.0, 1.0, 1.0, 1.0])).unwrap();
        assert_eq!(m.data(), &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_and_gentle_slopes_are_visible() {
        assert!(occlusion_mask(&row(&[2.5; 9])).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(opposite_occlusion_mask(&row(&[2.5; 9])).unwrap().data().iter().all(|&v| v == 1.0));
        let slope: Vec<f64> = (0..12).map(|x| 8.0 - 0.6 * x as f64).collect();
        assert!(occlusion_mask(&row(&slope)).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn negative_disparity_rejected() {
        assert!(occlusion_mask(&row(&[1.0, -0.5])).is_err());
        assert!(opposite_occlusion_mask(&row(&[f64::NAN])).is_err());
    }

    #[test]
    fn out_of_view_examples() {
        assert!(out_of_view_mask(&row(&[0.0; 8])).unwrap().data().iter().all(|&v| v == 0.0));
        let m = out_of_view_mask(&row(&[5.0; 8])).unwrap();
        assert_eq!(m.data(), &[1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(out_of_view_mask(&row(&[8.0; 8])).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn edge_map_examples() {
        let flat = Tensor::<f64>::full(vec![1, 1, 5, 7], 3.0);
        let ones = Tensor::full(vec![1, 1, 5, 7], 1.0);
        assert!(half_object_edge_map(&flat, &ones, 0.13).unwrap().data().iter().all(|&v| v == 0.0));

        // vertical step of height 1 between columns 2 and 3: |Lap| = 1 on columns 2 and 3,
        // dilated by the 3×3 max to columns 1..=4.
        let step = Tensor::<f64>::from_fn(vec![1, 1, 5, 7], |i| if i % 7 >= 3 { 2.0 } else { 1.0 });
        let m = half_object_edge_map(&step, &ones, 0.13).unwrap();
        for y in 0..5 {
            for x in 0..7 {
                let expect = if (1..=4).contains(&x) { 1.0 } else { 0.0 };
                assert_eq!(m.at4(0, 0, y, x), expect);
            }
        }
        let zeros = Tensor::zeros(vec![1, 1, 5, 7]);
        assert!(half_object_edge_map(&step, &zeros, 0.13).unwrap().data().iter().all(|&v| v == 0.0));
        // small step stays below saturation
        let soft = step.map(|v| v * 0.05);
        let m = half_object_edge_map(&soft, &ones, 0.13).unwrap();
        assert!((m.at4(0, 0, 2, 3) - 0.05 / 0.13).abs() < 1e-12);
        assert!(half_object_edge_map(&step, &ones, 0.0).is_err());
    }

    fn disparity_row() -> impl Strategy<Value = Vec<f64>> {
        (1usize..=64).prop_flat_map(|w| {
            prop_oneof![
                proptest::collection::vec(0.0f64..20.0, w),
                proptest::collection::vec((0u8..12).prop_map(|v| v as f64), w),
            ]
        })
    }

    proptest! {
        #[test]
        fn occlusion_matches_pairwise_oracle(d in disparity_row()) {
            let t = row(&d);
            prop_assert_eq!(occlusion_mask(&t).unwrap().into_data(), brute_force(&d, -1.0));
            prop_assert_eq!(opposite_occlusion_mask(&t).unwrap().into_data(), brute_force(&d, 1.0));
        }

        #[test]
        fn mirror_symmetry(d in proptest::collection::vec((0u8..12).prop_map(|v| v as f64), 1..40)) {
            let t = row(&d);
            let direct = occlusion_mask(&t).unwrap();
            let mirrored = opposite_occlusion_mask(&t.flip_w()).unwrap().flip_w();
            prop_assert_eq!(direct, mirrored);
        }

        #[test]
        fn masks_bounded_idempotent_and_gated(
            vals in proptest::collection::vec(0.1f64..30.0, 24),
            t2 in 0.01f64..2.0,
        ) {
            let d = Tensor::new(vec![1, 1, 4, 6], vals).unwrap();
            let maps = [occlusion_mask(&d).unwrap(), opposite_occlusion_mask(&d).unwrap(), out_of_view_mask(&d).unwrap()];
            for m in &maps {
                prop_assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
            }
            prop_assert_eq!(occlusion_mask(&d).unwrap(), occlusion_mask(&d).unwrap());
            let gate = opposite_occlusion_mask(&d).unwrap();
            let e = half_object_edge_map(&d, &gate, t2).unwrap();
            for (a, g) in e.data().iter().zip(gate.data()) {
                prop_assert!(*a >= 0.0 && *a <= 1.0 && *a <= *g);
            }
        }
    }
}
