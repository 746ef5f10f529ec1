//! Procedural stereo scenes: a textured ground plane whose disparity grows with the image row and
//! fronto-parallel boxes standing on it, rendered into both views from the same surface textures.
//!
//! Every disparity is an integer, so `I_l(x) = I_r(x - d(x))` holds exactly wherever the pixel is
//! visible in both views.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::disparity::CameraRig;
use crate::error::{invalid, Error, Result};
use crate::tensor::io::Archive;
use crate::tensor::Tensor;
use crate::Scalar;

/// A fronto-parallel box; `x0` is its leftmost column in the left view.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSpec {
    pub x0: usize,
    pub width: usize,
    pub height: usize,
    pub disparity: u32,
    pub texture_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Ground disparity at the top and bottom rows; rows in between are interpolated linearly and
    /// rounded.
    pub ground_top: f64,
    pub ground_bottom: f64,
    pub boxes: Vec<BoxSpec>,
    pub texture_seed: u64,
}

impl SceneSpec {
    pub fn ground_disparity(&self, y: usize) -> u32 {
        let t = if self.height > 1 { y as f64 / (self.height - 1) as f64 } else { 0.0 };
        (self.ground_top + (self.ground_bottom - self.ground_top) * t).round() as u32
    }

    /// Bottom row of a box: the last row where the ground is farther than the box.
    pub fn box_bottom(&self, disparity: u32) -> Option<usize> {
        (0..self.height).rev().find(|&y| self.ground_disparity(y) < disparity)
    }

    fn box_rows(&self, b: &BoxSpec) -> Option<(usize, usize)> {
        let bottom = self.box_bottom(b.disparity)?;
        (b.height > 0 && b.height <= bottom + 1).then(|| (bottom + 1 - b.height, bottom))
    }

    /// Checks the scene against the disparity range `[lo, hi]`.
    pub fn validate(&self, lo: f64, hi: f64) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(invalid("scene must be non-empty"));
        }
        let g = [self.ground_disparity(0), self.ground_disparity(self.height - 1)];
        let mut spans: Vec<(usize, usize)> = Vec::new();
        for b in &self.boxes {
            let (top, bottom) = self
                .box_rows(b)
                .ok_or_else(|| invalid(format!("box with disparity {} cannot stand on the ground", b.disparity)))?;
            if (top..=bottom).any(|y| self.ground_disparity(y) >= b.disparity) {
                return Err(invalid("boxes must be nearer than the ground behind them"));
            }
            if b.width == 0 || b.x0 + b.width > self.width {
                return Err(invalid("box must lie inside the left view"));
            }
            if spans.iter().any(|&(a0, a1)| b.x0 < a1 && a0 < b.x0 + b.width) {
                return Err(invalid("boxes must not overlap in the left view"));
            }
            spans.push((b.x0, b.x0 + b.width));
        }
        let all = g.iter().copied().chain(self.boxes.iter().map(|b| b.disparity));
        for d in all {
            if (d as f64) < lo || (d as f64) > hi {
                return Err(invalid(format!("disparity {d} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Parameters of the random scene distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub ground_top: [f64; 2],
    pub ground_bottom: [f64; 2],
    pub max_boxes: usize,
    /// Box size per unit disparity (pixels).
    pub box_width_per_disp: f64,
    pub box_height_per_disp: f64,
    pub baseline: f64,
    pub focal_x: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            ground_top: [1.0, 2.0],
            ground_bottom: [10.0, 14.0],
            max_boxes: 3,
            box_width_per_disp: 1.5,
            box_height_per_disp: 1.5,
            baseline: 0.54,
            focal_x: 100.0,
        }
    }
}

impl SceneConfig {
    pub fn rig(&self) -> Result<CameraRig> {
        CameraRig::new(self.baseline, self.focal_x)
    }

    /// Draws a scene from a seed.
    pub fn sample_spec(&self, seed: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = SceneSpec {
            height: self.height,
            width: self.width,
            ground_top: rng.gen_range(self.ground_top[0]..=self.ground_top[1]),
            ground_bottom: rng.gen_range(self.ground_bottom[0]..=self.ground_bottom[1]),
            boxes: Vec::new(),
            texture_seed: rng.gen(),
        };
        let d_lo = spec.ground_disparity(0) + 2;
        let d_hi = spec.ground_disparity(self.height - 1);
        if d_lo > d_hi {
            return spec;
        }
        let count = rng.gen_range(0..=self.max_boxes);
        for _ in 0..count * 4 {
            if spec.boxes.len() == count {
                break;
            }
            let d = rng.gen_range(d_lo..=d_hi);
            let width = ((d as f64 * self.box_width_per_disp).round() as usize).max(2);
            let height = ((d as f64 * self.box_height_per_disp).round() as usize).max(2);
            if width >= self.width {
                continue;
            }
            let cand = BoxSpec {
                x0: rng.gen_range(0..=self.width - width),
                width,
                height,
                disparity: d,
                texture_seed: rng.gen(),
            };
            let mut trial = spec.clone();
            trial.boxes.push(cand);
            if trial.validate(0.0, f64::INFINITY).is_ok() {
                spec = trial;
            }
        }
        spec
    }
}

/// A rectified pair with ground truth for both views.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoSample<T> {
    pub left: Tensor<T>,
    pub right: Tensor<T>,
    /// Left-view disparity (pixels), `1×1×H×W`.
    pub disparity: Tensor<T>,
    pub disparity_right: Tensor<T>,
    /// Ones where the left pixel is visible in the right view (pixels projecting outside the
    /// right image count as visible).
    pub validity: Tensor<T>,
    pub rig: CameraRig,
}

impl<T: Scalar> StereoSample<T> {
    /// The mirrored pair: both views flipped and swapped, so the right view becomes the left.
    pub fn mirrored(&self) -> Self {
        let right_valid = crate::masks::occlusion_mask(&self.disparity_right.flip_w()).expect("non-negative disparity");
        Self {
            left: self.right.flip_w(),
            right: self.left.flip_w(),
            disparity: self.disparity_right.flip_w(),
            disparity_right: self.disparity.flip_w(),
            validity: right_valid,
            rig: self.rig,
        }
    }

    pub fn depth(&self) -> Result<Tensor<T>> {
        crate::disparity::disparity_to_depth_tensor(&self.disparity, &self.rig)
    }

    pub fn to_archive(&self, id: &str, seed: u64) -> Archive<T> {
        let mut a = Archive::new(format!(
            "id={id}\nseed={seed}\nbaseline={:?}\nfocal_x={:?}\n",
            self.rig.baseline, self.rig.focal_x
        ));
        a.push("left", self.left.clone());
        a.push("right", self.right.clone());
        a.push("disparity", self.disparity.clone());
        a.push("disparity_right", self.disparity_right.clone());
        a.push("validity", self.validity.clone());
        a
    }

    pub fn from_archive(a: &Archive<T>) -> Result<Self> {
        let get = |k: &str| {
            a.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("sample lacks {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            a.meta_value(k)
                .ok_or_else(|| Error::Format(format!("sample lacks {k}")))?
                .parse()
                .map_err(|e| Error::Format(format!("bad {k}: {e}")))
        };
        Ok(Self {
            left: get("left")?,
            right: get("right")?,
            disparity: get("disparity")?,
            disparity_right: get("disparity_right")?,
            validity: get("validity")?,
            rig: CameraRig::new(num("baseline")?, num("focal_x")?)?,
        })
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = mix(seed ^ mix(ix as u64 ^ mix(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, u: f64, v: f64, period: f64) -> f64 {
    let (x, y) = (u / period, v / period);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (s(fx), s(fy));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = lattice(seed, ix, iy) * (1.0 - sx) + lattice(seed, ix + 1, iy) * sx;
    let b = lattice(seed, ix, iy + 1) * (1.0 - sx) + lattice(seed, ix + 1, iy + 1) * sx;
    a * (1.0 - sy) + b * sy
}

/// Colour of a surface at surface coordinates `(u, v)`: multi-octave value noise per channel
/// around a per-surface base colour.
fn texture(seed: u64, u: f64, v: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let cs = mix(seed.wrapping_add(c as u64 * 0x1000_0001));
        let base = 0.25 + 0.5 * lattice(cs, -7, 13);
        let mut acc = 0.0;
        let mut amp = 0.5;
        let mut norm = 0.0;
        for (k, period) in [16.0, 8.0, 4.0, 2.0].into_iter().enumerate() {
            acc += amp * value_noise(mix(cs ^ k as u64), u, v, period);
            norm += amp;
            amp *= 0.7;
        }
        *o = (0.5 * base + 0.5 * acc / norm).clamp(0.0, 1.0);
    }
    out
}

/// Nearest surface at column `x` of row `y` when the view is offset by `sign·d` (0 for the left
/// view, 1 for the right view where surfaces appear at `x_l - d`).
fn surface_at(spec: &SceneSpec, rows: &[Option<(usize, usize)>], x: usize, y: usize, right_view: bool) -> (u32, [f64; 3]) {
    let g = spec.ground_disparity(y);
    let shift = |d: u32| if right_view { d as i64 } else { 0 };
    let mut best_d = g;
    let mut best = (spec.texture_seed, (x as i64 + shift(g)) as f64, y as f64);
    for (b, r) in spec.boxes.iter().zip(rows) {
        let Some((top, bottom)) = *r else { continue };
        if y < top || y > bottom || b.disparity <= best_d {
            continue;
        }
        let xl = x as i64 + shift(b.disparity);
        if xl >= b.x0 as i64 && xl < (b.x0 + b.width) as i64 {
            best_d = b.disparity;
            best = (b.texture_seed, (xl - b.x0 as i64) as f64, (y - top) as f64);
        }
    }
    (best_d, texture(best.0, best.1, best.2))
}

/// Renders both views and ground truth of a validated scene.
pub fn generate<T: Scalar>(spec: &SceneSpec, rig: CameraRig, d_range: (f64, f64)) -> Result<StereoSample<T>> {
    spec.validate(d_range.0, d_range.1)?;
    let (h, w) = (spec.height, spec.width);
    let rows: Vec<_> = spec.boxes.iter().map(|b| spec.box_rows(b)).collect();
    let mut left = Tensor::zeros(vec![1, 3, h, w]);
    let mut right = Tensor::zeros(vec![1, 3, h, w]);
    let mut dl = Tensor::zeros(vec![1, 1, h, w]);
    let mut dr = Tensor::zeros(vec![1, 1, h, w]);
    for y in 0..h {
        for x in 0..w {
            for (img, disp, right_view) in [(&mut left, &mut dl, false), (&mut right, &mut dr, true)] {
                let (d, col) = surface_at(spec, &rows, x, y, right_view);
                disp.data_mut()[y * w + x] = T::from_u32(d).unwrap();
                for (c, v) in col.iter().enumerate() {
                    img.data_mut()[(c * h + y) * w + x] = T::lit(*v);
                }
            }
        }
    }
    // Visible iff the right view shows the same surface depth at the corresponding column.
    let mut validity = Tensor::ones(vec![1, 1, h, w]);
    for y in 0..h {
        for x in 0..w {
            let d = dl.data()[y * w + x];
            let xr = x as i64 - d.to_i64().unwrap();
            if xr >= 0 && dr.data()[y * w + xr as usize] != d {
                validity.data_mut()[y * w + x] = T::zero();
            }
        }
    }
    Ok(StereoSample { left, right, disparity: dl, disparity_right: dr, validity, rig })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0000,
            Split::Val => 0x7661_6c00_0000_0000,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Seed of scene `index` in a split; different splits draw from unrelated streams.
pub fn scene_seed(seed: u64, split: Split, index: usize) -> u64 {
    mix(mix(seed ^ split.tag()) ^ mix(index as u64))
}

/// `(id, scene seed, sample)` in a fixed order.
pub fn dataset<T: Scalar>(
    cfg: &SceneConfig,
    count: usize,
    seed: u64,
    split: Split,
    d_range: (f64, f64),
) -> impl Iterator<Item = Result<(String, u64, StereoSample<T>)>> + '_ {
    (0..count).map(move |i| {
        let s = scene_seed(seed, split, i);
        let spec = cfg.sample_spec(s);
        let sample = generate(&spec, cfg.rig()?, d_range)?;
        Ok((format!("{}_{i:05}", split.name()), s, sample))
    })
}

/// 8-bit RGB preview of an image tensor `1×3×H×W` in `[0, 1]`.
pub fn save_png_rgb<T: Scalar>(path: impl AsRef<Path>, img: &Tensor<T>) -> Result<()> {
    let (_, c, h, w) = img.dims4()?;
    if c != 3 {
        return Err(invalid("PNG preview expects three channels"));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|ch| {
                (img.at4(0, ch, y, x).to_f64().unwrap().clamp(0.0, 1.0) * 255.0).round() as u8
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path.as_ref())?;
    Ok(())
}

/// Reads an 8- or 16-bit PNG (any colour layout) as a `1×3×H×W` tensor in `[0, 1]`.
pub fn load_png_rgb<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let img = image::open(path.as_ref())?.to_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Tensor::from_fn(vec![1, 3, h, w], |i| {
        let c = i / (h * w);
        T::lit(raw[(i % (h * w)) * 3 + c] as f64)
    }))
}

/// Writes `count` samples of a split into `dir`: one archive and two PNG previews per sample,
/// plus `manifest.txt` listing `id seed` lines.
pub fn write_split(cfg: &SceneConfig, dir: &Path, count: usize, seed: u64, split: Split, d_range: (f64, f64)) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = fs::File::create(dir.join("manifest.txt"))?;
    for item in dataset::<f32>(cfg, count, seed, split, d_range) {
        let (id, s, sample) = item?;
        sample.to_archive(&id, s).save(dir.join(format!("{id}.tioc")))?;
        save_png_rgb(dir.join(format!("{id}_left.png")), &sample.left)?;
        save_png_rgb(dir.join(format!("{id}_right.png")), &sample.right)?;
        writeln!(manifest, "{id} {s}")?;
    }
    Ok(())
}

/// Reads the samples listed in `dir/manifest.txt`, in manifest order.
pub fn read_split<T: Scalar>(dir: &Path) -> Result<Vec<(String, StereoSample<T>)>> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    manifest
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let id = l.split_whitespace().next().unwrap_or_default().to_string();
            let path: PathBuf = dir.join(format!("{id}.tioc"));
            let a = Archive::<T>::load(&path)?;
            Ok((id, StereoSample::from_archive(&a)?))
        })
        .collect()
}
