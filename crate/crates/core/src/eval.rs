//! Depth and disparity metrics, median scaling and the CSV report format.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::StereoSample;
use crate::disparity::disparity_to_depth_tensor;
use crate::error::{invalid, Error, Result};
use crate::network::{Branch, Network};
use crate::tensor::io::save_tensor;
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Mono,
    Stereo,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Mono => "mono",
            Mode::Stereo => "stereo",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mono" => Ok(Mode::Mono),
            "stereo" => Ok(Mode::Stereo),
            other => Err(invalid(format!("unknown mode {other:?}"))),
        }
    }
}

/// Outlier rule of the D1 metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum D1Rule {
    /// `|e| > 3 ∨ |e|/d > 0.05`.
    #[default]
    Either,
    /// `|e| > 3 ∧ |e|/d > 0.05`, the usual benchmark definition.
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub log_rmse: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub epe: f64,
    pub d1: f64,
    pub n_pixels: u64,
}

/// Depth evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthEval {
    /// Predictions are clamped to `[min_depth, cap]`.
    pub cap: f64,
    pub min_depth: f64,
    pub median_scale: bool,
}

impl Default for DepthEval {
    fn default() -> Self {
        Self { cap: 80.0, min_depth: 1e-3, median_scale: true }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn pairs<T: Scalar>(op: &'static str, pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Vec<(f64, f64)>> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch { op, lhs: pred.shape().to_vec(), rhs: gt.shape().to_vec() });
    }
    let v: Vec<(f64, f64)> = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p.to_f64().unwrap_or(f64::NAN), g.to_f64().unwrap_or(f64::NAN)))
        .filter(|&(_, g)| g > 0.0 && g.is_finite())
        .collect();
    if v.is_empty() {
        return Err(Error::Empty { op });
    }
    if v.iter().any(|(p, _)| !p.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(v)
}

/// Depth part of the report; `epe` and `d1` are left at zero. Pixels with `gt = 0` are ignored.
pub fn depth_metrics<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, opts: &DepthEval) -> Result<MetricReport> {
    let v = pairs("depth_metrics", pred, gt)?;
    let scale = if opts.median_scale {
        let mp = median(v.iter().map(|p| p.0).collect());
        if !(mp > 0.0) {
            return Err(invalid("median scaling needs a positive prediction median"));
        }
        median(v.iter().map(|p| p.1).collect()) / mp
    } else {
        1.0
    };
    let n = v.len() as f64;
    let mut r = MetricReport { n_pixels: v.len() as u64, ..Default::default() };
    let (mut se, mut sle) = (0.0, 0.0);
    for &(p, g) in &v {
        let p = (p * scale).clamp(opts.min_depth, opts.cap);
        let e = p - g;
        r.abs_rel += e.abs() / g;
        r.sq_rel += e * e / g;
        se += e * e;
        sle += (p.ln() - g.ln()).powi(2);
        let ratio = (p / g).max(g / p);
        r.a1 += (ratio < 1.25) as u8 as f64;
        r.a2 += (ratio < 1.25f64.powi(2)) as u8 as f64;
        r.a3 += (ratio < 1.25f64.powi(3)) as u8 as f64;
    }
    r.abs_rel /= n;
    r.sq_rel /= n;
    r.rmse = (se / n).sqrt();
    r.log_rmse = (sle / n).sqrt();
    r.a1 /= n;
    r.a2 /= n;
    r.a3 /= n;
    Ok(r)
}

/// `(epe, d1)` over pixels with positive ground truth.
pub fn disparity_metrics<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, rule: D1Rule) -> Result<(f64, f64)> {
    let v = pairs("disparity_metrics", pred, gt)?;
    let (mut epe, mut bad) = (0.0, 0.0);
    for &(p, g) in &v {
        let e = (p - g).abs();
        epe += e;
        let (abs, rel) = (e > 3.0, e / g > 0.05);
        let outlier = match rule {
            D1Rule::Either => abs || rel,
            D1Rule::Both => abs && rel,
        };
        bad += outlier as u8 as f64;
    }
    let n = v.len() as f64;
    Ok((epe / n, bad / n))
}

/// Settings of a full evaluation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub depth: DepthEval,
    /// Median scaling of binocular predictions (monocular ones follow `depth.median_scale`).
    pub stereo_median_scale: bool,
    pub d1: D1Rule,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { depth: DepthEval::default(), stereo_median_scale: false, d1: D1Rule::default() }
    }
}

/// Disparity prediction of either path for one sample.
pub fn predict<T: Scalar>(net: &Network<T>, sample: &StereoSample<T>, mode: Mode, branch: Branch) -> Result<Tensor<T>> {
    match mode {
        Mode::Mono => net.predict_mono(&sample.left, branch),
        Mode::Stereo => net.predict_stereo(&sample.left, &sample.right),
    }
}

/// Full report of one predicted disparity map against a sample's ground truth.
pub fn evaluate_disparity<T: Scalar>(disp: &Tensor<T>, sample: &StereoSample<T>, mode: Mode, opts: &EvalOptions) -> Result<MetricReport> {
    let depth = disparity_to_depth_tensor(disp, &sample.rig)?;
    let mut d = opts.depth;
    if mode == Mode::Stereo {
        d.median_scale = opts.stereo_median_scale;
    }
    let mut r = depth_metrics(&depth, &sample.depth()?, &d)?;
    (r.epe, r.d1) = disparity_metrics(disp, &sample.disparity, opts.d1)?;
    Ok(r)
}

/// Mean of per-sample reports; `n_pixels` is summed.
pub fn mean_report(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::Empty { op: "mean_report" });
    }
    let n = reports.len() as f64;
    let mut m = MetricReport::default();
    for r in reports {
        m.abs_rel += r.abs_rel / n;
        m.sq_rel += r.sq_rel / n;
        m.rmse += r.rmse / n;
        m.log_rmse += r.log_rmse / n;
        m.a1 += r.a1 / n;
        m.a2 += r.a2 / n;
        m.a3 += r.a3 / n;
        m.epe += r.epe / n;
        m.d1 += r.d1 / n;
        m.n_pixels += r.n_pixels;
    }
    Ok(m)
}

/// Evaluates one path over a set of samples; returns per-sample reports in input order.
pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    samples: &[(String, StereoSample<T>)],
    mode: Mode,
    branch: Branch,
    opts: &EvalOptions,
) -> Result<Vec<MetricRow>> {
    samples
        .iter()
        .map(|(id, s)| {
            let disp = predict(net, s, mode, branch)?;
            Ok(MetricRow::new(id.clone(), mode, evaluate_disparity(&disp, s, mode, opts)?))
        })
        .collect()
}

/// One CSV line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sample_id: String,
    pub mode: Mode,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub log_rmse: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub epe: f64,
    pub d1: f64,
    pub n_pixels: u64,
}

impl MetricRow {
    pub fn new(sample_id: String, mode: Mode, r: MetricReport) -> Self {
        Self {
            sample_id,
            mode,
            abs_rel: r.abs_rel,
            sq_rel: r.sq_rel,
            rmse: r.rmse,
            log_rmse: r.log_rmse,
            a1: r.a1,
            a2: r.a2,
            a3: r.a3,
            epe: r.epe,
            d1: r.d1,
            n_pixels: r.n_pixels,
        }
    }

    pub fn report(&self) -> MetricReport {
        MetricReport {
            abs_rel: self.abs_rel,
            sq_rel: self.sq_rel,
            rmse: self.rmse,
            log_rmse: self.log_rmse,
            a1: self.a1,
            a2: self.a2,
            a3: self.a3,
            epe: self.epe,
            d1: self.d1,
            n_pixels: self.n_pixels,
        }
    }
}

pub fn write_csv(w: impl Write, rows: &[MetricRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv(r: impl Read) -> Result<Vec<MetricRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// 16-bit grayscale PNG of a `1×1×H×W` depth map, `[0, cap]` mapped linearly onto `[0, 65535]`.
pub fn save_depth_png16<T: Scalar>(path: impl AsRef<Path>, depth: &Tensor<T>, cap: f64) -> Result<()> {
    let (n, c, h, w) = depth.dims4()?;
    if n != 1 || c != 1 {
        return Err(invalid("depth PNG expects a single 1×1×H×W map"));
    }
    if !(cap > 0.0) {
        return Err(invalid("depth cap must be positive"));
    }
    let px: Vec<u16> = depth
        .data()
        .iter()
        .map(|&d| (d.to_f64().unwrap_or(0.0).clamp(0.0, cap) / cap * 65535.0).round() as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w as u32, h as u32, px)
        .ok_or_else(|| invalid("depth buffer size"))?;
    buf.save(path.as_ref())?;
    Ok(())
}

/// Writes `stem.tiot` (raw container) and `stem.png` (16-bit preview) for a depth map.
pub fn export_depth<T: Scalar>(stem: impl AsRef<Path>, depth: &Tensor<T>, cap: f64) -> Result<()> {
    let stem = stem.as_ref();
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_tensor(stem.with_extension("tiot"), depth)?;
    save_depth_png16(stem.with_extension("png"), depth, cap)
}
