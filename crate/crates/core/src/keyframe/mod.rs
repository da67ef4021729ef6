//! Keyframe selection over a short backward window of frames: Laplacian
//! sharpness scoring and embedding-centroid policies, plus blur statistics.

mod manifest;
mod pnm;

pub use manifest::{load_windows, parse_frame_manifest};
pub use pnm::{encode_pgm, parse_pnm, read_pnm, write_pgm};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default window length.
pub const WINDOW: usize = 5;
/// Default sharpness threshold.
pub const DEFAULT_THRESHOLD: f64 = 100.0;

/// Grayscale frame with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayFrame {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width < 3 || height < 3 {
            return Err(Error::Frame(format!(
                "frame {width}x{height} is smaller than 3x3"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Frame(format!(
                "frame {width}x{height} has {} intensities",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Frame(format!("intensity {v} outside [0,1]")));
        }
        Ok(GrayFrame {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.data
    }
}

/// Variance of the 4-neighbour Laplacian response over the frame interior,
/// measured on intensities scaled to `[0, 255]`.
pub fn laplacian_variance(f: &GrayFrame) -> f64 {
    let (w, h) = (f.width, f.height);
    let n = ((w - 2) * (h - 2)) as f64;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let r = 255.0
                * (f.get(x - 1, y) + f.get(x + 1, y) + f.get(x, y - 1) + f.get(x, y + 1)
                    - 4.0 * f.get(x, y));
            sum += r;
            sq += r * r;
        }
    }
    let mean = sum / n;
    (sq / n - mean * mean).max(0.0)
}

/// Frames oldest first, with optional one-row-per-frame embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameWindow {
    pub frames: Vec<GrayFrame>,
    pub embeddings: Option<Tensor>,
}

impl FrameWindow {
    pub fn new(frames: Vec<GrayFrame>, embeddings: Option<Tensor>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Frame("empty frame window".into()));
        }
        if let Some(e) = &embeddings {
            if e.rows() != frames.len() {
                return Err(Error::Frame(format!(
                    "{} embeddings for {} frames",
                    e.rows(),
                    frames.len()
                )));
            }
        }
        Ok(FrameWindow { frames, embeddings })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn newest(&self) -> usize {
        self.frames.len() - 1
    }

    pub fn variances(&self) -> Vec<f64> {
        self.frames.iter().map(laplacian_variance).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlurChoice {
    pub index: usize,
    /// No frame cleared the threshold and the newest frame was used.
    pub too_blurry: bool,
}

/// Backward scan from the newest frame for the first variance above
/// `threshold`. `variances` is ordered oldest first and must be non-empty.
pub fn select_blur_variances(variances: &[f64], threshold: f64) -> BlurChoice {
    assert!(!variances.is_empty(), "empty window");
    let newest = variances.len() - 1;
    match (0..=newest).rev().find(|&i| variances[i] > threshold) {
        Some(index) => BlurChoice {
            index,
            too_blurry: false,
        },
        None => BlurChoice {
            index: newest,
            too_blurry: true,
        },
    }
}

pub fn select_blur(window: &FrameWindow, threshold: f64) -> BlurChoice {
    select_blur_variances(&window.variances(), threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentroidMetric {
    L2,
    Cosine,
}

fn near_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

/// Index of the row closest to the row-mean, ties going to the newest row.
pub fn select_centroid(embeddings: &Tensor, metric: CentroidMetric) -> Result<usize> {
    let (n, d) = embeddings.shape();
    if n == 0 {
        return Err(Error::Metric("no embeddings to select from".into()));
    }
    let mut centroid = vec![0.0; d];
    for r in 0..n {
        for (c, v) in centroid.iter_mut().zip(embeddings.row(r)) {
            *c += v / n as f64;
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cnorm = norm(&centroid);
    if metric == CentroidMetric::Cosine && cnorm == 0.0 {
        return Err(Error::Metric("cosine distance to a zero centroid".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for r in 0..n {
        let row = embeddings.row(r);
        let dist = match metric {
            CentroidMetric::L2 => row
                .iter()
                .zip(&centroid)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
            CentroidMetric::Cosine => {
                let rn = norm(row);
                if rn == 0.0 {
                    return Err(Error::Metric(format!(
                        "cosine distance undefined for zero embedding at frame {r}"
                    )));
                }
                let dot: f64 = row.iter().zip(&centroid).map(|(a, b)| a * b).sum();
                1.0 - dot / (rn * cnorm)
            }
        };
        match best {
            Some((_, b)) if dist > b && !near_equal(dist, b) => {}
            _ => best = Some((r, dist)),
        }
    }
    Ok(best.expect("non-empty").0)
}

/// Which frame of the window feeds the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KeyframePolicy {
    /// Always the newest frame.
    None,
    Cosine,
    L2,
    Blur,
}

impl KeyframePolicy {
    pub const ALL: [KeyframePolicy; 4] = [
        KeyframePolicy::None,
        KeyframePolicy::Cosine,
        KeyframePolicy::L2,
        KeyframePolicy::Blur,
    ];

    pub fn key(self) -> &'static str {
        match self {
            KeyframePolicy::None => "none",
            KeyframePolicy::Cosine => "cosine",
            KeyframePolicy::L2 => "l2",
            KeyframePolicy::Blur => "blur",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            KeyframePolicy::None => "None",
            KeyframePolicy::Cosine => "Cos",
            KeyframePolicy::L2 => "L2",
            KeyframePolicy::Blur => "Blur",
        }
    }

    pub fn from_key(s: &str) -> Option<Self> {
        match s {
            "none" => Some(KeyframePolicy::None),
            "cosine" | "cos" => Some(KeyframePolicy::Cosine),
            "l2" => Some(KeyframePolicy::L2),
            "blur" => Some(KeyframePolicy::Blur),
            _ => None,
        }
    }

    /// Selects from precomputed variances and embeddings, both oldest first.
    pub fn select_from(self, variances: &[f64], embeddings: Option<&Tensor>, threshold: f64) -> Result<usize> {
        let newest = variances.len().checked_sub(1).ok_or_else(|| Error::Frame("empty frame window".into()))?;
        let need = || embeddings.ok_or_else(|| Error::Metric("centroid policy needs frame embeddings".into()));
        match self {
            KeyframePolicy::None => Ok(newest),
            KeyframePolicy::Blur => Ok(select_blur_variances(variances, threshold).index),
            KeyframePolicy::L2 => select_centroid(need()?, CentroidMetric::L2),
            KeyframePolicy::Cosine => select_centroid(need()?, CentroidMetric::Cosine),
        }
    }

    pub fn select(self, window: &FrameWindow, threshold: f64) -> Result<usize> {
        self.select_from(&window.variances(), window.embeddings.as_ref(), threshold)
    }
}

/// Sharpness statistics over a stream of windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlurReport {
    pub windows: usize,
    pub threshold: f64,
    /// Statistics of the newest frame's Laplacian variance.
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub percent_updated: f64,
    pub percent_too_blurry: f64,
}

/// Aggregates per-window variances (each oldest first).
pub fn blur_stats_from_variances<'a>(
    windows: impl IntoIterator<Item = &'a [f64]>,
    threshold: f64,
) -> Result<BlurReport> {
    let mut count = 0usize;
    let (mut sum, mut sq) = (0.0, 0.0);
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut updated, mut blurry) = (0usize, 0usize);
    for v in windows {
        if v.is_empty() {
            return Err(Error::Frame("empty frame window".into()));
        }
        let newest = v[v.len() - 1];
        count += 1;
        sum += newest;
        sq += newest * newest;
        min = min.min(newest);
        max = max.max(newest);
        let choice = select_blur_variances(v, threshold);
        if choice.too_blurry {
            blurry += 1;
        } else if choice.index != v.len() - 1 {
            updated += 1;
        }
    }
    if count == 0 {
        return Err(Error::data("blur statistics need at least one window"));
    }
    let n = count as f64;
    let mean = sum / n;
    let pct = |k: usize| 100.0 * k as f64 / n;
    Ok(BlurReport {
        windows: count,
        threshold,
        mean: mean.clamp(min, max),
        std: (sq / n - mean * mean).max(0.0).sqrt(),
        min,
        max,
        percent_updated: pct(updated),
        percent_too_blurry: pct(blurry),
    })
}

pub fn blur_stats(windows: &[FrameWindow], threshold: f64) -> Result<BlurReport> {
    let vars: Vec<Vec<f64>> = windows.iter().map(FrameWindow::variances).collect();
    blur_stats_from_variances(vars.iter().map(Vec::as_slice), threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn halves() -> GrayFrame {
        let mut d = vec![0.0; 16];
        for y in 0..4 {
            d[y * 4 + 2] = 1.0;
            d[y * 4 + 3] = 1.0;
        }
        GrayFrame::new(4, 4, d).unwrap()
    }

    #[test]
    fn constant_frame_has_zero_variance() {
        assert_eq!(laplacian_variance(&GrayFrame::constant(5, 4, 0.3).unwrap()), 0.0);
    }

    #[test]
    fn half_split_frame_hand_value() {
        // interior responses are +255 (x=1) and -255 (x=2) on both rows
        assert!((laplacian_variance(&halves()) - 65025.0).abs() < 1e-9);
    }

    #[test]
    fn scaling_intensity_scales_variance_quadratically() {
        let f = halves();
        let scaled = GrayFrame::new(4, 4, f.pixels().iter().map(|v| v * 0.5).collect()).unwrap();
        assert!((laplacian_variance(&scaled) - 0.25 * laplacian_variance(&f)).abs() < 1e-9);
    }

    #[test]
    fn tiny_frames_are_rejected() {
        assert!(matches!(GrayFrame::constant(2, 5, 0.0), Err(Error::Frame(_))));
    }

    #[test]
    fn blur_scan_examples() {
        let c = select_blur_variances(&[40.0, 250.0, 80.0, 45.0, 60.0], 100.0);
        assert_eq!(c, BlurChoice { index: 1, too_blurry: false });
        let c = select_blur_variances(&[10.0, 20.0, 300.0], 100.0);
        assert_eq!(c.index, 2);
        let c = select_blur_variances(&[10.0, 20.0, 30.0], 100.0);
        assert_eq!(c, BlurChoice { index: 2, too_blurry: true });
    }

    #[test]
    fn centroid_examples() {
        let e = Tensor::from_rows(&[&[0.0, 0.0], &[0.0, 0.0], &[3.0, 0.0]]);
        assert_eq!(select_centroid(&e, CentroidMetric::L2).unwrap(), 1);
        let e = Tensor::from_rows(&[&[1.0, 0.0], &[2.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(select_centroid(&e, CentroidMetric::Cosine).unwrap(), 1);
        assert_eq!(select_centroid(&e, CentroidMetric::L2).unwrap(), 0);
        let single = Tensor::from_rows(&[&[0.3, 0.1]]);
        assert_eq!(select_centroid(&single, CentroidMetric::Cosine).unwrap(), 0);
        let z = Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 0.0]]);
        assert!(matches!(select_centroid(&z, CentroidMetric::Cosine), Err(Error::Metric(_))));
    }

    #[test]
    fn report_regimes() {
        let sharp = vec![vec![10.0, 300.0]; 4];
        let r = blur_stats_from_variances(sharp.iter().map(Vec::as_slice), 100.0).unwrap();
        assert_eq!((r.percent_updated, r.percent_too_blurry), (0.0, 0.0));
        let blurry = vec![vec![10.0, 30.0]; 3];
        let r = blur_stats_from_variances(blurry.iter().map(Vec::as_slice), 100.0).unwrap();
        assert_eq!(r.percent_too_blurry, 100.0);
        assert!(r.min <= r.mean && r.mean <= r.max);
        assert!(blur_stats_from_variances(std::iter::empty(), 100.0).is_err());
    }

    #[test]
    fn policy_keys_and_labels() {
        let labels: Vec<&str> = KeyframePolicy::ALL.iter().map(|p| p.label()).collect();
        assert_eq!(labels, ["None", "Cos", "L2", "Blur"]);
        for p in KeyframePolicy::ALL {
            assert_eq!(KeyframePolicy::from_key(p.key()), Some(p));
        }
    }
}
