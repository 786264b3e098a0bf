//! Class activation maps: computation from features and head weights,
//! normalization, multi-scale and multi-layer fusion, thresholding, and the
//! `.cam` container format.
//!
//! Container layout (little-endian):
//!
//! ```text
//! b"CAM1" | u32 K | u32 H | u32 W | u8 normalized | K*H*W f32, row-major
//! ```

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::backbone::{images_to_tensor, ClassifierModel};
use crate::error::{Error, Result};
use crate::grid;

pub const CAM_MAGIC: &[u8; 4] = b"CAM1";

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    /// `K×H×W`.
    pub data: Array3<f32>,
    pub normalized: bool,
    pub class_ids: Vec<usize>,
}

impl ActivationMap {
    pub fn new(data: Array3<f32>, normalized: bool) -> Self {
        let k = data.dim().0;
        Self {
            data,
            normalized,
            class_ids: (0..k).collect(),
        }
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }

    /// Per-pixel maximum over classes.
    pub fn max_over_classes(&self) -> Array2<f32> {
        self.data
            .map_axis(Axis(0), |v| v.iter().copied().fold(f32::NEG_INFINITY, f32::max))
    }
}

/// Binary label map, 0 = background, 1 = smoke.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoMask {
    labels: Array2<u8>,
}

impl PseudoMask {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        if labels.iter().any(|&v| v > 1) {
            return Err(Error::invalid("pseudo-mask labels must be 0 or 1"));
        }
        Ok(Self { labels })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            labels: Array2::zeros((h, w)),
        }
    }

    pub fn labels(&self) -> ArrayView2<'_, u8> {
        self.labels.view()
    }

    pub fn into_labels(self) -> Array2<u8> {
        self.labels
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn count(&self) -> usize {
        self.labels.iter().filter(|&&v| v == 1).count()
    }
}

/// `M_c(x, y) = Σ_i w[c, i] · f[i, y, x]`.
pub fn compute_cam(feature: ArrayView3<f32>, head_weights: ArrayView2<f32>) -> Result<ActivationMap> {
    let (c, h, w) = feature.dim();
    let (k, wc) = head_weights.dim();
    if c != wc {
        return Err(Error::shape(format!(
            "feature has {c} channels but head weights expect {wc}"
        )));
    }
    let flat = feature
        .to_shape((c, h * w))
        .map_err(|e| Error::shape(e.to_string()))?;
    let cam = head_weights
        .dot(&flat)
        .into_shape_with_order((k, h, w))
        .map_err(|e| Error::shape(e.to_string()))?;
    Ok(ActivationMap::new(cam, false))
}

/// Per class: ReLU, then divide by the class maximum. All-zero classes stay
/// zero.
pub fn normalize_cam(cam: &ActivationMap) -> ActivationMap {
    let mut data = cam.data.mapv(|v| v.max(0.0));
    for mut plane in data.axis_iter_mut(Axis(0)) {
        let max = plane.iter().copied().fold(0.0f32, f32::max);
        if max > 0.0 {
            plane.mapv_inplace(|v| v / max);
        }
    }
    ActivationMap {
        data,
        normalized: true,
        class_ids: cam.class_ids.clone(),
    }
}

fn scaled_side(side: usize, scale: f64, multiple: usize) -> usize {
    let units = ((side as f64 * scale) / multiple as f64).round() as usize;
    units.max(1) * multiple
}

fn forward_taps(
    model: &ClassifierModel,
    image: ArrayView3<f32>,
    taps: &[isize],
) -> Result<Vec<Array3<f32>>> {
    let img = image.to_owned();
    let x = images_to_tensor(&[&img], model.device())?;
    let out = model.forward_with_features(&x, taps)?;
    taps.iter()
        .map(|&t| Ok(out.feature_map(t, 0)?.data))
        .collect()
}

/// Normalized CAM for one input scale, resized back to the image resolution.
/// The image is `H×W×3`, already normalized; scaled sides are rounded to the
/// model's size multiple.
pub fn cam_at_scale(model: &ClassifierModel, image: ArrayView3<f32>, scale: f64) -> Result<ActivationMap> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("scale must be positive, got {scale}")));
    }
    let (h, w, _) = image.dim();
    let m = model.config().size_multiple();
    let (sh, sw) = (scaled_side(h, scale, m), scaled_side(w, scale, m));
    let input = if (sh, sw) == (h, w) {
        image.to_owned()
    } else {
        grid::resize_hwc(image, (sh, sw))?
    };
    let feature = forward_taps(model, input.view(), &[-1])?.remove(0);
    let head = model.head_weights()?;
    let cam = normalize_cam(&compute_cam(feature.view(), head.view())?);
    let resized = grid::resize_chw(cam.data.view(), (h, w))?;
    Ok(normalize_cam(&ActivationMap::new(resized, false)))
}

/// Plain CAM of the final tap at the native resolution.
pub fn single_scale_cam(model: &ClassifierModel, image: ArrayView3<f32>) -> Result<ActivationMap> {
    cam_at_scale(model, image, 1.0)
}

fn mean_normalized(maps: Vec<ActivationMap>) -> ActivationMap {
    let n = maps.len() as f32;
    let mut iter = maps.into_iter();
    let first = iter.next().expect("at least one map");
    let class_ids = first.class_ids.clone();
    let sum = iter.fold(first.data, |acc, m| acc + &m.data);
    normalize_cam(&ActivationMap {
        data: sum / n,
        normalized: false,
        class_ids,
    })
}

/// Per-scale normalized CAMs at image resolution, averaged, renormalized.
pub fn multiscale_cam(model: &ClassifierModel, image: ArrayView3<f32>, scales: &[f64]) -> Result<ActivationMap> {
    if scales.is_empty() {
        return Err(Error::invalid("multiscale_cam needs at least one scale"));
    }
    let maps = scales
        .iter()
        .map(|&s| cam_at_scale(model, image, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_normalized(maps))
}

/// Fuse CAMs from several blocks. Layers whose channel count matches the head
/// use the shared head; others fall back to the channel-mean activation,
/// repeated for every class.
pub fn layer_fusion_cam(model: &ClassifierModel, image: ArrayView3<f32>, layers: &[isize]) -> Result<ActivationMap> {
    if layers.is_empty() {
        return Err(Error::invalid("layer_fusion_cam needs at least one layer"));
    }
    for &l in layers {
        model.resolve_tap(l)?;
    }
    let (h, w, _) = image.dim();
    let head = model.head_weights()?;
    let k = head.dim().0;
    let features = forward_taps(model, image, layers)?;
    let maps = features
        .into_iter()
        .map(|f| {
            let raw = if f.dim().0 == head.dim().1 {
                compute_cam(f.view(), head.view())?
            } else {
                let proxy = f.mean_axis(Axis(0)).expect("channels >= 1");
                let stacked = ndarray::stack(Axis(0), &vec![proxy.view(); k])
                    .map_err(|e| Error::shape(e.to_string()))?;
                ActivationMap::new(stacked, false)
            };
            let cam = normalize_cam(&raw);
            let resized = grid::resize_chw(cam.data.view(), (h, w))?;
            Ok(normalize_cam(&ActivationMap::new(resized, false)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_normalized(maps))
}

pub const DEFAULT_BG_THRESHOLD: f32 = 0.3;
pub const DEFAULT_SCALES: [f64; 4] = [0.5, 1.0, 1.5, 2.0];
/// Default fusion layers for weak seeds.
pub const DEFAULT_FUSION_LAYERS: [isize; 3] = [-5, -4, -2];

/// Foreground where the max-class activation is at least `bg_threshold`.
pub fn cam_to_mask(cam: &ActivationMap, bg_threshold: f32) -> Result<PseudoMask> {
    if !cam.normalized {
        return Err(Error::invalid("cam_to_mask requires a normalized CAM"));
    }
    let labels = cam.max_over_classes().mapv(|v| u8::from(v >= bg_threshold));
    Ok(PseudoMask { labels })
}

pub fn encode_cam(cam: &ActivationMap) -> Vec<u8> {
    let (k, h, w) = cam.data.dim();
    let mut out = Vec::with_capacity(17 + 4 * k * h * w);
    out.extend_from_slice(CAM_MAGIC);
    for d in [k, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(u8::from(cam.normalized));
    for v in cam.data.as_standard_layout().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_cam(bytes: &[u8]) -> std::result::Result<ActivationMap, String> {
    if bytes.len() < 17 || &bytes[..4] != CAM_MAGIC {
        return Err("missing CAM1 header".into());
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (k, h, w) = (dim(0), dim(1), dim(2));
    let normalized = match bytes[16] {
        0 => false,
        1 => true,
        f => return Err(format!("normalized flag must be 0 or 1, got {f}")),
    };
    let n = k
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or("dimension overflow")?;
    let body = &bytes[17..];
    if body.len() != 4 * n {
        return Err(format!("expected {} payload bytes, found {}", 4 * n, body.len()));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = Array3::from_shape_vec((k, h, w), values).map_err(|e| e.to_string())?;
    Ok(ActivationMap::new(data, normalized))
}

pub fn write_cam(path: impl AsRef<Path>, cam: &ActivationMap) -> Result<()> {
    crate::io::write_atomic(path, &encode_cam(cam))
}

pub fn read_cam(path: impl AsRef<Path>) -> Result<ActivationMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cam(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn one_hot_head_selects_channel() {
        let f = Array3::from_shape_fn((3, 2, 2), |(c, y, x)| (c * 10 + y * 2 + x) as f32);
        let w = array![[0.0f32, 1.0, 0.0]];
        let cam = compute_cam(f.view(), w.view()).unwrap();
        assert_eq!(cam.data.index_axis(Axis(0), 0), f.index_axis(Axis(0), 1));
        assert!(!cam.normalized);
    }

    #[test]
    fn zero_features_zero_cam() {
        let f = Array3::<f32>::zeros((4, 3, 3));
        let w = array![[1.0f32, -2.0, 3.0, 0.5]];
        assert!(compute_cam(f.view(), w.view()).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_dot_product() {
        let f = Array3::from_shape_vec((2, 1, 1), vec![1.0f32, 2.0]).unwrap();
        let w = array![[0.5f32, 0.5]];
        assert_eq!(compute_cam(f.view(), w.view()).unwrap().data[[0, 0, 0]], 1.5);
    }

    #[test]
    fn channel_mismatch() {
        let f = Array3::<f32>::zeros((3, 1, 1));
        assert!(compute_cam(f.view(), array![[1.0f32, 2.0]].view()).is_err());
    }

    #[test]
    fn normalize_examples() {
        let fixed = ActivationMap::new(array![[[0.0f32, 0.25], [1.0, 0.5]]], true);
        assert_eq!(normalize_cam(&fixed).data, fixed.data);

        let neg = ActivationMap::new(array![[[-1.0f32, -0.5]]], false);
        assert!(normalize_cam(&neg).data.iter().all(|&v| v == 0.0));

        let m = ActivationMap::new(array![[[2.0f32, 4.0]]], false);
        assert_eq!(normalize_cam(&m).data, array![[[0.5f32, 1.0]]]);
    }

    #[test]
    fn threshold_examples() {
        let zero = ActivationMap::new(Array3::zeros((1, 4, 4)), true);
        assert_eq!(cam_to_mask(&zero, DEFAULT_BG_THRESHOLD).unwrap().count(), 0);
        let half = ActivationMap::new(Array3::from_elem((1, 4, 4), 0.5), true);
        assert_eq!(cam_to_mask(&half, 0.3).unwrap().count(), 16);
        // inclusive boundary
        let edge = ActivationMap::new(Array3::from_elem((1, 1, 1), 0.3), true);
        assert_eq!(cam_to_mask(&edge, 0.3).unwrap().count(), 1);
        let raw = ActivationMap::new(Array3::zeros((1, 1, 1)), false);
        assert!(cam_to_mask(&raw, 0.3).is_err());
    }

    #[test]
    fn container_round_trip_and_layout() {
        let cam = ActivationMap::new(Array3::from_shape_fn((2, 3, 4), |(k, y, x)| (k * 12 + y * 4 + x) as f32 / 7.0), true);
        let bytes = encode_cam(&cam);
        assert_eq!(&bytes[..4], b"CAM1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &4u32.to_le_bytes());
        assert_eq!(bytes[16], 1);
        assert_eq!(&bytes[17..21], &0f32.to_le_bytes());
        // row-major: second value is (k=0, y=0, x=1)
        assert_eq!(&bytes[21..25], &(1.0f32 / 7.0).to_le_bytes());
        assert_eq!(bytes.len(), 17 + 4 * 24);
        assert_eq!(decode_cam(&bytes).unwrap(), cam);
        assert!(decode_cam(&bytes[..30]).is_err());
        assert!(decode_cam(b"CAM2xxxxxxxxxxxxxxxxxx").is_err());
    }

    proptest! {
        #[test]
        fn cam_linear_in_weights(
            f in proptest::collection::vec(-3.0f32..3.0, 24),
            w in proptest::collection::vec(-2.0f32..2.0, 3),
            alpha in -5.0f32..5.0,
        ) {
            let f = Array3::from_shape_vec((3, 2, 4), f).unwrap();
            let w = Array2::from_shape_vec((1, 3), w).unwrap();
            let base = compute_cam(f.view(), w.view()).unwrap().data;
            let scaled = compute_cam(f.view(), (&w * alpha).view()).unwrap().data;
            for (a, b) in base.iter().zip(scaled.iter()) {
                let expect = a * alpha;
                prop_assert!((expect - b).abs() <= 1e-6 * expect.abs().max(1.0) * 10.0);
            }
        }

        #[test]
        fn normalization_keeps_peak(v in proptest::collection::vec(-1.0f32..5.0, 16)) {
            let cam = ActivationMap::new(Array3::from_shape_vec((1, 4, 4), v.clone()).unwrap(), false);
            let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            prop_assume!(max > 0.0);
            let norm = normalize_cam(&cam);
            let peaks_in: Vec<usize> = (0..16).filter(|&i| v[i] == max).collect();
            let peaks_out: Vec<usize> = (0..16).filter(|&i| norm.data.as_slice().unwrap()[i] == 1.0).collect();
            prop_assert_eq!(peaks_in, peaks_out);
            prop_assert!(norm.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn threshold_monotone(v in proptest::collection::vec(0.0f32..=1.0, 16), t1 in 0.0f32..1.0, t2 in 0.0f32..1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let cam = ActivationMap::new(Array3::from_shape_vec((1, 4, 4), v).unwrap(), true);
            let a = cam_to_mask(&cam, lo).unwrap();
            let b = cam_to_mask(&cam, hi).unwrap();
            for (x, y) in a.labels().iter().zip(b.labels().iter()) {
                prop_assert!(y <= x);
            }
        }
    }
}
