use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::cam::PseudoMask;
use crate::error::{Error, Result};

pub const DEFAULT_IOU_THRESHOLD: f32 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    And,
    Or,
    #[default]
    Copy,
}

/// A class-agnostic object mask from a proposal generator.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskProposal {
    mask: Array2<u8>,
    pub score: f32,
}

impl MaskProposal {
    /// Values are binarized (`!= 0`); an empty mask is rejected.
    pub fn new(mask: Array2<u8>, score: f32) -> Result<Self> {
        let mask = mask.mapv(|v| u8::from(v != 0));
        if mask.iter().all(|&v| v == 0) {
            return Err(Error::invalid("mask proposal is empty"));
        }
        Ok(Self { mask, score })
    }

    pub fn mask(&self) -> ArrayView2<'_, u8> {
        self.mask.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mask.dim()
    }
}

/// `|a ∩ b| / |a ∪ b|`, 0 when both are empty.
pub fn mask_iou(a: ArrayView2<u8>, b: ArrayView2<u8>) -> Result<f32> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("masks {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    Zip::from(&a).and(&b).for_each(|&x, &y| {
        let (x, y) = (x != 0, y != 0);
        inter += u64::from(x && y);
        union += u64::from(x || y);
    });
    Ok(if union == 0 {
        0.0
    } else {
        inter as f32 / union as f32
    })
}

/// Union of proposals whose IoU with `seed` is at least `iou_thresh`.
pub fn selected_union(seed: &PseudoMask, proposals: &[MaskProposal], iou_thresh: f32) -> Result<Array2<u8>> {
    let mut s = Array2::<u8>::zeros(seed.dim());
    for p in proposals {
        if mask_iou(p.mask(), seed.labels())? >= iou_thresh {
            Zip::from(&mut s).and(p.mask()).for_each(|o, &m| *o |= m);
        }
    }
    Ok(s)
}

/// Fuse a seed mask with the proposals that overlap it enough.
///
/// With no proposal selected, COPY and AND yield an empty mask and OR yields
/// the seed.
pub fn sam_enhance(
    seed: &PseudoMask,
    proposals: &[MaskProposal],
    iou_thresh: f32,
    strategy: FusionStrategy,
) -> Result<PseudoMask> {
    let s = selected_union(seed, proposals, iou_thresh)?;
    let out = match strategy {
        FusionStrategy::Copy => s,
        FusionStrategy::Or => Zip::from(&s).and(seed.labels()).map_collect(|&a, &b| a | b),
        FusionStrategy::And => Zip::from(&s).and(seed.labels()).map_collect(|&a, &b| a & b),
    };
    PseudoMask::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn iou_examples() {
        let a = array![[1u8, 1, 1, 1, 0, 0]];
        let b = array![[0u8, 0, 1, 1, 1, 1]];
        assert!((mask_iou(a.view(), b.view()).unwrap() - 1.0 / 3.0).abs() < 1e-6);
        assert_eq!(mask_iou(a.view(), a.view()).unwrap(), 1.0);
        let z = Array2::<u8>::zeros((1, 6));
        assert_eq!(mask_iou(z.view(), z.view()).unwrap(), 0.0);
        let c = array![[0u8, 0, 0, 0, 1, 1]];
        assert_eq!(mask_iou(array![[1u8, 1, 0, 0, 0, 0]].view(), c.view()).unwrap(), 0.0);
    }

    #[test]
    fn empty_proposal_rejected() {
        assert!(MaskProposal::new(Array2::zeros((2, 2)), 1.0).is_err());
    }

    #[test]
    fn seed_equal_to_proposal_is_fixed_point() {
        let m = array![[0u8, 1, 1], [0, 1, 0]];
        let seed = PseudoMask::new(m.clone()).unwrap();
        let props = vec![MaskProposal::new(m.clone(), 0.9).unwrap()];
        for s in [FusionStrategy::And, FusionStrategy::Or, FusionStrategy::Copy] {
            assert_eq!(sam_enhance(&seed, &props, 0.3, s).unwrap().labels(), m.view());
        }
    }

    #[test]
    fn nothing_selected() {
        let seed = PseudoMask::new(array![[1u8, 0], [0, 0]]).unwrap();
        let props = vec![MaskProposal::new(array![[0u8, 0], [0, 1]], 1.0).unwrap()];
        let copy = sam_enhance(&seed, &props, 0.3, FusionStrategy::Copy).unwrap();
        assert_eq!(copy.count(), 0);
        let or = sam_enhance(&seed, &props, 0.3, FusionStrategy::Or).unwrap();
        assert_eq!(or, seed);
        assert_eq!(sam_enhance(&seed, &props, 0.3, FusionStrategy::And).unwrap().count(), 0);
    }
}
