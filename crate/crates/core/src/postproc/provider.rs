//! Proposal providers.
//!
//! Container format shared by the directory and subprocess providers: a
//! directory holding one lossless binary mask PNG per proposal (the same
//! format as dataset masks) and `index.json`, a JSON array of
//! `{"mask": "<file name>", "score": <float>}` records in proposal order.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::{Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use super::sam::MaskProposal;
use crate::dataset::{load_mask, save_mask};
use crate::error::{Error, Result};

pub const DEFAULT_POINTS_PER_SIDE: usize = 32;
pub const PROPOSAL_INDEX: &str = "index.json";

#[derive(Debug, Clone, Copy)]
pub struct ProposalRequest<'a> {
    pub image: ArrayView3<'a, u8>,
    /// On-disk location of `image`, for providers that work across a process
    /// boundary.
    pub image_path: Option<&'a Path>,
    pub image_id: &'a str,
    pub points_per_side: usize,
}

pub trait ProposalProvider {
    fn generate(&self, req: &ProposalRequest) -> Result<Vec<MaskProposal>>;

    /// Whether `generate` may be called from several threads at once.
    fn concurrent_safe(&self) -> bool {
        true
    }
}

fn check_bounds(req: &ProposalRequest, proposals: &[MaskProposal]) -> Result<()> {
    let (h, w, _) = req.image.dim();
    for (i, p) in proposals.iter().enumerate() {
        if p.dim() != (h, w) {
            return Err(Error::Provider(format!(
                "{}: proposal {i} is {:?}, image is {:?}",
                req.image_id,
                p.dim(),
                (h, w)
            )));
        }
    }
    Ok(())
}

/// 4-connected components of equal-valued pixels, in raster order of their
/// first pixel. Each component is returned as a binary mask.
pub fn connected_components(labels: ArrayView2<u8>) -> Vec<Array2<u8>> {
    let (h, w) = labels.dim();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if seen[[y, x]] {
                continue;
            }
            let v = labels[[y, x]];
            let mut mask = Array2::<u8>::zeros((h, w));
            seen[[y, x]] = true;
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                mask[[cy, cx]] = 1;
                let nbrs = [
                    (cy.wrapping_sub(1), cx),
                    (cy + 1, cx),
                    (cy, cx.wrapping_sub(1)),
                    (cy, cx + 1),
                ];
                for (ny, nx) in nbrs {
                    if ny < h && nx < w && !seen[[ny, nx]] && labels[[ny, nx]] == v {
                        seen[[ny, nx]] = true;
                        queue.push_back((ny, nx));
                    }
                }
            }
            out.push(mask);
        }
    }
    out
}

fn dilate(mask: &Array2<u8>, r: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    let r = r as isize;
    Array2::from_shape_fn((h, w), |(y, x)| {
        for dy in -r..=r {
            for dx in -r..=r {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w && mask[[ny as usize, nx as usize]] != 0
                {
                    return 1;
                }
            }
        }
        0
    })
}

/// Offline stand-in for a foundation segmenter: proposals are the connected
/// components of a per-image object label image `<dir>/<image_id>.png`,
/// optionally dilated by `jitter` pixels to mimic imperfect boundaries.
/// `points_per_side` is ignored.
#[derive(Debug, Clone)]
pub struct LabelImageProvider {
    pub dir: PathBuf,
    pub jitter: usize,
    /// Components smaller than this many pixels are dropped.
    pub min_area: usize,
}

impl LabelImageProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            jitter: 0,
            min_area: 1,
        }
    }

    pub fn proposals_from_labels(&self, labels: ArrayView2<u8>) -> Result<Vec<MaskProposal>> {
        let total = labels.len().max(1) as f32;
        connected_components(labels)
            .into_iter()
            .filter(|m| m.iter().filter(|&&v| v != 0).count() >= self.min_area)
            .map(|m| {
                let m = if self.jitter > 0 { dilate(&m, self.jitter) } else { m };
                let area = m.iter().filter(|&&v| v != 0).count() as f32;
                MaskProposal::new(m, area / total)
            })
            .collect()
    }
}

impl ProposalProvider for LabelImageProvider {
    fn generate(&self, req: &ProposalRequest) -> Result<Vec<MaskProposal>> {
        let path = self.dir.join(format!("{}.png", req.image_id));
        let img = image::open(&path)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        let labels = Array2::from_shape_vec((h as usize, w as usize), img.into_raw())
            .map_err(|e| Error::shape(e.to_string()))?;
        let out = self.proposals_from_labels(labels.view())?;
        check_bounds(req, &out)?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexEntry {
    mask: String,
    score: f32,
}

pub fn write_proposal_dir(dir: impl AsRef<Path>, proposals: &[MaskProposal]) -> Result<()> {
    let dir = dir.as_ref();
    crate::io::ensure_dir(dir)?;
    let mut index = Vec::with_capacity(proposals.len());
    for (i, p) in proposals.iter().enumerate() {
        let name = format!("mask_{i:04}.png");
        save_mask(dir.join(&name), p.mask())?;
        index.push(IndexEntry {
            mask: name,
            score: p.score,
        });
    }
    crate::io::write_atomic(dir.join(PROPOSAL_INDEX), serde_json::to_string_pretty(&index)?.as_bytes())
}

pub fn read_proposal_dir(dir: impl AsRef<Path>) -> Result<Vec<MaskProposal>> {
    let dir = dir.as_ref();
    let index_path = dir.join(PROPOSAL_INDEX);
    let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: Vec<IndexEntry> = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: index_path.clone(),
        reason: e.to_string(),
    })?;
    index
        .into_iter()
        .map(|e| {
            let m = load_mask(dir.join(&e.mask))?;
            MaskProposal::new(m, e.score).map_err(|_| {
                Error::Provider(format!("{}: proposal {} is empty", dir.display(), e.mask))
            })
        })
        .collect()
}

/// Reads pre-generated proposals from `<root>/<image_id>/`.
#[derive(Debug, Clone)]
pub struct ProposalDirProvider {
    pub root: PathBuf,
}

impl ProposalProvider for ProposalDirProvider {
    fn generate(&self, req: &ProposalRequest) -> Result<Vec<MaskProposal>> {
        let out = read_proposal_dir(self.root.join(req.image_id))?;
        check_bounds(req, &out)?;
        Ok(out)
    }
}

/// Runs an external generator once per image:
///
/// `<program> <args…> --image <path> --points-per-side <n> --out <dir>`
///
/// and reads the container it leaves in `<dir>` (`<work_dir>/<image_id>`).
#[derive(Debug, Clone)]
pub struct CommandProvider {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub work_dir: PathBuf,
}

impl ProposalProvider for CommandProvider {
    fn generate(&self, req: &ProposalRequest) -> Result<Vec<MaskProposal>> {
        let image = req.image_path.ok_or_else(|| {
            Error::Provider(format!("{}: command provider needs the image path", req.image_id))
        })?;
        let out_dir = self.work_dir.join(req.image_id);
        crate::io::ensure_dir(&out_dir)?;
        let output = Command::new(&self.program)
            .args(&self.args)
            .arg("--image")
            .arg(image)
            .arg("--points-per-side")
            .arg(req.points_per_side.to_string())
            .arg("--out")
            .arg(&out_dir)
            .output()
            .map_err(|e| Error::io(&self.program, e))?;
        if !output.status.success() {
            return Err(Error::Provider(format!(
                "{} exited with {} for {}: {}",
                self.program.display(),
                output.status,
                req.image_id,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let out = read_proposal_dir(&out_dir)?;
        check_bounds(req, &out)?;
        Ok(out)
    }

    // Separate work directories per image id, but an external model may hold
    // a single accelerator; stay conservative.
    fn concurrent_safe(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn components_split_by_value_and_connectivity() {
        let l = array![[1u8, 1, 0], [0, 0, 0], [1, 0, 2]];
        let comps = connected_components(l.view());
        // {1,1}, {0 region}, {1 bottom-left}, {2}
        assert_eq!(comps.len(), 4);
        let sizes: Vec<usize> = comps.iter().map(|m| m.iter().map(|&v| v as usize).sum()).collect();
        assert_eq!(sizes, vec![2, 5, 1, 1]);
        let mut cover = Array2::<u8>::zeros((3, 3));
        for m in &comps {
            cover = cover + m;
        }
        assert!(cover.iter().all(|&v| v == 1));
    }

    #[test]
    fn dilate_grows_by_radius() {
        let mut m = Array2::<u8>::zeros((5, 5));
        m[[2, 2]] = 1;
        assert_eq!(dilate(&m, 1).iter().filter(|&&v| v == 1).count(), 9);
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let props = vec![
            MaskProposal::new(array![[1u8, 0], [0, 0]], 0.5).unwrap(),
            MaskProposal::new(array![[0u8, 1], [1, 1]], 0.25).unwrap(),
        ];
        write_proposal_dir(dir.path(), &props).unwrap();
        assert_eq!(read_proposal_dir(dir.path()).unwrap(), props);
    }
}
