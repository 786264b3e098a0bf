//! Pseudo-mask refinement: proposal fusion, dense CRF and affinity random walk.
//!
//! Every operation is a pure function of its inputs and safe to run per image
//! in parallel.

mod crf;
mod provider;
mod random_walk;
mod sam;

pub use crf::{crf_refine, CrfOutput, CrfParams};
pub use provider::{
    connected_components, read_proposal_dir, write_proposal_dir, CommandProvider, LabelImageProvider,
    ProposalDirProvider, ProposalProvider, ProposalRequest, DEFAULT_POINTS_PER_SIDE, PROPOSAL_INDEX,
};
pub use random_walk::{affinity_random_walk, RandomWalkParams};
pub use sam::{mask_iou, sam_enhance, selected_union, FusionStrategy, MaskProposal, DEFAULT_IOU_THRESHOLD};
