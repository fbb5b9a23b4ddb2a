//! Edge extraction, region proposal and selection, and edge editing.
//!
//! Edited edge maps are where synthetic anomalies come from: a region is
//! selected (semantically from color components, or stochastically from
//! random primitives) and the edges inside it are removed, replaced by donor
//! edges, or merged with them.

mod edit;
mod extract;
mod regions;

pub use edit::{edit_edges, fit_donor, Donor, EditKind, EditStrategy};
pub use extract::{
    build_extractor, extract_edges, sobel, EdgeExtractor, EdgeExtractorConfig, SobelHysteresis,
};
pub use regions::{
    connected_components, propose_regions, refine_regions, select_semantic_region,
    select_stochastic_region, stochastic_region_with_shapes, CandidateRegionMap, RefineParams,
    RegionProposerConfig, RegionSource, Shape, ShapeKind, StochasticShapeParams,
};
