//! Random edge manipulations used to supervise the flare and blaze stages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::edgeops::{
    build_extractor, edit_edges, select_semantic_region, select_stochastic_region,
    CandidateRegionMap, Donor, EdgeExtractorConfig, EditStrategy, RegionSource,
    StochasticShapeParams,
};
use crate::error::{Error, Result};
use crate::manifest::LoadedSample;
use crate::raster::{EdgeMap, RegionMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManipulationParams {
    /// Probability of semantic (vs stochastic) region selection.
    pub semantic_prob: f64,
    /// Number of regions united into one selection.
    pub count_range: (usize, usize),
    pub shapes: StochasticShapeParams,
    /// Fraction of training samples left unedited (empty mask).
    pub clean_fraction: f64,
    /// Redraws allowed when an edit leaves the edge map unchanged.
    pub max_redraws: usize,
    /// Blaze input edges: `None` feeds the manipulated edge map; `Some`
    /// recomputes edges from the flare anomaly image with this extractor.
    pub blaze_recompute_edges: Option<EdgeExtractorConfig>,
}

impl Default for ManipulationParams {
    fn default() -> Self {
        ManipulationParams {
            semantic_prob: 0.5,
            count_range: (1, 2),
            shapes: StochasticShapeParams::default(),
            clean_fraction: 0.15,
            max_redraws: 8,
            blaze_recompute_edges: None,
        }
    }
}

impl ManipulationParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.semantic_prob) || !(0.0..=1.0).contains(&self.clean_fraction)
        {
            return Err(Error::Config(
                "manipulation probabilities must lie in [0, 1]".into(),
            ));
        }
        if self.count_range.0 < 1 || self.count_range.1 < self.count_range.0 {
            return Err(Error::Config(format!(
                "bad region count range {:?}",
                self.count_range
            )));
        }
        if let Some(cfg) = &self.blaze_recompute_edges {
            build_extractor(cfg)?;
        }
        Ok(())
    }
}

/// What to do to an edge map: nothing, or one edit inside one region.
#[derive(Clone, Debug, PartialEq)]
pub enum EditSpec {
    None,
    Edit {
        region: RegionMask,
        strategy: EditStrategy,
    },
}

/// Returns the manipulated edge map and the edited-region mask (all-zero for
/// [`EditSpec::None`]).
pub fn apply_edit_spec(edge: &EdgeMap, spec: &EditSpec) -> Result<(EdgeMap, RegionMask)> {
    match spec {
        EditSpec::None => Ok((edge.clone(), RegionMask::empty(edge.height(), edge.width()))),
        EditSpec::Edit { region, strategy } => edit_edges(edge, region, strategy),
    }
}

fn pick_region(
    sample: &LoadedSample,
    params: &ManipulationParams,
    rng: &mut ChaCha8Rng,
) -> Result<RegionMask> {
    let (h, w) = sample.image.dims();
    let seed = rng.random::<u64>();
    if rng.random_bool(params.semantic_prob) {
        let cands = CandidateRegionMap::new(sample.regions.clone(), RegionSource::Semantic);
        match select_semantic_region(&cands, params.count_range, seed) {
            Ok(m) => return Ok(m),
            Err(Error::Selection(_)) => {}
            Err(e) => return Err(e),
        }
    }
    select_stochastic_region(h, w, params.count_range, &params.shapes, seed)
}

/// Draws an edit for `sample`, borrowing donor edges from `donor`. Redraws
/// (up to `max_redraws`) edits that would leave the edges unchanged.
pub fn sample_edit_spec(
    sample: &LoadedSample,
    donor: &LoadedSample,
    params: &ManipulationParams,
    seed: u64,
) -> Result<EditSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.random_bool(params.clean_fraction) {
        return Ok(EditSpec::None);
    }
    let mut last = None;
    for _ in 0..=params.max_redraws {
        let region = pick_region(sample, params, &mut rng)?;
        let strategy = match rng.random_range(0..3) {
            0 => EditStrategy::remove(),
            k => {
                let d = Donor {
                    edge: donor.edge.clone(),
                    region: pick_region(donor, params, &mut rng)?,
                };
                if k == 1 {
                    EditStrategy::replace(d)
                } else {
                    EditStrategy::merge(d)
                }
            }
        };
        let spec = EditSpec::Edit { region, strategy };
        let (edited, _) = apply_edit_spec(&sample.edge, &spec)?;
        if edited != sample.edge {
            return Ok(spec);
        }
        last = Some(spec);
    }
    Ok(last.expect("at least one draw"))
}

/// Edits for a whole batch; donors are drawn uniformly from `pool`.
pub fn sample_batch_edits(
    batch: &[&LoadedSample],
    pool: &[LoadedSample],
    params: &ManipulationParams,
    seed: u64,
) -> Result<Vec<EditSpec>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let donor = &pool[rng.random_range(0..pool.len())];
            sample_edit_spec(s, donor, params, derive_seed(seed, &[i as u64]))
        })
        .collect()
}
