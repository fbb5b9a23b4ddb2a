use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{EdgeMap, RegionMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Remove,
    Replace,
    Merge,
}

/// Edge content borrowed from another sample (possibly another category).
#[derive(Clone, Debug, PartialEq)]
pub struct Donor {
    pub edge: EdgeMap,
    pub region: RegionMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditStrategy {
    pub kind: EditKind,
    pub donor: Option<Donor>,
}

impl EditStrategy {
    pub fn remove() -> Self {
        EditStrategy {
            kind: EditKind::Remove,
            donor: None,
        }
    }

    pub fn replace(donor: Donor) -> Self {
        EditStrategy {
            kind: EditKind::Replace,
            donor: Some(donor),
        }
    }

    pub fn merge(donor: Donor) -> Self {
        EditStrategy {
            kind: EditKind::Merge,
            donor: Some(donor),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, &self.donor) {
            (EditKind::Remove, Some(_)) => Err(Error::Edit("remove takes no donor".into())),
            (EditKind::Replace | EditKind::Merge, None) => {
                Err(Error::Edit(format!("{:?} requires a donor", self.kind)))
            }
            (_, Some(d)) if d.edge.dims() != d.region.dims() => {
                Err(Error::Edit("donor edge and region are not aligned".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Crops the donor's edges to its region's bounding box, stretches them onto
/// the target region's bounding box (nearest neighbor) and masks by the target.
pub fn fit_donor(donor: &Donor, target: &RegionMask) -> Result<EdgeMap> {
    let (dy0, dx0, dy1, dx1) = donor
        .region
        .bbox()
        .ok_or_else(|| Error::Edit("donor region is empty".into()))?;
    let (h, w) = target.dims();
    let Some((ty0, tx0, ty1, tx1)) = target.bbox() else {
        return Ok(EdgeMap::zeros(h, w));
    };
    let (dh, dw) = ((dy1 - dy0 + 1) as f64, (dx1 - dx0 + 1) as f64);
    let (th, tw) = ((ty1 - ty0 + 1) as f64, (tx1 - tx0 + 1) as f64);
    Ok(EdgeMap::from_fn(h, w, |y, x, _| {
        if !target.contains(y, x) {
            return 0.0;
        }
        let sy = dy0 + ((((y - ty0) as f64 + 0.5) * dh / th) as usize).min(dh as usize - 1);
        let sx = dx0 + ((((x - tx0) as f64 + 0.5) * dw / tw) as usize).min(dw as usize - 1);
        donor.edge.get(sy, sx, 0)
    }))
}

/// Edits edges inside `region`; pixels outside are never touched. The returned
/// mask is exactly `region`.
pub fn edit_edges(
    edge: &EdgeMap,
    region: &RegionMask,
    strategy: &EditStrategy,
) -> Result<(EdgeMap, RegionMask)> {
    strategy.validate()?;
    if edge.dims() != region.dims() {
        return Err(Error::Contract(format!(
            "edge {:?} and region {:?} are not aligned",
            edge.dims(),
            region.dims()
        )));
    }
    let fitted = match &strategy.donor {
        Some(d) => Some(fit_donor(d, region)?),
        None => None,
    };
    let (h, w) = edge.dims();
    let out = EdgeMap::from_fn(h, w, |y, x, _| {
        let orig = edge.get(y, x, 0);
        if !region.contains(y, x) {
            return orig;
        }
        match strategy.kind {
            EditKind::Remove => 0.0,
            EditKind::Replace => fitted.as_ref().expect("validated").get(y, x, 0),
            EditKind::Merge => orig.max(fitted.as_ref().expect("validated").get(y, x, 0)),
        }
    });
    Ok((out, region.clone()))
}
