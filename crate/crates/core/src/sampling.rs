//! Sample designs in the unit hypercube.
//!
//! [`lhs`] produces Latin Hypercube designs: each of the `m` equal-width
//! strata of every dimension holds exactly one point. [`uniform_in_box`]
//! draws i.i.d. points inside a [`UnitBox`] for local search.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AdapterError, SamplingError};
use crate::rng::{derive_seed, seeded_rng, TuneRng};
use crate::space::{ParameterSpace, UnitBox, UnitPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignKind {
    Lhs,
    UniformBox,
}

/// Ordered point set, fully determined by its generating arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDesign {
    points: Vec<UnitPoint>,
    seed: u64,
    kind: DesignKind,
}

impl SampleDesign {
    pub fn points(&self) -> &[UnitPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn kind(&self) -> DesignKind {
        self.kind
    }

    pub fn into_points(self) -> Vec<UnitPoint> {
        self.points
    }

    /// Writes one row per point. With a space the header holds parameter
    /// names and rows hold decoded values; without one the header is
    /// `u0..u{d-1}` and rows hold unit coordinates.
    pub fn write_csv<W: Write>(
        &self,
        space: Option<&ParameterSpace>,
        out: W,
    ) -> Result<(), AdapterError> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.points.first().map_or(0, UnitPoint::dim);
        match space {
            Some(space) => {
                w.write_record(space.names())?;
                for p in &self.points {
                    let s = space.from_unit(p)?;
                    w.write_record(s.values().iter().map(ToString::to_string))?;
                }
            }
            None => {
                w.write_record((0..d).map(|i| format!("u{i}")))?;
                for p in &self.points {
                    w.write_record(p.coords().iter().map(ToString::to_string))?;
                }
            }
        }
        w.flush().map_err(|e| AdapterError::io("<csv>", e))?;
        Ok(())
    }
}

/// Latin Hypercube design of `m` points in `d` dimensions.
pub fn lhs(d: usize, m: usize, seed: u64) -> Result<SampleDesign, SamplingError> {
    if d == 0 {
        return Err(SamplingError::ZeroDimension);
    }
    if m == 0 {
        return Err(SamplingError::EmptyDesign);
    }
    let mut rng = seeded_rng(seed);
    let mut columns = Vec::with_capacity(d);
    for _ in 0..d {
        columns.push(lhs_column(m, &mut rng));
    }
    let points = (0..m)
        .map(|j| UnitPoint::new(columns.iter().map(|col| col[j]).collect()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SampleDesign {
        points,
        seed,
        kind: DesignKind::Lhs,
    })
}

/// One stratified coordinate per point: a shuffled stratum index plus a
/// uniform jitter inside the stratum.
fn lhs_column(m: usize, rng: &mut TuneRng) -> Vec<f64> {
    let mut strata: Vec<usize> = (0..m).collect();
    strata.shuffle(rng);
    strata
        .into_iter()
        .map(|s| stratum_coordinate(s, rng.random::<f64>(), m))
        .collect()
}

/// `(s + u) / m`, nudged so that `floor(c * m) == s` holds in floating point.
pub(crate) fn stratum_coordinate(s: usize, u: f64, m: usize) -> f64 {
    let mf = m as f64;
    let mut c = (s as f64 + u) / mf;
    while c > 0.0 && (c * mf).floor() > s as f64 {
        c = c.next_down();
    }
    while (c * mf).floor() < s as f64 {
        c = c.next_up();
    }
    c
}

/// `n` i.i.d. uniform points inside `b`.
pub fn uniform_in_box(b: &UnitBox, n: usize, seed: u64) -> Result<SampleDesign, SamplingError> {
    if n == 0 {
        return Err(SamplingError::EmptyDesign);
    }
    if b.dim() == 0 {
        return Err(SamplingError::ZeroDimension);
    }
    let mut rng = seeded_rng(seed);
    let points = (0..n)
        .map(|_| point_in_box(b, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SampleDesign {
        points,
        seed,
        kind: DesignKind::UniformBox,
    })
}

pub(crate) fn point_in_box(
    b: &UnitBox,
    rng: &mut TuneRng,
) -> Result<UnitPoint, crate::error::SpaceError> {
    UnitPoint::new(
        b.bounds()
            .iter()
            .map(|&(lo, hi)| {
                let u: f64 = rng.random();
                (lo + u * (hi - lo)).clamp(lo, hi)
            })
            .collect(),
    )
}

/// A fresh LHS design at a new size. Designs are regenerated, not extended,
/// so the one-point-per-stratum property holds at the new granularity.
pub fn rescale_design(d: usize, m_new: usize, seed: u64) -> Result<SampleDesign, SamplingError> {
    lhs(d, m_new, derive_seed(seed, m_new as u64))
}

/// Count of (dimension, stratum) cells that do not hold exactly one point.
pub fn stratification_violations(design: &[UnitPoint]) -> usize {
    let m = design.len();
    let d = design.first().map_or(0, UnitPoint::dim);
    let mut violations = 0;
    for k in 0..d {
        let mut hits = vec![0usize; m];
        for p in design {
            let s = (p.coords()[k] * m as f64).floor() as usize;
            if s < m {
                hits[s] += 1;
            } else {
                violations += 1;
            }
        }
        violations += hits.iter().filter(|&&h| h != 1).count();
    }
    violations
}
