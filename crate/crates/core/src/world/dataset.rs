use serde::{Deserialize, Serialize};

use super::{ImageTensor, StyleVector, World};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Requested sample count per `(label, confound)` cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellCounts {
    /// `(1, 1)`
    pub both: usize,
    /// `(0, 0)`
    pub neither: usize,
    /// `(1, 0)`
    pub label_only: usize,
    /// `(0, 1)`
    pub confound_only: usize,
}

impl CellCounts {
    pub fn balanced(per_cell: usize) -> Self {
        Self {
            both: per_cell,
            neither: per_cell,
            label_only: per_cell,
            confound_only: per_cell,
        }
    }

    /// Strongly confounded design: `major` samples on the diagonal cells, `minor` off it.
    pub fn confounded(major: usize, minor: usize) -> Self {
        Self {
            both: major,
            neither: major,
            label_only: minor,
            confound_only: minor,
        }
    }

    pub fn total(&self) -> usize {
        self.both + self.neither + self.label_only + self.confound_only
    }

    fn cells(&self) -> [((bool, bool), usize); 4] {
        [
            ((true, true), self.both),
            ((false, false), self.neither),
            ((true, false), self.label_only),
            ((false, true), self.confound_only),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDesign {
    pub label: String,
    pub confound: String,
    pub cells: CellCounts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub style: StyleVector,
    pub image: ImageTensor,
    /// One probability for classifiers, `2P` coordinates for keypoint models.
    pub target: Vec<f64>,
    /// `(label, confound)` membership for binary designs.
    pub cell: Option<(bool, bool)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub counts: CellCounts,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

const BUDGET_FACTOR: usize = 100;

/// Binary dataset whose cells exactly match `design.cells`.
///
/// Styles are drawn from the prior and reflected on the label/confound
/// channels until their oracle intensities land in the requested cell; draws
/// that still miss are rejected.
pub fn make_dataset(world: &World, design: &DatasetDesign, stream: Stream) -> Result<LabeledDataset> {
    let label = world.feature_index(&design.label)?;
    let confound = world.feature_index(&design.confound)?;
    if label == confound {
        return Err(Error::DuplicateAttribute(design.label.clone()));
    }
    let mut samples = Vec::with_capacity(design.cells.total());
    for (cell_id, ((want_label, want_confound), count)) in design.cells.cells().into_iter().enumerate() {
        let mut attempts = 0usize;
        let mut filled = 0usize;
        while filled < count {
            if attempts >= BUDGET_FACTOR * count {
                return Err(Error::GenerationBudget {
                    cell: format!("({}, {})", want_label as u8, want_confound as u8),
                    attempts,
                });
            }
            let index = ((cell_id as u64) << 40) | attempts as u64;
            attempts += 1;
            let mut s = world.sample_style(stream, index);
            let alpha = world.intensities(&s)?;
            if (alpha[label] > 0.0) != want_label {
                for c in world.channels(label) {
                    s.0[c] = -s.0[c];
                }
            }
            if (alpha[confound] > 0.0) != want_confound {
                for c in world.channels(confound) {
                    s.0[c] = -s.0[c];
                }
            }
            let alpha = world.intensities(&s)?;
            let (l, c) = (alpha[label] > 0.0, alpha[confound] > 0.0);
            if (l, c) != (want_label, want_confound) {
                continue;
            }
            let image = world.render(&s)?;
            samples.push(Sample {
                style: s,
                image,
                target: vec![if l { 1.0 } else { 0.0 }],
                cell: Some((l, c)),
            });
            filled += 1;
        }
    }
    Ok(LabeledDataset {
        samples,
        counts: design.cells,
    })
}

/// Dataset labelled with ground-truth keypoint coordinates.
pub fn make_keypoint_dataset(world: &World, n: usize, stream: Stream) -> Result<LabeledDataset> {
    if world.num_keypoints() == 0 {
        return Err(Error::precondition("world has no keypoint features"));
    }
    let samples = (0..n)
        .map(|i| {
            let s = world.sample_style(stream, i as u64);
            let image = world.render(&s)?;
            let target = world.keypoints(&s)?;
            Ok(Sample {
                style: s,
                image,
                target,
                cell: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledDataset {
        samples,
        counts: CellCounts::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WorldConfig;

    fn design(cells: CellCounts) -> DatasetDesign {
        DatasetDesign {
            label: "stripes".into(),
            confound: "ring".into(),
            cells,
        }
    }

    fn count_cells(ds: &LabeledDataset) -> CellCounts {
        let mut c = CellCounts::default();
        for s in &ds.samples {
            match s.cell.unwrap() {
                (true, true) => c.both += 1,
                (false, false) => c.neither += 1,
                (true, false) => c.label_only += 1,
                (false, true) => c.confound_only += 1,
            }
        }
        c
    }

    #[test]
    fn balanced_design_has_even_marginal() {
        let world = World::new(WorldConfig::default()).unwrap();
        let ds = make_dataset(&world, &design(CellCounts::balanced(250)), Stream::TrainSet).unwrap();
        assert_eq!(ds.len(), 1000);
        assert_eq!(count_cells(&ds), CellCounts::balanced(250));
        let positives = ds.samples.iter().filter(|s| s.target[0] == 1.0).count();
        assert_eq!(positives, 500);
    }

    #[test]
    fn confounded_design_correlates_label_and_confound() {
        let world = World::new(WorldConfig::default()).unwrap();
        let ds = make_dataset(&world, &design(CellCounts::confounded(1000, 10)), Stream::TrainSet).unwrap();
        assert_eq!(count_cells(&ds), CellCounts::confounded(1000, 10));
        let pairs: Vec<(f64, f64)> = ds
            .samples
            .iter()
            .map(|s| {
                let (l, c) = s.cell.unwrap();
                (l as u8 as f64, c as u8 as f64)
            })
            .collect();
        let n = pairs.len() as f64;
        let (ml, mc) = (pairs.iter().map(|p| p.0).sum::<f64>() / n, pairs.iter().map(|p| p.1).sum::<f64>() / n);
        let cov: f64 = pairs.iter().map(|p| (p.0 - ml) * (p.1 - mc)).sum();
        let vl: f64 = pairs.iter().map(|p| (p.0 - ml).powi(2)).sum();
        let vc: f64 = pairs.iter().map(|p| (p.1 - mc).powi(2)).sum();
        assert!(cov / (vl * vc).sqrt() >= 0.95);
        // labels follow the oracle exactly
        for s in &ds.samples {
            let a = world.oracle_intensity(&s.style, "stripes").unwrap();
            assert_eq!(s.target[0] == 1.0, a > 0.0);
        }
    }

    #[test]
    fn empty_design_is_empty() {
        let world = World::new(WorldConfig::default()).unwrap();
        let ds = make_dataset(&world, &design(CellCounts::default()), Stream::TrainSet).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn infeasible_cell_exhausts_budget() {
        let mut config = WorldConfig::default();
        config.features[0].bias = 50.0;
        let world = World::new(config).unwrap();
        let err = make_dataset(
            &world,
            &design(CellCounts { neither: 3, ..Default::default() }),
            Stream::TrainSet,
        )
        .unwrap_err();
        assert!(matches!(err, Error::GenerationBudget { attempts: 300, .. }));
    }
}
