//! Intersection-over-union over the three road-element classes.

use serde::Serialize;

use crate::error::{Error, Result};

use super::city::{SemanticClass, SemanticMap};

/// Per-class intersection and union cell counts, indexed by class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IouCounts {
    pub intersection: [u64; SemanticClass::COUNT],
    pub union: [u64; SemanticClass::COUNT],
}

/// IoU of divider, crossing and boundary; `None` when the class is absent
/// from both prediction and ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IouReport {
    pub divider: Option<f64>,
    pub crossing: Option<f64>,
    pub boundary: Option<f64>,
    /// Mean over the defined classes; `None` when none is defined.
    pub mean: Option<f64>,
}

impl IouCounts {
    pub fn accumulate(&mut self, pred: &SemanticMap, gt: &SemanticMap) -> Result<()> {
        if (pred.rows(), pred.cols()) != (gt.rows(), gt.cols()) {
            return Err(Error::shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.rows(),
                pred.cols(),
                gt.rows(),
                gt.cols()
            )));
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if p == g {
                self.intersection[p.index()] += 1;
                self.union[p.index()] += 1;
            } else {
                self.union[p.index()] += 1;
                self.union[g.index()] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IouCounts) {
        for k in 0..SemanticClass::COUNT {
            self.intersection[k] += other.intersection[k];
            self.union[k] += other.union[k];
        }
    }

    pub fn iou(&self, class: SemanticClass) -> Option<f64> {
        let u = self.union[class.index()];
        (u > 0).then(|| self.intersection[class.index()] as f64 / u as f64)
    }

    pub fn report(&self) -> IouReport {
        let [divider, crossing, boundary] = SemanticClass::ROAD.map(|c| self.iou(c));
        let defined: Vec<f64> = [divider, crossing, boundary].into_iter().flatten().collect();
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        IouReport {
            divider,
            crossing,
            boundary,
            mean,
        }
    }
}

pub fn evaluate_miou(pred: &SemanticMap, gt: &SemanticMap) -> Result<IouReport> {
    let mut counts = IouCounts::default();
    counts.accumulate(pred, gt)?;
    Ok(counts.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use SemanticClass::*;

    fn map(cols: usize, labels: &[SemanticClass]) -> SemanticMap {
        SemanticMap::from_labels(labels.len() / cols, cols, labels.to_vec()).unwrap()
    }

    #[test]
    fn identical_maps() {
        let m = map(3, &[Divider, Crossing, Background, Boundary, Background, Divider]);
        let r = evaluate_miou(&m, &m).unwrap();
        assert_eq!(r.mean, Some(1.0));
        assert_eq!(r.divider, Some(1.0));
    }

    #[test]
    fn disjoint_masks() {
        let p = map(4, &[Divider, Divider, Background, Background]);
        let g = map(4, &[Background, Background, Divider, Divider]);
        let r = evaluate_miou(&p, &g).unwrap();
        assert_eq!(r.divider, Some(0.0));
        assert_eq!(r.crossing, None);
        assert_eq!(r.mean, Some(0.0));
    }

    #[test]
    fn half_overlap_is_one_third() {
        let p = map(4, &[Boundary, Boundary, Background, Background]);
        let g = map(4, &[Background, Boundary, Boundary, Background]);
        let r = evaluate_miou(&p, &g).unwrap();
        assert!((r.boundary.unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let m = map(2, &[Background, Background]);
        assert_eq!(evaluate_miou(&m, &m).unwrap().mean, None);
        let p = map(2, &[Divider, Crossing]);
        let g = map(2, &[Divider, Background]);
        let r = evaluate_miou(&p, &g).unwrap();
        assert_eq!(r.boundary, None);
        assert_eq!(r.mean, Some(0.5));
    }

    #[test]
    fn shape_mismatch() {
        let a = map(2, &[Background, Background]);
        let b = map(1, &[Background, Background]);
        assert!(matches!(evaluate_miou(&a, &b), Err(Error::Shape(_))));
    }
}
