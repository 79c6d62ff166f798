//! Axis-aligned boxes used as sampling regions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Region {
    bounds: Vec<(f64, f64)>,
}

impl Region {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::Spec("region needs at least one dimension".into()));
        }
        for &(lo, hi) in &bounds {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Spec(format!("invalid interval [{lo}, {hi}]")));
            }
        }
        Ok(Region { bounds })
    }

    /// `[-r, r]^n`.
    pub fn symmetric(n: usize, r: f64) -> Result<Self> {
        Self::new(vec![(-r, r); n])
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn volume(&self) -> f64 {
        self.bounds.iter().map(|(lo, hi)| hi - lo).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.bounds.len()
            && x.iter()
                .zip(&self.bounds)
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Whether the origin is an interior point.
    pub fn contains_origin_strictly(&self) -> bool {
        self.bounds.iter().all(|(lo, hi)| *lo < 0.0 && *hi > 0.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.bounds
            .iter()
            .map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect()
    }

    /// Box with the same center and every half-width multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Region {
        Region {
            bounds: self
                .bounds
                .iter()
                .map(|&(lo, hi)| {
                    let c = 0.5 * (lo + hi);
                    let h = 0.5 * (hi - lo) * factor;
                    (c - h, c + h)
                })
                .collect(),
        }
    }

    /// Center point of each of the `2n` faces.
    pub fn face_centers(&self) -> Vec<Vec<f64>> {
        let center: Vec<f64> = self.bounds.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
        let mut out = Vec::with_capacity(2 * self.dim());
        for (k, &(lo, hi)) in self.bounds.iter().enumerate() {
            for v in [lo, hi] {
                let mut p = center.clone();
                p[k] = v;
                out.push(p);
            }
        }
        out
    }

    /// `count` points on the boundary, split evenly over the `2n` faces and
    /// uniform within each face.
    pub fn sample_boundary<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let faces = 2 * self.dim();
        (0..count)
            .map(|i| {
                let face = i % faces;
                let (axis, upper) = (face / 2, face % 2 == 1);
                let mut p = self.sample(rng);
                p[axis] = if upper {
                    self.bounds[axis].1
                } else {
                    self.bounds[axis].0
                };
                p
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_bad_intervals() {
        assert!(Region::new(vec![(1.0, -1.0)]).is_err());
        assert!(Region::new(vec![]).is_err());
    }

    #[test]
    fn boundary_samples_lie_on_faces() {
        let r = Region::new(vec![(-2.0, 2.0), (-1.0, 1.0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in r.sample_boundary(200, &mut rng) {
            assert!(r.contains(&p));
            let on_face = p
                .iter()
                .zip(r.bounds())
                .any(|(v, (lo, hi))| *v == *lo || *v == *hi);
            assert!(on_face);
        }
        assert_eq!(r.face_centers().len(), 4);
        assert_eq!(r.scaled(2.0).bounds()[1], (-2.0, 2.0));
        assert_eq!(r.volume(), 8.0);
    }
}
