use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cnn_forward, CnnParams, PolicyError};
use crate::camrender::CameraFrame;
use crate::simworld::SpeedCommand;

/// Intensity bin edges shared by both cameras; the last bin is `[204, 256)`.
pub const HIST_EDGES: [u16; 6] = [0, 51, 102, 153, 204, 256];
pub const HIST_FEATURES: usize = 10;

fn histogram(frame: &CameraFrame, out: &mut [f64]) {
    let mut counts = [0usize; 5];
    for &p in &frame.pixels {
        let bin = HIST_EDGES[1..].iter().position(|&e| (p as u16) < e).unwrap();
        counts[bin] += 1;
    }
    let n = frame.pixels.len().max(1) as f64;
    for (o, c) in out.iter_mut().zip(counts) {
        *o = c as f64 / n;
    }
}

/// Normalized 5-bin histograms of the top then bottom frame.
pub fn hist_features(top: &CameraFrame, bottom: &CameraFrame) -> [f64; HIST_FEATURES] {
    let mut f = [0.0; HIST_FEATURES];
    histogram(top, &mut f[..5]);
    histogram(bottom, &mut f[5..]);
    f
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Inertia after each Lloyd iteration.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

pub const KMEANS_MAX_ITERATIONS: usize = 100;

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or the iteration cap is hit.
pub fn kmeans_fit(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansFit, PolicyError> {
    let distinct: HashSet<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect())
        .collect();
    if k == 0 || distinct.len() < k {
        return Err(PolicyError::TooFewPoints {
            k,
            distinct: distinct.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.gen::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap();
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &c));
        }
        centroids.push(c);
    }

    let dim = points[0].len();
    let mut assignments = vec![usize::MAX; points.len()];
    let mut inertia = vec![];
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERATIONS {
        iterations += 1;
        let mut changed = false;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (j, _) = nearest(&centroids, p);
            changed |= *a != j;
            *a = j;
        }
        repair_empty(points, &mut centroids, &mut assignments);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(points) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for ((c, s), n) in centroids.iter_mut().zip(sums).zip(counts) {
            *c = s.into_iter().map(|v| v / n as f64).collect();
        }
        inertia.push(
            assignments
                .iter()
                .zip(points)
                .map(|(&a, p)| dist2(&centroids[a], p))
                .sum(),
        );
        if !changed {
            break;
        }
    }
    Ok(KMeansFit {
        centroids,
        assignments,
        inertia,
        iterations,
    })
}

/// Gives every empty cluster the point farthest from its own centroid.
fn repair_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assignments: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        let far = (0..points.len())
            .filter(|&i| counts[assignments[i]] > 1)
            .max_by(|&i, &j| {
                let di = dist2(&points[i], &centroids[assignments[i]]);
                let dj = dist2(&points[j], &centroids[assignments[j]]);
                di.total_cmp(&dj).then(j.cmp(&i))
            })
            .expect("at least k points");
        assignments[far] = empty;
        centroids[empty] = points[far].clone();
    }
}

/// Nearest centroid, ties to the lowest index.
pub fn kmeans_assign(centroids: &[Vec<f64>], feature: &[f64]) -> usize {
    nearest(centroids, feature).0
}

/// Histogram centroids plus one CNN per cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub members: Vec<CnnParams<f32>>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dispatch(&self, top: &CameraFrame, bottom: &CameraFrame) -> usize {
        kmeans_assign(&self.centroids, &hist_features(top, bottom))
    }
}

/// The CNN of the cluster nearest to the frames' histogram features.
pub fn hcnn_forward(model: &ClusterModel, top: &CameraFrame, bottom: &CameraFrame) -> Result<(SpeedCommand, usize), PolicyError> {
    if model.members.len() != model.k() {
        return Err(PolicyError::MissingMember {
            k: model.k(),
            members: model.members.len(),
        });
    }
    let j = model.dispatch(top, bottom);
    Ok((cnn_forward(&model.members[j], top, bottom)?, j))
}
