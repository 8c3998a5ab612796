use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{squared_l2, Centroids};
use crate::error::{invalid, Result};

/// Lloyd's k-means over row-major `data` with k-means++ seeding.
///
/// Stops after `max_iters` assignment passes or as soon as an assignment pass
/// changes nothing. A cluster that empties is re-seeded to the point farthest
/// from its current centroid (ties to the lowest point index).
pub fn train_kmeans(data: &[f32], dim: usize, k: usize, max_iters: usize, seed: u64) -> Result<Centroids> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(invalid("training data is not a whole number of vectors"));
    }
    let n = data.len() / dim;
    if k == 0 {
        return Err(invalid("k_clusters must be >= 1"));
    }
    if n < k {
        return Err(invalid(format!("corpus of {n} vectors is smaller than k_clusters {k}")));
    }
    if max_iters == 0 {
        return Err(invalid("max_iters must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(data, dim, k, &mut rng);
    let mut assignment: Vec<u32> = Vec::new();

    for iter in 0..max_iters {
        let fresh = assign_all(data, dim, &Centroids::new(dim, centroids.clone())?);
        if iter > 0 && fresh == assignment {
            break;
        }
        assignment = fresh;
        centroids = recompute(data, dim, k, &assignment, &centroids);
    }
    Centroids::new(dim, centroids)
}

pub(super) fn assign_all(data: &[f32], dim: usize, centroids: &Centroids) -> Vec<u32> {
    data.par_chunks(dim).map(|v| centroids.nearest(v).0).collect()
}

fn plus_plus_init(data: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut chosen = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    chosen.push(first);
    let mut best: Vec<f64> = (0..n).map(|i| squared_l2(row(i), row(first))).collect();

    while chosen.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in best.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave the target past the final sum.
            pick.unwrap_or_else(|| best.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            // All remaining points coincide with chosen centers.
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(next);
        for (i, b) in best.iter_mut().enumerate() {
            let d = squared_l2(row(i), row(next));
            if d < *b {
                *b = d;
            }
        }
    }
    chosen.iter().flat_map(|&i| row(i).iter().copied()).collect()
}

fn recompute(data: &[f32], dim: usize, k: usize, assignment: &[u32], previous: &[f32]) -> Vec<f32> {
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (v, &c) in data.chunks(dim).zip(assignment) {
        let c = c as usize;
        counts[c] += 1;
        for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(v) {
            *s += f64::from(x);
        }
    }
    let mut out = vec![0.0f32; k * dim];
    for c in 0..k {
        if counts[c] > 0 {
            for d in 0..dim {
                out[c * dim + d] = (sums[c * dim + d] / counts[c] as f64) as f32;
            }
        }
    }

    let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    if !empties.is_empty() {
        let mut far: Vec<(f64, usize)> = data
            .chunks(dim)
            .zip(assignment)
            .enumerate()
            .map(|(i, (v, &c))| {
                let c = c as usize;
                (squared_l2(v, &previous[c * dim..(c + 1) * dim]), i)
            })
            .collect();
        far.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (c, &(_, i)) in empties.iter().zip(&far) {
            out[c * dim..(c + 1) * dim].copy_from_slice(&data[i * dim..(i + 1) * dim]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn corpus_a() -> Vec<f32> {
        vec![
            0.0, 0.0, 0.1, 0.0, 0.0, 0.1, 0.1, 0.1, 9.9, 10.0, 10.1, 10.0, 10.0, 10.0, 10.0, 10.1,
        ]
    }

    #[test]
    fn corpus_a_converges_to_group_means() {
        let c = train_kmeans(&corpus_a(), 2, 2, 20, 7).unwrap();
        let mut rows: Vec<[f32; 2]> = (0..2).map(|i| [c.row(i)[0], c.row(i)[1]]).collect();
        rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
        let expect = [[0.05f32, 0.05], [10.0, 10.025]];
        for (r, e) in rows.iter().zip(expect) {
            assert!((r[0] - e[0]).abs() < 1e-5 && (r[1] - e[1]).abs() < 1e-5, "{r:?}");
        }
    }

    #[test]
    fn singleton_groups_are_fixed_points() {
        let data = vec![0.0, 0.0, 5.0, 0.0, 0.0, 5.0];
        let c = train_kmeans(&data, 2, 3, 1, 1).unwrap();
        let mut rows: Vec<Vec<f32>> = (0..3).map(|i| c.row(i).to_vec()).collect();
        rows.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
        assert_eq!(rows, vec![vec![0.0, 0.0], vec![0.0, 5.0], vec![5.0, 0.0]]);
    }

    #[test]
    fn deterministic_for_seed() {
        let a = train_kmeans(&corpus_a(), 2, 2, 10, 3).unwrap();
        let b = train_kmeans(&corpus_a(), 2, 2, 10, 3).unwrap();
        let bits = |c: &Centroids| c.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn too_small_corpus_rejected() {
        assert!(matches!(train_kmeans(&[0.0, 1.0], 1, 3, 5, 0), Err(Error::InvalidArgument(_))));
        assert!(train_kmeans(&[0.0, 1.0], 1, 1, 0, 0).is_err());
    }

    #[test]
    fn empty_cluster_reseeds_to_farthest_point() {
        // previous centroid 1 sits far away from everything, so it empties
        let data = vec![0.0f32, 1.0, 2.0, 10.0];
        let assignment = vec![0, 0, 0, 0];
        let previous = vec![1.0f32, 100.0];
        let out = recompute(&data, 1, 2, &assignment, &previous);
        assert_eq!(out, vec![3.25, 10.0]);
    }

    #[test]
    fn duplicate_points_still_yield_k_centroids() {
        let data = vec![1.0f32; 6];
        let c = train_kmeans(&data, 1, 3, 5, 9).unwrap();
        assert_eq!(c.k(), 3);
    }
}
