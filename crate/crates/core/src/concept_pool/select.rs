//! Per-class concept selectors. Each returns exactly `k_per_class` concepts
//! per class; ties always resolve toward the lower canonical index.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ConceptPool;
use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, Matrix, NORM_EPS};
use crate::seeded_rng;

const TIE_EPS: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the best score; `better(a, b)` says whether `a` beats `b` by more than a tie.
fn argbest(scores: impl Iterator<Item = (usize, f64)>, maximize: bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores {
        let wins = match best {
            None => true,
            Some((_, b)) if maximize => s > b + TIE_EPS,
            Some((_, b)) => s < b - TIE_EPS,
        };
        if wins {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

fn per_class(
    pool: &ConceptPool,
    k_per_class: usize,
    mut pick: impl FnMut(usize, &[usize]) -> Result<Vec<usize>>,
) -> Result<ConceptPool> {
    pool.check_k(k_per_class)?;
    let classes: Vec<String> = pool.classes().map(str::to_owned).collect();
    let mut chosen = Vec::new();
    for (ci, class) in classes.iter().enumerate() {
        let members = pool.class_indices(class);
        let local = pick(ci, &members)?;
        debug_assert_eq!(local.len(), k_per_class);
        chosen.extend(local.into_iter().map(|j| members[j]));
    }
    Ok(pool.subset(&chosen))
}

/// Seeded uniform sampling without replacement within each class.
pub fn select_random(pool: &ConceptPool, k_per_class: usize, seed: u64) -> Result<ConceptPool> {
    per_class(pool, k_per_class, |ci, members| {
        let mut rng = seeded_rng(seed, ci as u64);
        Ok(sample(&mut rng, members.len(), k_per_class).into_vec())
    })
}

/// Picks, for each of the top singular directions of a class's embedding
/// matrix, the concept best aligned with it.
///
/// Alignment is the absolute cosine between the direction and the part of a
/// candidate's embedding not already spanned by earlier picks, so duplicated
/// embeddings are not chosen twice while a new direction remains.
pub fn select_svd(pool: &ConceptPool, k_per_class: usize) -> Result<ConceptPool> {
    let emb = pool.embeddings();
    per_class(pool, k_per_class, |_, members| {
        let x = emb.select_rows(members);
        Ok(svd_pick(&x, k_per_class))
    })
}

fn svd_pick(x: &Matrix, k: usize) -> Vec<usize> {
    let (m, d) = x.shape();
    let dm = DMatrix::from_row_slice(m, d, x.data());
    let svd = dm.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let directions: Vec<Vec<f64>> = order
        .iter()
        .filter(|&&j| svd.singular_values[j] > 1e-10)
        .map(|&j| v_t.row(j).iter().copied().collect())
        .collect();

    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut selected = Vec::with_capacity(k);
    let mut taken = vec![false; m];
    for step in 0..k {
        let residuals: Vec<Option<Vec<f64>>> = (0..m)
            .map(|i| {
                if taken[i] {
                    return None;
                }
                let mut r = x.row(i).to_vec();
                for b in &basis {
                    let p = dot(&r, b);
                    r.iter_mut().zip(b).for_each(|(ri, bi)| *ri -= p * bi);
                }
                Some(r)
            })
            .collect();
        let score = |i: usize, r: &Vec<f64>| -> (usize, f64) {
            let norm = dot(r, r).sqrt();
            if norm < 1e-9 {
                return (i, 0.0);
            }
            match directions.get(step) {
                Some(dir) => (i, dot(r, dir).abs() / norm),
                None => (i, norm),
            }
        };
        let best = argbest(
            residuals
                .iter()
                .enumerate()
                .filter_map(|(i, r)| r.as_ref().map(|r| score(i, r))),
            true,
        )
        .expect("k does not exceed class size");
        taken[best] = true;
        selected.push(best);
        let r = residuals[best].as_ref().unwrap();
        let norm = dot(r, r).sqrt();
        if norm >= 1e-9 {
            basis.push(r.iter().map(|v| v / norm).collect());
        }
    }
    selected
}

/// Seeded k-means within each class (squared Euclidean on unit embeddings),
/// then the concept nearest each final center.
pub fn select_kmeans(pool: &ConceptPool, k_per_class: usize, seed: u64, max_iters: usize) -> Result<ConceptPool> {
    let emb = pool.embeddings();
    per_class(pool, k_per_class, |ci, members| {
        let x = emb.select_rows(members);
        let mut rng = seeded_rng(seed, ci as u64);
        Ok(kmeans_pick(&x, k_per_class, max_iters, &mut rng))
    })
}

fn kmeans_pick(x: &Matrix, k: usize, max_iters: usize, rng: &mut impl Rng) -> Vec<usize> {
    let m = x.rows();
    let init = sample(rng, m, k).into_vec();
    let mut centers = x.select_rows(&init);
    let mut assign: Vec<usize> = vec![usize::MAX; m];
    for _ in 0..max_iters {
        let next: Vec<usize> = (0..m)
            .map(|i| argbest((0..k).map(|c| (c, sq_dist(x.row(i), centers.row(c)))), false).unwrap())
            .collect();
        if next == assign {
            break;
        }
        assign = next;
        for c in 0..k {
            let members: Vec<usize> = (0..m).filter(|&i| assign[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            let row = centers.row_mut(c);
            row.iter_mut().for_each(|v| *v = 0.0);
            for &i in &members {
                row.iter_mut().zip(x.row(i)).for_each(|(r, v)| *r += v);
            }
            row.iter_mut().for_each(|v| *v /= members.len() as f64);
        }
    }
    let mut taken = vec![false; m];
    (0..k)
        .map(|c| {
            let best = argbest(
                (0..m)
                    .filter(|&i| !taken[i])
                    .map(|i| (i, sq_dist(x.row(i), centers.row(c)))),
                false,
            )
            .unwrap();
            taken[best] = true;
            best
        })
        .collect()
}

/// Mean cosine similarity of every concept against the reference images.
pub fn mean_similarities(pool: &ConceptPool, images: &Matrix) -> Result<Vec<f64>> {
    if images.rows() == 0 {
        return Err(Error::EmptyReferenceSet);
    }
    if images.cols() != pool.dim() {
        return Err(Error::shape(
            "mean_similarities",
            images.shape(),
            (pool.len(), pool.dim()),
        ));
    }
    let imgs = l2_normalize_rows(images, NORM_EPS);
    let sims = imgs.matmul(&pool.embeddings().transpose())?;
    let mut means = vec![0.0; pool.len()];
    for row in sims.iter_rows() {
        means.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    let n = images.rows() as f64;
    means.iter_mut().for_each(|m| *m /= n);
    Ok(means)
}

/// Top-k concepts per class by mean similarity to the reference images.
pub fn select_by_similarity(pool: &ConceptPool, k_per_class: usize, images: &Matrix) -> Result<ConceptPool> {
    let means = mean_similarities(pool, images)?;
    per_class(pool, k_per_class, |_, members| {
        let mut order: Vec<usize> = (0..members.len()).collect();
        order.sort_by(|&a, &b| {
            means[members[b]]
                .partial_cmp(&means[members[a]])
                .unwrap()
                .then(a.cmp(&b))
        });
        order.truncate(k_per_class);
        Ok(order)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmodularWeights {
    pub lambda_disc: f64,
    pub lambda_div: f64,
}

impl Default for SubmodularWeights {
    fn default() -> Self {
        SubmodularWeights {
            lambda_disc: 1.0,
            lambda_div: 1.0,
        }
    }
}

/// Discriminability of one concept: mean similarity mapped from [-1,1] to [0,1].
pub fn discriminability(mean_sim: f64) -> f64 {
    0.5 * (1.0 + mean_sim)
}

/// Facility-location coverage `Σ_c max(0, max_{s∈S} cos(c, s))` over the rows
/// of `class_emb`, for the selected row indices `selected`.
pub fn coverage(class_emb: &Matrix, selected: &[usize]) -> f64 {
    (0..class_emb.rows())
        .map(|c| {
            selected
                .iter()
                .map(|&s| dot(class_emb.row(c), class_emb.row(s)))
                .fold(0.0, f64::max)
        })
        .sum()
}

/// The greedy path: chosen local indices, marginal gain of each pick and the
/// objective after each pick.
#[derive(Clone, Debug, PartialEq)]
pub struct GreedyTrace {
    pub order: Vec<usize>,
    pub gains: Vec<f64>,
    pub objective: Vec<f64>,
}

/// Greedy maximization of
/// `F(S) = λ_disc Σ_{s∈S} disc(s) + λ_div coverage(S)` over the rows of `class_emb`.
pub fn submodular_greedy(class_emb: &Matrix, mean_sims: &[f64], k: usize, weights: SubmodularWeights) -> GreedyTrace {
    let m = class_emb.rows();
    assert_eq!(mean_sims.len(), m);
    let sims: Vec<Vec<f64>> = (0..m)
        .map(|a| (0..m).map(|b| dot(class_emb.row(a), class_emb.row(b))).collect())
        .collect();
    // best[c]: current max(0, max_{s∈S} cos(c,s))
    let mut best = vec![0.0_f64; m];
    let mut taken = vec![false; m];
    let mut trace = GreedyTrace {
        order: Vec::with_capacity(k),
        gains: Vec::with_capacity(k),
        objective: Vec::with_capacity(k),
    };
    let mut value = 0.0;
    for _ in 0..k {
        let gain_of = |cand: usize| -> f64 {
            let cov: f64 = (0..m).map(|c| (sims[c][cand] - best[c]).max(0.0)).sum();
            weights.lambda_disc * discriminability(mean_sims[cand]) + weights.lambda_div * cov
        };
        let pick = argbest((0..m).filter(|&i| !taken[i]).map(|i| (i, gain_of(i))), true)
            .expect("k does not exceed class size");
        let gain = gain_of(pick);
        taken[pick] = true;
        for c in 0..m {
            best[c] = best[c].max(sims[c][pick]);
        }
        value += gain;
        trace.order.push(pick);
        trace.gains.push(gain);
        trace.objective.push(value);
    }
    trace
}

/// Greedy discriminability-plus-diversity selection within each class.
pub fn select_submodular(
    pool: &ConceptPool,
    k_per_class: usize,
    images: &Matrix,
    weights: SubmodularWeights,
) -> Result<ConceptPool> {
    let means = mean_similarities(pool, images)?;
    let emb = pool.embeddings();
    per_class(pool, k_per_class, |_, members| {
        let class_emb = emb.select_rows(members);
        let class_means: Vec<f64> = members.iter().map(|&i| means[i]).collect();
        Ok(submodular_greedy(&class_emb, &class_means, k_per_class, weights).order)
    })
}
