//! Bayesian-optimization proposer: a pool of random and locally perturbed
//! candidates ranked by Expected Improvement.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::{Configuration, SearchSpace, SpaceError};
use crate::surrogate::{expected_improvement, GpModel, SurrogateError};
use crate::tree::{NodeId, Tree};

pub const N_RANDOM: usize = 50;
pub const N_LOCAL_PER_NODE: usize = 5;
pub const POOL_CAP: usize = 500;

#[derive(Debug, Error)]
pub enum BoError {
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    Random,
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub config: Configuration,
    pub source: CandidateSource,
    /// Algo node for random candidates, the perturbed hp node for local ones.
    pub parent: NodeId,
}

/// `N_RANDOM` uniform samples plus `N_LOCAL_PER_NODE` perturbations of every
/// hp node under `algo`. When the pool would exceed `POOL_CAP`, the local
/// portion is subsampled uniformly.
pub fn generate_candidates<R: Rng + ?Sized>(
    tree: &Tree,
    algo: NodeId,
    space: &SearchSpace,
    rng: &mut R,
) -> Result<Vec<Candidate>, SpaceError> {
    let alg_id = tree.node(algo).algorithm.clone().unwrap_or_default();
    let mut pool = Vec::with_capacity(POOL_CAP);
    for _ in 0..N_RANDOM {
        pool.push(Candidate {
            config: space.sample_random(&alg_id, rng)?,
            source: CandidateSource::Random,
            parent: algo,
        });
    }
    let hp_nodes = tree.subtree_hp_nodes(algo);
    let slots = hp_nodes.len() * N_LOCAL_PER_NODE;
    let room = POOL_CAP - N_RANDOM;
    let chosen: Vec<usize> = if slots > room {
        let mut idx = index::sample(rng, slots, room).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..slots).collect()
    };
    for slot in chosen {
        let node = hp_nodes[slot / N_LOCAL_PER_NODE];
        let base = tree.node(node).config.as_ref().expect("hp nodes carry a configuration");
        pool.push(Candidate {
            config: space.perturb_local(base, rng)?,
            source: CandidateSource::Local,
            parent: node,
        });
    }
    Ok(pool)
}

/// Index of the largest EI among `(mean, variance)` pairs, lowest index on ties.
pub fn argmax_ei(stats: &[(f64, f64)], best_y: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &(m, v)) in stats.iter().enumerate() {
        let ei = expected_improvement(m, v, best_y);
        if best.is_none_or(|(_, b)| ei > b) {
            best = Some((i, ei));
        }
    }
    best.map(|(i, _)| i)
}

/// Picks a pool index: argmax EI over `best_y_algo` with a model, otherwise
/// a uniformly random member of the random-source subset.
pub fn propose<R: Rng + ?Sized>(
    pool: &[Candidate],
    model: Option<&GpModel>,
    best_y_algo: f64,
    space: &SearchSpace,
    rng: &mut R,
) -> Result<usize, BoError> {
    if pool.is_empty() {
        return Err(BoError::EmptyPool);
    }
    match model {
        Some(m) => {
            let encoded = pool
                .iter()
                .map(|c| space.encode(&c.config))
                .collect::<Result<Vec<_>, SpaceError>>()?;
            let stats = m.predict_batch(&encoded)?;
            argmax_ei(&stats, best_y_algo).ok_or(BoError::EmptyPool)
        }
        None => {
            let random: Vec<usize> = pool
                .iter()
                .enumerate()
                .filter(|(_, c)| c.source == CandidateSource::Random)
                .map(|(i, _)| i)
                .collect();
            if random.is_empty() {
                return Err(BoError::EmptyPool);
            }
            Ok(random[rng.random_range(0..random.len())])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{AlgorithmSpace, ParamSpec, TaskKind};
    use crate::surrogate::AlgoDataset;
    use crate::tree::ActionLabel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space() -> SearchSpace {
        SearchSpace::new(
            vec![AlgorithmSpace {
                id: "a".into(),
                params: vec![ParamSpec::float("x", 0.0, 1.0, false), ParamSpec::cat("c", &["p", "q"])],
            }],
            TaskKind::Regression,
            "neg_mse",
        )
        .unwrap()
    }

    fn grow(tree: &mut Tree, space: &SearchSpace, n: usize, rng: &mut ChaCha8Rng) {
        let algo = tree.algo_node(0);
        for _ in 0..n {
            let id = tree.add_child(algo, space.sample_random("a", rng).unwrap(), ActionLabel::BoRandom).unwrap();
            tree.set_outcome(id, 0.0, None);
        }
    }

    #[test]
    fn pool_sizes() {
        let s = space();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tree::new(["a"]);
        let algo = t.algo_node(0);
        let pool = generate_candidates(&t, algo, &s, &mut rng).unwrap();
        assert_eq!(pool.len(), 50);
        assert!(pool.iter().all(|c| c.source == CandidateSource::Random && c.parent == algo));

        grow(&mut t, &s, 4, &mut rng);
        let pool = generate_candidates(&t, algo, &s, &mut rng).unwrap();
        assert_eq!(pool.len(), 70);
        assert!(pool.iter().filter(|c| c.source == CandidateSource::Local).all(|c| c.parent != algo));

        grow(&mut t, &s, 196, &mut rng);
        let pool = generate_candidates(&t, algo, &s, &mut rng).unwrap();
        assert_eq!(pool.len(), 500);
        assert_eq!(pool.iter().filter(|c| c.source == CandidateSource::Random).count(), 50);
        for c in &pool {
            s.validate(&c.config).unwrap();
        }
    }

    #[test]
    fn ei_argmax_breaks_ties_low() {
        // (mean, var) chosen so that EI = 0.1, 0.9, 0.9 with zero variance
        let stats = [(0.1, 0.0), (0.9, 0.0), (0.9, 0.0)];
        assert_eq!(argmax_ei(&stats, 0.0), Some(1));
    }

    #[test]
    fn cold_start_picks_random_source() {
        let s = space();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tree::new(["a"]);
        grow(&mut t, &s, 3, &mut rng);
        let pool = generate_candidates(&t, t.algo_node(0), &s, &mut rng).unwrap();
        for _ in 0..50 {
            let i = propose(&pool, None, 0.0, &s, &mut rng).unwrap();
            assert_eq!(pool[i].source, CandidateSource::Random);
        }
        assert!(matches!(propose(&[], None, 0.0, &s, &mut rng), Err(BoError::EmptyPool)));
    }

    #[test]
    fn chosen_candidate_maximizes_ei() {
        let s = space();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tree::new(["a"]);
        grow(&mut t, &s, 6, &mut rng);
        let mut data = AlgoDataset::new("a");
        for i in 0..8 {
            let cfg = s.sample_random("a", &mut rng).unwrap();
            let x = cfg.get("x").unwrap().as_f64().unwrap();
            data.push(s.encode(&cfg).unwrap(), -(x - 0.3f64).powi(2) + i as f64 * 1e-3);
        }
        let model = GpModel::fit(&data).unwrap();
        let best = data.best().unwrap();
        let pool = generate_candidates(&t, t.algo_node(0), &s, &mut rng).unwrap();
        let i = propose(&pool, Some(&model), best, &s, &mut rng).unwrap();
        let ei = |c: &Candidate| {
            let (m, v) = model.predict(&s.encode(&c.config).unwrap()).unwrap();
            expected_improvement(m, v, best)
        };
        let chosen = ei(&pool[i]);
        assert!(pool.iter().all(|c| ei(c) <= chosen));
    }
}
