//! Per-goal learner collections and the data they emit.
//!
//! A horde is one tabular learner per goal, all over the same world
//! geometry. Members roll out on their own goals into a shared
//! transition history; off-goal replay relabels each stored transition
//! against every goal and applies the terminate-everywhere bootstrap
//! updates. From converged learners we build either the dense value
//! tensors over all states (the exhaustive route) or the
//! history-indexed data matrices (the transitions-only route).

use rand::Rng;
use rayon::prelude::*;

use crate::env::{ActionId, FourRoomsWorld, GridPos, StateSpace, Transition};
use crate::stage_rng;
use crate::tabular::{
    bootstrap_q_omega_beta1, bootstrap_q_u_beta1, rollout_episode, train_goal, IndexedTransition,
    LearnerConfig, OptionId, TabularHQ,
};
use crate::tensor::DenseTensor;

/// One tabular learner per goal.
#[derive(Clone, Debug)]
pub struct Horde {
    pub goals: Vec<GridPos>,
    pub learners: Vec<TabularHQ>,
}

impl Horde {
    /// Trains every member independently; member `i` derives its RNG
    /// from `seed` and its goal index, so results do not depend on
    /// scheduling.
    pub fn train(
        world: &FourRoomsWorld,
        space: &StateSpace,
        goals: &[GridPos],
        cfg: &LearnerConfig,
        seed: u64,
    ) -> Horde {
        let learners: Vec<TabularHQ> = goals
            .par_iter()
            .enumerate()
            .map(|(i, goal)| {
                let mut rng = stage_rng(seed, &format!("train-goal/{i}"));
                train_goal(world, space, *goal, cfg, &mut rng)
            })
            .collect();
        Horde {
            goals: goals.to_vec(),
            learners,
        }
    }

    pub fn len(&self) -> usize {
        self.goals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.goals.is_empty()
    }

    pub fn learner_for(&self, goal: GridPos) -> Option<&TabularHQ> {
        self.goals
            .iter()
            .position(|g| *g == goal)
            .map(|i| &self.learners[i])
    }
}

/// One stored transition with its episode bookkeeping.
#[derive(Clone, Copy, Debug)]
pub struct HistoryRecord {
    pub episode: usize,
    pub step: usize,
    pub t: Transition,
}

/// Ordered shared history; row `t` of every data matrix refers to
/// `records[t]`.
#[derive(Clone, Debug, Default)]
pub struct TransitionHistory {
    pub records: Vec<HistoryRecord>,
    pub episodes: usize,
}

impl TransitionHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Rolls out `episodes_per_goal` episodes per member, each member on
/// its own goal with its own epsilon-greedy hierarchical policy, and
/// concatenates the transitions in goal order.
pub fn collect_history(
    world: &FourRoomsWorld,
    space: &StateSpace,
    horde: &Horde,
    episodes_per_goal: usize,
    cfg: &LearnerConfig,
    seed: u64,
) -> TransitionHistory {
    let mut history = TransitionHistory::default();
    for (i, (goal, table)) in horde.goals.iter().zip(&horde.learners).enumerate() {
        let world_g = world.clone().with_goal(*goal);
        let mut rng = stage_rng(seed, &format!("collect/{i}"));
        for _ in 0..episodes_per_goal {
            let start = world_g.sample_start(&mut rng);
            let (_, transitions) = rollout_episode(
                &world_g,
                space,
                table,
                cfg.epsilon,
                cfg.beta_train,
                start,
                &mut rng,
            );
            let episode = history.episodes;
            for (step, t) in transitions.into_iter().enumerate() {
                history.records.push(HistoryRecord { episode, step, t });
            }
            history.episodes += 1;
        }
    }
    history
}

/// `b2` replay iterations: each picks a uniform random stored
/// transition, iterates over every goal, relabels the reward (1 iff the
/// transition lands on that goal), and applies the beta-1 bootstrap
/// updates to that goal's tables.
pub fn replay_updates<R: Rng>(
    history: &TransitionHistory,
    horde: &mut Horde,
    b2: usize,
    cfg: &LearnerConfig,
    space: &StateSpace,
    rng: &mut R,
) {
    assert!(!history.is_empty(), "replay on an empty history");
    for _ in 0..b2 {
        let rec = &history.records[rng.gen_range(0..history.len())];
        let s = space.index_of(rec.t.s);
        let s_next = space.index_of(rec.t.s_next);
        for (g, learner) in horde.learners.iter_mut().enumerate() {
            let reached = rec.t.s_next == horde.goals[g];
            let t = IndexedTransition {
                s,
                o: rec.t.o.index(),
                a: rec.t.a.index(),
                r: if reached { 1.0 } else { 0.0 },
                s_next,
                terminal: reached,
            };
            bootstrap_q_omega_beta1(learner, &t, cfg);
            bootstrap_q_u_beta1(learner, &t, cfg);
        }
    }
}

/// Dense value tensors over every free state, option, (action,) and
/// goal: shapes (|S|, |O|, |G|) and (|S|, |O|, |A|, |G|).
pub fn build_full_tensors(space: &StateSpace, horde: &Horde) -> (DenseTensor, DenseTensor) {
    let n_s = space.len();
    let n_o = OptionId::COUNT;
    let n_a = ActionId::COUNT;
    let n_g = horde.len();
    let mut omega = DenseTensor::zeros(&[n_s, n_o, n_g]);
    let mut u = DenseTensor::zeros(&[n_s, n_o, n_a, n_g]);
    for s in 0..n_s {
        for o in 0..n_o {
            for (g, learner) in horde.learners.iter().enumerate() {
                omega.set(&[s, o, g], learner.q_omega(s, o));
                for a in 0..n_a {
                    u.set(&[s, o, a, g], learner.q_u(s, o, a));
                }
            }
        }
    }
    (omega, u)
}

/// History-indexed option-value matrix: `M[t][g] = Q_omega_g(s_t, o_t)`.
#[derive(Clone, Debug)]
pub struct DataMatrixOmega {
    pub tensor: DenseTensor,
}

/// History-indexed intra-option tensor: `N[t][g][o] = Q_u_g(s_t, o, a_t)`,
/// the observed action's value stored for every option.
#[derive(Clone, Debug)]
pub struct DataTensorU {
    pub tensor: DenseTensor,
}

/// Populates both data structures from the history and the current
/// tables, using only stored transitions.
pub fn build_data_matrices(
    history: &TransitionHistory,
    horde: &Horde,
    space: &StateSpace,
) -> (DataMatrixOmega, DataTensorU) {
    let n_t = history.len();
    let n_g = horde.len();
    let n_o = OptionId::COUNT;
    let mut m = DenseTensor::zeros(&[n_t, n_g]);
    let mut n = DenseTensor::zeros(&[n_t, n_g, n_o]);
    for (t, rec) in history.records.iter().enumerate() {
        let s = space.index_of(rec.t.s);
        for (g, learner) in horde.learners.iter().enumerate() {
            m.set(&[t, g], learner.q_omega(s, rec.t.o.index()));
            for o in 0..n_o {
                n.set(&[t, g, o], learner.q_u(s, o, rec.t.a.index()));
            }
        }
    }
    (DataMatrixOmega { tensor: m }, DataTensorU { tensor: n })
}
