//! Tabular two-level options learner.
//!
//! Per goal we keep an option-value table `Q_omega(s, o)` driving the
//! policy-over-options and an intra-option table `Q_u(s, o, a)` driving
//! action selection inside the running option. Updates come in two
//! forms: the full termination-weighted bootstrap, and the reduction
//! where every option terminates after one step, which turns both rules
//! into a variation of Q-learning.

use rand::Rng;

use crate::env::{ActionId, FourRoomsWorld, GridPos, StateSpace, Transition};

/// One of the four options; every option is initiable in every state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct OptionId(pub u8);

impl OptionId {
    pub const COUNT: usize = 4;
    pub const ALL: [OptionId; 4] = [OptionId(0), OptionId(1), OptionId(2), OptionId(3)];

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn from_index(i: usize) -> OptionId {
        OptionId(i as u8)
    }
}

/// Hyperparameters for tabular training and evaluation rollouts.
#[derive(Clone, Copy, Debug)]
pub struct LearnerConfig {
    /// Discount factor, in [0, 1).
    pub gamma: f64,
    /// Tabular step size, in (0, 1].
    pub alpha: f64,
    /// Exploration rate during training.
    pub epsilon: f64,
    /// Option termination probability during training rollouts.
    pub beta_train: f64,
    /// Option termination probability during evaluation rollouts.
    pub beta_eval: f64,
    /// Training episode budget per goal.
    pub episodes: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            gamma: 0.99,
            alpha: 0.1,
            epsilon: 0.1,
            beta_train: 1.0,
            beta_eval: 0.5,
            episodes: 500_000,
        }
    }
}

/// Per-goal value tables: `Q_omega` over (state, option) and `Q_u` over
/// (state, option, action). States are indices into a [`StateSpace`].
#[derive(Clone, Debug, PartialEq)]
pub struct TabularHQ {
    pub goal: GridPos,
    n_states: usize,
    q_omega: Vec<f64>,
    q_u: Vec<f64>,
}

impl TabularHQ {
    pub fn new(n_states: usize, goal: GridPos) -> Self {
        TabularHQ {
            goal,
            n_states,
            q_omega: vec![0.0; n_states * OptionId::COUNT],
            q_u: vec![0.0; n_states * OptionId::COUNT * ActionId::COUNT],
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn q_omega(&self, s: usize, o: usize) -> f64 {
        self.q_omega[s * OptionId::COUNT + o]
    }

    pub fn set_q_omega(&mut self, s: usize, o: usize, v: f64) {
        self.q_omega[s * OptionId::COUNT + o] = v;
    }

    /// The `Q_omega(s, .)` row over options.
    pub fn q_omega_row(&self, s: usize) -> &[f64] {
        &self.q_omega[s * OptionId::COUNT..(s + 1) * OptionId::COUNT]
    }

    pub fn q_u(&self, s: usize, o: usize, a: usize) -> f64 {
        self.q_u[(s * OptionId::COUNT + o) * ActionId::COUNT + a]
    }

    pub fn set_q_u(&mut self, s: usize, o: usize, a: usize, v: f64) {
        self.q_u[(s * OptionId::COUNT + o) * ActionId::COUNT + a] = v;
    }

    /// The `Q_u(s, o, .)` row over actions.
    pub fn q_u_row(&self, s: usize, o: usize) -> &[f64] {
        let base = (s * OptionId::COUNT + o) * ActionId::COUNT;
        &self.q_u[base..base + ActionId::COUNT]
    }

    pub fn max_q_omega(&self, s: usize) -> f64 {
        max_of(self.q_omega_row(s))
    }

    pub fn max_q_u(&self, s: usize, o: usize) -> f64 {
        max_of(self.q_u_row(s, o))
    }

    /// Raw row-major storage, `Q_omega` first: used by persistence.
    pub fn raw_tables(&self) -> (&[f64], &[f64]) {
        (&self.q_omega, &self.q_u)
    }

    pub fn from_raw(
        n_states: usize,
        goal: GridPos,
        q_omega: Vec<f64>,
        q_u: Vec<f64>,
    ) -> TabularHQ {
        assert_eq!(q_omega.len(), n_states * OptionId::COUNT);
        assert_eq!(q_u.len(), n_states * OptionId::COUNT * ActionId::COUNT);
        TabularHQ {
            goal,
            n_states,
            q_omega,
            q_u,
        }
    }
}

fn max_of(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// A transition expressed in state indices, ready for table updates.
///
/// `terminal` is true only when the goal was reached; a step-cap
/// truncation still bootstraps through `s_next`.
#[derive(Clone, Copy, Debug)]
pub struct IndexedTransition {
    pub s: usize,
    pub o: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub terminal: bool,
}

/// Expected option value under a given intra-option action distribution:
/// the weighted sum of the `Q_u(s, o, .)` row.
///
/// Panics if the distribution does not sum to 1 within 1e-9.
pub fn q_omega_from_q_u(q_u_row: &[f64], policy: &[f64]) -> f64 {
    assert_eq!(q_u_row.len(), policy.len());
    let total: f64 = policy.iter().sum();
    assert!(
        (total - 1.0).abs() <= 1e-9,
        "policy not normalized: sums to {total}"
    );
    q_u_row.iter().zip(policy).map(|(q, p)| q * p).sum()
}

/// Value of arriving in a state while executing option `o`: continue
/// with probability `1 - beta`, otherwise terminate and let the greedy
/// meta-policy take over.
pub fn u_value(q_omega_row_next: &[f64], o: usize, beta: f64) -> f64 {
    (1.0 - beta) * q_omega_row_next[o] + beta * max_of(q_omega_row_next)
}

/// Full termination-weighted bootstrap for `Q_omega`; `cfg.beta_train`
/// plays the role of the termination probability at `s_next`. Returns
/// the updated entry.
pub fn bootstrap_q_omega(
    table: &mut TabularHQ,
    t: &IndexedTransition,
    cfg: &LearnerConfig,
) -> f64 {
    let continuation = if t.terminal {
        0.0
    } else {
        u_value(table.q_omega_row(t.s_next), t.o, cfg.beta_train)
    };
    let target = t.r + cfg.gamma * continuation;
    let updated = cfg.alpha * target + (1.0 - cfg.alpha) * table.q_omega(t.s, t.o);
    table.set_q_omega(t.s, t.o, updated);
    updated
}

/// `Q_omega` bootstrap when every option terminates everywhere:
/// plain Q-learning over options.
pub fn bootstrap_q_omega_beta1(
    table: &mut TabularHQ,
    t: &IndexedTransition,
    cfg: &LearnerConfig,
) -> f64 {
    let continuation = if t.terminal {
        0.0
    } else {
        max_of(table.q_omega_row(t.s_next))
    };
    let target = t.r + cfg.gamma * continuation;
    let updated = cfg.alpha * target + (1.0 - cfg.alpha) * table.q_omega(t.s, t.o);
    table.set_q_omega(t.s, t.o, updated);
    updated
}

/// Full termination-weighted bootstrap for `Q_u`: continue with the
/// same (option, action) pair or terminate into the option's best
/// action at `s_next`.
pub fn bootstrap_q_u(table: &mut TabularHQ, t: &IndexedTransition, cfg: &LearnerConfig) -> f64 {
    let continuation = if t.terminal {
        0.0
    } else {
        let row = table.q_u_row(t.s_next, t.o);
        (1.0 - cfg.beta_train) * row[t.a] + cfg.beta_train * max_of(row)
    };
    let target = t.r + cfg.gamma * continuation;
    let updated = cfg.alpha * target + (1.0 - cfg.alpha) * table.q_u(t.s, t.o, t.a);
    table.set_q_u(t.s, t.o, t.a, updated);
    updated
}

/// `Q_u` bootstrap in the terminate-everywhere reduction: Q-learning
/// over actions within the fixed option.
pub fn bootstrap_q_u_beta1(
    table: &mut TabularHQ,
    t: &IndexedTransition,
    cfg: &LearnerConfig,
) -> f64 {
    let continuation = if t.terminal {
        0.0
    } else {
        max_of(table.q_u_row(t.s_next, t.o))
    };
    let target = t.r + cfg.gamma * continuation;
    let updated = cfg.alpha * target + (1.0 - cfg.alpha) * table.q_u(t.s, t.o, t.a);
    table.set_q_u(t.s, t.o, t.a, updated);
    updated
}

/// Argmax over a row with uniform tie-breaking.
fn argmax_tiebreak<R: Rng>(row: &[f64], rng: &mut R) -> usize {
    let best = max_of(row);
    let ties: Vec<usize> = row
        .iter()
        .enumerate()
        .filter(|(_, v)| **v == best)
        .map(|(i, _)| i)
        .collect();
    ties[rng.gen_range(0..ties.len())]
}

/// Epsilon-greedy option choice from the `Q_omega(s, .)` row.
pub fn select_option<R: Rng>(
    table: &TabularHQ,
    s: usize,
    epsilon: f64,
    rng: &mut R,
) -> OptionId {
    if rng.gen::<f64>() < epsilon {
        OptionId::from_index(rng.gen_range(0..OptionId::COUNT))
    } else {
        OptionId::from_index(argmax_tiebreak(table.q_omega_row(s), rng))
    }
}

/// Epsilon-greedy action choice from the `Q_u(s, o, .)` row.
pub fn select_action<R: Rng>(
    table: &TabularHQ,
    s: usize,
    o: OptionId,
    epsilon: f64,
    rng: &mut R,
) -> ActionId {
    if rng.gen::<f64>() < epsilon {
        ActionId::from_index(rng.gen_range(0..ActionId::COUNT))
    } else {
        ActionId::from_index(argmax_tiebreak(table.q_u_row(s, o.index()), rng))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Runs one call-and-return episode from a random start.
///
/// An option is selected epsilon-greedily, executes epsilon-greedy
/// actions, and terminates after each step with probability
/// `beta_train` (train) or `beta_eval` (eval). Train mode applies the
/// terminate-everywhere bootstrap updates to both tables on every
/// transition; eval mode is pure greedy (epsilon = 0) and leaves the
/// tables untouched. Episodes end on the goal or after
/// `world.max_steps` steps.
pub fn run_episode<R: Rng>(
    world: &FourRoomsWorld,
    space: &StateSpace,
    table: &mut TabularHQ,
    cfg: &LearnerConfig,
    mode: Mode,
    rng: &mut R,
) -> (usize, Vec<Transition>) {
    let start = world.sample_start(rng);
    run_episode_from(world, space, table, cfg, mode, start, rng)
}

/// [`run_episode`] with an explicit start cell.
pub fn run_episode_from<R: Rng>(
    world: &FourRoomsWorld,
    space: &StateSpace,
    table: &mut TabularHQ,
    cfg: &LearnerConfig,
    mode: Mode,
    start: GridPos,
    rng: &mut R,
) -> (usize, Vec<Transition>) {
    debug_assert_eq!(world.goal, table.goal, "world and table goals disagree");
    match mode {
        Mode::Eval => rollout_episode(world, space, table, 0.0, cfg.beta_eval, start, rng),
        Mode::Train => {
            let mut pos = start;
            let mut transitions = Vec::new();
            let mut option: Option<OptionId> = None;
            let mut steps = 0;
            while steps < world.max_steps {
                let s = space.index_of(pos);
                let o = *option
                    .get_or_insert_with(|| select_option(table, s, cfg.epsilon, rng));
                let a = select_action(table, s, o, cfg.epsilon, rng);
                let (next, r, reached) = world.step(pos, a);
                steps += 1;
                transitions.push(Transition {
                    s: pos,
                    o,
                    a,
                    r,
                    s_next: next,
                    done: reached || steps == world.max_steps,
                });
                let t = IndexedTransition {
                    s,
                    o: o.index(),
                    a: a.index(),
                    r,
                    s_next: space.index_of(next),
                    terminal: reached,
                };
                bootstrap_q_omega_beta1(table, &t, cfg);
                bootstrap_q_u_beta1(table, &t, cfg);
                if reached {
                    break;
                }
                if rng.gen::<f64>() < cfg.beta_train {
                    option = None;
                }
                pos = next;
            }
            (steps, transitions)
        }
    }
}

/// Call-and-return rollout that never mutates the table: used for
/// evaluation and for history collection, where several readers may
/// share one converged learner.
pub fn rollout_episode<R: Rng>(
    world: &FourRoomsWorld,
    space: &StateSpace,
    table: &TabularHQ,
    epsilon: f64,
    beta: f64,
    start: GridPos,
    rng: &mut R,
) -> (usize, Vec<Transition>) {
    let mut pos = start;
    let mut transitions = Vec::new();
    let mut option: Option<OptionId> = None;
    let mut steps = 0;
    while steps < world.max_steps {
        let s = space.index_of(pos);
        let o = *option.get_or_insert_with(|| select_option(table, s, epsilon, rng));
        let a = select_action(table, s, o, epsilon, rng);
        let (next, r, reached) = world.step(pos, a);
        steps += 1;
        transitions.push(Transition {
            s: pos,
            o,
            a,
            r,
            s_next: next,
            done: reached || steps == world.max_steps,
        });
        if reached {
            break;
        }
        if rng.gen::<f64>() < beta {
            option = None;
        }
        pos = next;
    }
    (steps, transitions)
}

/// Trains fresh tables for one goal over `cfg.episodes` episodes.
pub fn train_goal<R: Rng>(
    world: &FourRoomsWorld,
    space: &StateSpace,
    goal: GridPos,
    cfg: &LearnerConfig,
    rng: &mut R,
) -> TabularHQ {
    let world = world.clone().with_goal(goal);
    let mut table = TabularHQ::new(space.len(), goal);
    for _ in 0..cfg.episodes {
        run_episode(&world, space, &mut table, cfg, Mode::Train, rng);
    }
    table
}
