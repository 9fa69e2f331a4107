//! Assembled value models and the pipelines that build them.
//!
//! A value model is a set of stream networks whose embeddings are
//! combined by the product-sum `h`: the value is the sum over the rank
//! of the product of one embedding component per stream. The
//! hierarchical pair keeps one model per level: option values
//! `Q_omega(s, g, o)` and intra-option values `Q_u(s, g, o, a)`.
//!
//! Four builds share this machinery:
//!
//! - supervised: dense tensors over all states, one stream per tensor
//!   axis (state / option / goal, plus action at the lower level);
//! - reinforcement-learning: history-indexed data matrices, with a
//!   joint (state, option) row stream at the top level and a joint
//!   (state, action) row stream plus an option stream at the lower
//!   level;
//! - the two-stream baselines of both pipelines, which compress the
//!   whole (state, option[, action]) tuple into a single stream.

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::env::{ActionId, FourRoomsWorld, GridPos, StateSpace};
use crate::horde::{build_data_matrices, build_full_tensors, Horde, TransitionHistory};
use crate::net::{
    encode_action, encode_cell, encode_option, solve_output_layer, train_stream, NetError,
    StreamNet, TrainConfig,
};
use crate::tabular::OptionId;
use crate::tensor::{
    cp_als_smoothed, gaussian_laplacian, relative_error, spread_scale, AxisSmoother, CpFactors,
    CpInit, DenseTensor, TensorError,
};
use crate::{stage_rng, sub_seed};

#[derive(Error, Debug)]
pub enum BuildError {
    #[error("tensor decomposition failed: {0}")]
    Tensor(#[from] TensorError),
    #[error("stream training failed: {0}")]
    Net(#[from] NetError),
    #[error("transition history is empty")]
    EmptyHistory,
}

/// What a stream network reads as input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamInput {
    State,
    Goal,
    Option,
    Action,
    StateOption,
    StateAction,
    StateOptionAction,
}

impl StreamInput {
    pub fn dim(self) -> usize {
        match self {
            StreamInput::State | StreamInput::Goal => 2,
            StreamInput::Option | StreamInput::Action => 4,
            StreamInput::StateOption | StreamInput::StateAction => 6,
            StreamInput::StateOptionAction => 10,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StreamInput::State => "state",
            StreamInput::Goal => "goal",
            StreamInput::Option => "option",
            StreamInput::Action => "action",
            StreamInput::StateOption => "state_option",
            StreamInput::StateAction => "state_action",
            StreamInput::StateOptionAction => "state_option_action",
        }
    }

    pub fn from_name(name: &str) -> Option<StreamInput> {
        Some(match name {
            "state" => StreamInput::State,
            "goal" => StreamInput::Goal,
            "option" => StreamInput::Option,
            "action" => StreamInput::Action,
            "state_option" => StreamInput::StateOption,
            "state_action" => StreamInput::StateAction,
            "state_option_action" => StreamInput::StateOptionAction,
            _ => return None,
        })
    }

    fn uses_option(self) -> bool {
        matches!(
            self,
            StreamInput::Option | StreamInput::StateOption | StreamInput::StateOptionAction
        )
    }

    fn uses_action(self) -> bool {
        matches!(
            self,
            StreamInput::Action | StreamInput::StateAction | StreamInput::StateOptionAction
        )
    }

    /// Raw features for this stream. `a` may be omitted for models
    /// whose streams never read the action.
    pub fn encode(self, s: GridPos, g: GridPos, o: OptionId, a: Option<ActionId>) -> Vec<f64> {
        let need_a = || a.expect("stream requires an action");
        match self {
            StreamInput::State => encode_cell(s),
            StreamInput::Goal => encode_cell(g),
            StreamInput::Option => encode_option(o),
            StreamInput::Action => encode_action(need_a()),
            StreamInput::StateOption => [encode_cell(s), encode_option(o)].concat(),
            StreamInput::StateAction => [encode_cell(s), encode_action(need_a())].concat(),
            StreamInput::StateOptionAction => {
                [encode_cell(s), encode_option(o), encode_action(need_a())].concat()
            }
        }
    }
}

/// One stream network with its input wiring.
#[derive(Clone, Debug)]
pub struct Stream {
    pub input: StreamInput,
    pub net: StreamNet,
}

/// Product-sum combiner: sum over the rank of the product of one
/// component per embedding. Two streams degenerate to a dot product.
pub fn h_combine(embeddings: &[&[f64]]) -> f64 {
    let rank = embeddings[0].len();
    for e in embeddings {
        assert_eq!(e.len(), rank, "embedding rank mismatch");
    }
    let mut total = 0.0;
    for r in 0..rank {
        let mut prod = 1.0;
        for e in embeddings {
            prod *= e[r];
        }
        total += prod;
    }
    total
}

/// A multi-stream value function: embeddings from every stream,
/// reduced to a scalar by [`h_combine`].
#[derive(Clone, Debug)]
pub struct ValueModel {
    pub streams: Vec<Stream>,
}

impl ValueModel {
    pub fn rank(&self) -> usize {
        self.streams[0].net.output_size()
    }

    pub fn value(&self, s: GridPos, g: GridPos, o: OptionId, a: Option<ActionId>) -> f64 {
        let embs: Vec<Vec<f64>> = self
            .streams
            .iter()
            .map(|st| st.net.forward(&st.input.encode(s, g, o, a)))
            .collect();
        let views: Vec<&[f64]> = embs.iter().map(|e| e.as_slice()).collect();
        h_combine(&views)
    }

    /// Values for all four options at once, evaluating option-independent
    /// streams a single time.
    pub fn option_values(&self, s: GridPos, g: GridPos) -> Vec<f64> {
        let fixed: Vec<Option<Vec<f64>>> = self
            .streams
            .iter()
            .map(|st| {
                if st.input.uses_option() {
                    None
                } else {
                    Some(st.net.forward(&st.input.encode(s, g, OptionId(0), None)))
                }
            })
            .collect();
        OptionId::ALL
            .iter()
            .map(|o| {
                let embs: Vec<Vec<f64>> = self
                    .streams
                    .iter()
                    .zip(&fixed)
                    .map(|(st, f)| match f {
                        Some(e) => e.clone(),
                        None => st.net.forward(&st.input.encode(s, g, *o, None)),
                    })
                    .collect();
                let views: Vec<&[f64]> = embs.iter().map(|e| e.as_slice()).collect();
                h_combine(&views)
            })
            .collect()
    }

    /// Values for all four actions at fixed (state, goal, option).
    pub fn action_values(&self, s: GridPos, g: GridPos, o: OptionId) -> Vec<f64> {
        let fixed: Vec<Option<Vec<f64>>> = self
            .streams
            .iter()
            .map(|st| {
                if st.input.uses_action() {
                    None
                } else {
                    Some(st.net.forward(&st.input.encode(s, g, o, None)))
                }
            })
            .collect();
        ActionId::ALL
            .iter()
            .map(|a| {
                let embs: Vec<Vec<f64>> = self
                    .streams
                    .iter()
                    .zip(&fixed)
                    .map(|(st, f)| match f {
                        Some(e) => e.clone(),
                        None => st.net.forward(&st.input.encode(s, g, o, Some(*a))),
                    })
                    .collect();
                let views: Vec<&[f64]> = embs.iter().map(|e| e.as_slice()).collect();
                h_combine(&views)
            })
            .collect()
    }
}

/// Which pipeline produced a model pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BuildKind {
    Supervised,
    Rl,
    UvfaSupervised,
    UvfaRl,
}

impl BuildKind {
    pub fn name(self) -> &'static str {
        match self {
            BuildKind::Supervised => "supervised",
            BuildKind::Rl => "rl",
            BuildKind::UvfaSupervised => "uvfa-supervised",
            BuildKind::UvfaRl => "uvfa-rl",
        }
    }

    pub fn from_name(name: &str) -> Option<BuildKind> {
        Some(match name {
            "supervised" => BuildKind::Supervised,
            "rl" => BuildKind::Rl,
            "uvfa-supervised" => BuildKind::UvfaSupervised,
            "uvfa-rl" => BuildKind::UvfaRl,
            _ => return None,
        })
    }
}

/// The two-level value function pair.
#[derive(Clone, Debug)]
pub struct HierValueModel {
    pub kind: BuildKind,
    pub omega: ValueModel,
    pub u: ValueModel,
}

impl HierValueModel {
    /// Approximate option value `Q_omega(s, g, o)`.
    pub fn q_omega(&self, s: GridPos, g: GridPos, o: OptionId) -> f64 {
        self.omega.value(s, g, o, None)
    }

    /// Approximate intra-option value `Q_u(s, g, o, a)`.
    pub fn q_u(&self, s: GridPos, g: GridPos, o: OptionId, a: ActionId) -> f64 {
        self.u.value(s, g, o, Some(a))
    }

    pub fn greedy_option(&self, s: GridPos, g: GridPos) -> OptionId {
        OptionId::from_index(argmax(&self.omega.option_values(s, g)))
    }

    pub fn greedy_action(&self, s: GridPos, g: GridPos, o: OptionId) -> ActionId {
        ActionId::from_index(argmax(&self.u.action_values(s, g, o)))
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-sweep decomposition traces and per-stream loss traces of a build.
#[derive(Clone, Debug, Default)]
pub struct BuildReport {
    pub omega_error: f64,
    pub u_error: f64,
    pub omega_trace: Vec<f64>,
    pub u_trace: Vec<f64>,
    /// (level, stream name, per-epoch mean loss)
    pub stream_losses: Vec<(String, String, Vec<f64>)>,
}

/// A built model pair along with its factors and diagnostics.
#[derive(Clone, Debug)]
pub struct BuiltModel {
    pub model: HierValueModel,
    pub omega_factors: CpFactors,
    pub u_factors: CpFactors,
    pub report: BuildReport,
}

/// ALS budget shared by every build.
const ALS_MAX_ITERS: usize = 500;
const ALS_TOL: f64 = 1e-6;

/// Knobs of a model build, shared by all four pipelines.
#[derive(Clone, Copy, Debug)]
pub struct BuildOptions {
    /// Embedding rank of every stream.
    pub rank: usize,
    /// Stream-network training settings.
    pub tc: TrainConfig,
    /// Master seed; decomposition and per-stream nets derive named
    /// sub-seeds from it.
    pub seed: u64,
    /// Ridge on the decomposition's normal equations. Far stronger
    /// than bare solvability demands: at embedding rank 50 the rank
    /// exceeds what the data determines, and an unregularized ALS
    /// parks huge mutually-cancelling components in the redundant
    /// subspace, inflating the factor rows with structure no small
    /// stream net can regress. The ridge shrinks that subspace,
    /// costing a little reconstruction error.
    pub ridge: f64,
    /// Laplacian coupling strength on the goal axis: goal embeddings
    /// are penalized for differing between spatially close goals, so
    /// the goal-stream regression has a smooth map to learn and can
    /// extrapolate to goals it never saw.
    pub goal_smoothness: f64,
    /// Output-layer solve ridge for goal streams. Goal nets see only
    /// the training goals; an exact interpolation extrapolates wildly
    /// into the held-out room.
    pub goal_solve_ridge: f64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            rank: 50,
            tc: TrainConfig::default(),
            seed: 0,
            ridge: 1e-2,
            goal_smoothness: 1.0,
            goal_solve_ridge: 1e-3,
        }
    }
}

/// Bandwidth (in cells) of the Gaussian goal-adjacency graph behind
/// the goal-axis smoother.
const GOAL_GRAPH_SIGMA: f64 = 3.0;

fn goal_smoother(goals: &[GridPos], axis: usize, strength: f64) -> AxisSmoother {
    let laplacian = gaussian_laplacian(
        goals.len(),
        |i, j| {
            let dx = goals[i].x as f64 - goals[j].x as f64;
            let dy = goals[i].y as f64 - goals[j].y as f64;
            dx * dx + dy * dy
        },
        GOAL_GRAPH_SIGMA,
    );
    AxisSmoother {
        axis,
        laplacian,
        strength,
    }
}

struct StreamSpec {
    level: &'static str,
    input: StreamInput,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

/// Trains one net per spec in parallel; each net's RNG is derived from
/// the master seed and its (level, stream) name.
fn train_streams(
    specs: Vec<StreamSpec>,
    opts: &BuildOptions,
) -> Result<(Vec<(String, Stream)>, Vec<(String, String, Vec<f64>)>), BuildError> {
    let tc = &opts.tc;
    let results: Vec<Result<(String, Stream, Vec<f64>), NetError>> = specs
        .into_par_iter()
        .map(|spec| {
            let mut rng =
                stage_rng(opts.seed, &format!("net/{}/{}", spec.level, spec.input.name()));
            let mut net = StreamNet::new_kinked(spec.input.dim(), opts.rank, &mut rng);
            let batch = match spec.input {
                StreamInput::Option | StreamInput::Action => tc.batch_option_action,
                _ => tc.batch_state_goal,
            };
            let mut trace = train_stream(
                &mut net,
                &spec.inputs,
                &spec.targets,
                tc.lr,
                batch,
                tc.epochs,
                &mut rng,
            )?;
            // SGD shapes the hidden basis; the linear output layer is
            // then solved in closed form, which finishes the badly
            // conditioned tail SGD cannot.
            let solve_ridge = if spec.input == StreamInput::Goal {
                opts.goal_solve_ridge
            } else {
                1e-8
            };
            let final_loss = solve_output_layer(&mut net, &spec.inputs, &spec.targets, solve_ridge)?;
            trace.push(final_loss);
            Ok((
                spec.level.to_string(),
                Stream {
                    input: spec.input,
                    net,
                },
                trace,
            ))
        })
        .collect();
    let mut streams = Vec::new();
    let mut losses = Vec::new();
    for r in results {
        let (level, stream, trace) = r?;
        losses.push((level.clone(), stream.input.name().to_string(), trace));
        streams.push((level, stream));
    }
    Ok((streams, losses))
}

fn factor_targets(factors: &CpFactors, axis: usize) -> Vec<Vec<f64>> {
    (0..factors.axis_len(axis))
        .map(|i| factors.row(axis, i))
        .collect()
}

fn state_inputs(space: &StateSpace) -> Vec<Vec<f64>> {
    space.cells().iter().map(|p| encode_cell(*p)).collect()
}

fn goal_inputs(goals: &[GridPos]) -> Vec<Vec<f64>> {
    goals.iter().map(|g| encode_cell(*g)).collect()
}

fn option_inputs() -> Vec<Vec<f64>> {
    OptionId::ALL.iter().map(|o| encode_option(*o)).collect()
}

fn action_inputs() -> Vec<Vec<f64>> {
    ActionId::ALL.iter().map(|a| encode_action(*a)).collect()
}

fn assemble(
    kind: BuildKind,
    streams: Vec<(String, Stream)>,
    omega_order: &[StreamInput],
    u_order: &[StreamInput],
) -> HierValueModel {
    let pick = |level: &str, order: &[StreamInput]| -> ValueModel {
        let picked = order
            .iter()
            .map(|input| {
                streams
                    .iter()
                    .find(|(l, s)| l == level && s.input == *input)
                    .expect("stream missing from build")
                    .1
                    .clone()
            })
            .collect();
        ValueModel { streams: picked }
    };
    HierValueModel {
        kind,
        omega: pick("omega", omega_order),
        u: pick("u", u_order),
    }
}

/// Supervised pipeline: dense tensors over every (state, option[,
/// action], goal), CP decomposition at the embedding rank, one stream
/// per tensor axis.
pub fn build_supervised(
    space: &StateSpace,
    horde: &Horde,
    opts: &BuildOptions,
) -> Result<BuiltModel, BuildError> {
    let (omega_t, u_t) = build_full_tensors(space, horde);
    let rank = opts.rank;
    let seed = opts.seed;
    let omega_d = cp_als_smoothed(
        &omega_t,
        rank,
        ALS_MAX_ITERS,
        ALS_TOL,
        sub_seed(seed, "als/omega"),
        opts.ridge,
        CpInit::Hosvd,
        Some(&goal_smoother(&horde.goals, 2, opts.goal_smoothness)),
    )?;
    let u_d = cp_als_smoothed(
        &u_t,
        rank,
        ALS_MAX_ITERS,
        ALS_TOL,
        sub_seed(seed, "als/u"),
        opts.ridge,
        CpInit::Hosvd,
        Some(&goal_smoother(&horde.goals, 3, opts.goal_smoothness)),
    )?;
    // Even scale across factors keeps every stream's targets O(1).
    let omega_f = spread_scale(&omega_d.factors);
    let u_f = spread_scale(&u_d.factors);

    let specs = vec![
        StreamSpec {
            level: "omega",
            input: StreamInput::State,
            inputs: state_inputs(space),
            targets: factor_targets(&omega_f, 0),
        },
        StreamSpec {
            level: "omega",
            input: StreamInput::Option,
            inputs: option_inputs(),
            targets: factor_targets(&omega_f, 1),
        },
        StreamSpec {
            level: "omega",
            input: StreamInput::Goal,
            inputs: goal_inputs(&horde.goals),
            targets: factor_targets(&omega_f, 2),
        },
        StreamSpec {
            level: "u",
            input: StreamInput::State,
            inputs: state_inputs(space),
            targets: factor_targets(&u_f, 0),
        },
        StreamSpec {
            level: "u",
            input: StreamInput::Option,
            inputs: option_inputs(),
            targets: factor_targets(&u_f, 1),
        },
        StreamSpec {
            level: "u",
            input: StreamInput::Action,
            inputs: action_inputs(),
            targets: factor_targets(&u_f, 2),
        },
        StreamSpec {
            level: "u",
            input: StreamInput::Goal,
            inputs: goal_inputs(&horde.goals),
            targets: factor_targets(&u_f, 3),
        },
    ];
    let (streams, losses) = train_streams(specs, opts)?;

    let report = BuildReport {
        omega_error: relative_error(&omega_t, &omega_f),
        u_error: relative_error(&u_t, &u_f),
        omega_trace: omega_d.error_trace.clone(),
        u_trace: u_d.error_trace.clone(),
        stream_losses: losses,
    };
    Ok(BuiltModel {
        model: assemble(
            BuildKind::Supervised,
            streams,
            &[StreamInput::State, StreamInput::Option, StreamInput::Goal],
            &[
                StreamInput::State,
                StreamInput::Option,
                StreamInput::Action,
                StreamInput::Goal,
            ],
        ),
        omega_factors: omega_f,
        u_factors: u_f,
        report,
    })
}

/// Reinforcement-learning pipeline: decomposes the history-indexed
/// data matrices. The 2-D option-value matrix couples (state, option)
/// in its row stream; the 3-D intra-option tensor couples (state,
/// action) in its row stream and keeps a separate option stream.
pub fn build_rl(
    space: &StateSpace,
    horde: &Horde,
    history: &TransitionHistory,
    opts: &BuildOptions,
) -> Result<BuiltModel, BuildError> {
    if history.is_empty() {
        return Err(BuildError::EmptyHistory);
    }
    let rank = opts.rank;
    let seed = opts.seed;
    let (m, n) = build_data_matrices(history, horde, space);
    let m_d = cp_als_smoothed(
        &m.tensor,
        rank,
        ALS_MAX_ITERS,
        ALS_TOL,
        sub_seed(seed, "als/omega"),
        opts.ridge,
        CpInit::Hosvd,
        Some(&goal_smoother(&horde.goals, 1, opts.goal_smoothness)),
    )?;
    let n_d = cp_als_smoothed(
        &n.tensor,
        rank,
        ALS_MAX_ITERS,
        ALS_TOL,
        sub_seed(seed, "als/u"),
        opts.ridge,
        CpInit::Hosvd,
        Some(&goal_smoother(&horde.goals, 1, opts.goal_smoothness)),
    )?;
    let m_f = spread_scale(&m_d.factors);
    let n_f = spread_scale(&n_d.factors);

    let row_so: Vec<Vec<f64>> = history
        .records
        .iter()
        .map(|r| StreamInput::StateOption.encode(r.t.s, r.t.s, r.t.o, None))
        .collect();
    let row_sa: Vec<Vec<f64>> = history
        .records
        .iter()
        .map(|r| StreamInput::StateAction.encode(r.t.s, r.t.s, r.t.o, Some(r.t.a)))
        .collect();

    let specs = vec![
        StreamSpec {
            level: "omega",
            input: StreamInput::StateOption,
            inputs: row_so,
            targets: factor_targets(&m_f, 0),
        },
        StreamSpec {
            level: "omega",
            input: StreamInput::Goal,
            inputs: goal_inputs(&horde.goals),
            targets: factor_targets(&m_f, 1),
        },
        StreamSpec {
            level: "u",
            input: StreamInput::StateAction,
            inputs: row_sa,
            targets: factor_targets(&n_f, 0),
        },
        StreamSpec {
            level: "u",
            input: StreamInput::Goal,
            inputs: goal_inputs(&horde.goals),
            targets: factor_targets(&n_f, 1),
        },
        StreamSpec {
            level: "u",
            input: StreamInput::Option,
            inputs: option_inputs(),
            targets: factor_targets(&n_f, 2),
        },
    ];
    let (streams, losses) = train_streams(specs, opts)?;

    let report = BuildReport {
        omega_error: relative_error(&m.tensor, &m_f),
        u_error: relative_error(&n.tensor, &n_f),
        omega_trace: m_d.error_trace.clone(),
        u_trace: n_d.error_trace.clone(),
        stream_losses: losses,
    };
    Ok(BuiltModel {
        model: assemble(
            BuildKind::Rl,
            streams,
            &[StreamInput::StateOption, StreamInput::Goal],
            &[StreamInput::StateAction, StreamInput::Goal, StreamInput::Option],
        ),
        omega_factors: m_f,
        u_factors: n_f,
        report,
    })
}

/// Two-stream baseline over the supervised tensors: matricize to
/// ((state, option), goal) and ((state, option, action), goal), then
/// factorize and regress a single joint row stream per level.
pub fn build_uvfa_supervised(
    space: &StateSpace,
    horde: &Horde,
    opts: &BuildOptions,
) -> Result<BuiltModel, BuildError> {
    let (omega_t, u_t) = build_full_tensors(space, horde);
    let rank = opts.rank;
    let seed = opts.seed;
    let n_s = space.len();
    let n_g = horde.len();
    // Row-major layout lets the leading axes flatten in place.
    let omega_m = DenseTensor::from_data(&[n_s * 4, n_g], omega_t.data().to_vec())?;
    let u_m = DenseTensor::from_data(&[n_s * 16, n_g], u_t.data().to_vec())?;

    let omega_d = cp_als_smoothed(
        &omega_m,
        rank,
        ALS_MAX_ITERS,
        ALS_TOL,
        sub_seed(seed, "als/omega"),
        opts.ridge,
        CpInit::Hosvd,
        Some(&goal_smoother(&horde.goals, 1, opts.goal_smoothness)),
    )?;
    let u_d = cp_als_smoothed(
        &u_m,
        rank,
        ALS_MAX_ITERS,
        ALS_TOL,
        sub_seed(seed, "als/u"),
        opts.ridge,
        CpInit::Hosvd,
        Some(&goal_smoother(&horde.goals, 1, opts.goal_smoothness)),
    )?;
    let omega_f = spread_scale(&omega_d.factors);
    let u_f = spread_scale(&u_d.factors);

    let mut row_so = Vec::with_capacity(n_s * 4);
    let mut row_soa = Vec::with_capacity(n_s * 16);
    for p in space.cells() {
        for o in OptionId::ALL {
            row_so.push(StreamInput::StateOption.encode(*p, *p, o, None));
            for a in ActionId::ALL {
                row_soa.push(StreamInput::StateOptionAction.encode(*p, *p, o, Some(a)));
            }
        }
    }

    let specs = vec![
        StreamSpec {
            level: "omega",
            input: StreamInput::StateOption,
            inputs: row_so,
            targets: factor_targets(&omega_f, 0),
        },
        StreamSpec {
            level: "omega",
            input: StreamInput::Goal,
            inputs: goal_inputs(&horde.goals),
            targets: factor_targets(&omega_f, 1),
        },
        StreamSpec {
            level: "u",
            input: StreamInput::StateOptionAction,
            inputs: row_soa,
            targets: factor_targets(&u_f, 0),
        },
        StreamSpec {
            level: "u",
            input: StreamInput::Goal,
            inputs: goal_inputs(&horde.goals),
            targets: factor_targets(&u_f, 1),
        },
    ];
    let (streams, losses) = train_streams(specs, opts)?;

    let report = BuildReport {
        omega_error: relative_error(&omega_m, &omega_f),
        u_error: relative_error(&u_m, &u_f),
        omega_trace: omega_d.error_trace.clone(),
        u_trace: u_d.error_trace.clone(),
        stream_losses: losses,
    };
    Ok(BuiltModel {
        model: assemble(
            BuildKind::UvfaSupervised,
            streams,
            &[StreamInput::StateOption, StreamInput::Goal],
            &[StreamInput::StateOptionAction, StreamInput::Goal],
        ),
        omega_factors: omega_f,
        u_factors: u_f,
        report,
    })
}

/// Two-stream baseline from the transition history: the option-value
/// matrix is shared with [`build_rl`]; the intra-option level stores
/// only the observed (option, action) value per row, compressing the
/// whole tuple into one stream.
pub fn build_uvfa_rl(
    space: &StateSpace,
    horde: &Horde,
    history: &TransitionHistory,
    opts: &BuildOptions,
) -> Result<BuiltModel, BuildError> {
    if history.is_empty() {
        return Err(BuildError::EmptyHistory);
    }
    let rank = opts.rank;
    let seed = opts.seed;
    let (m, n) = build_data_matrices(history, horde, space);
    // Observed-option slice of N: rows keyed by (s_t, o_t, a_t).
    let n_t = history.len();
    let n_g = horde.len();
    let mut u_m = DenseTensor::zeros(&[n_t, n_g]);
    for (t, rec) in history.records.iter().enumerate() {
        for g in 0..n_g {
            u_m.set(&[t, g], n.tensor.get(&[t, g, rec.t.o.index()]));
        }
    }

    let m_d = cp_als_smoothed(
        &m.tensor,
        rank,
        ALS_MAX_ITERS,
        ALS_TOL,
        sub_seed(seed, "als/omega"),
        opts.ridge,
        CpInit::Hosvd,
        Some(&goal_smoother(&horde.goals, 1, opts.goal_smoothness)),
    )?;
    let u_d = cp_als_smoothed(
        &u_m,
        rank,
        ALS_MAX_ITERS,
        ALS_TOL,
        sub_seed(seed, "als/u"),
        opts.ridge,
        CpInit::Hosvd,
        Some(&goal_smoother(&horde.goals, 1, opts.goal_smoothness)),
    )?;
    let m_f = spread_scale(&m_d.factors);
    let u_f = spread_scale(&u_d.factors);

    let row_so: Vec<Vec<f64>> = history
        .records
        .iter()
        .map(|r| StreamInput::StateOption.encode(r.t.s, r.t.s, r.t.o, None))
        .collect();
    let row_soa: Vec<Vec<f64>> = history
        .records
        .iter()
        .map(|r| StreamInput::StateOptionAction.encode(r.t.s, r.t.s, r.t.o, Some(r.t.a)))
        .collect();

    let specs = vec![
        StreamSpec {
            level: "omega",
            input: StreamInput::StateOption,
            inputs: row_so,
            targets: factor_targets(&m_f, 0),
        },
        StreamSpec {
            level: "omega",
            input: StreamInput::Goal,
            inputs: goal_inputs(&horde.goals),
            targets: factor_targets(&m_f, 1),
        },
        StreamSpec {
            level: "u",
            input: StreamInput::StateOptionAction,
            inputs: row_soa,
            targets: factor_targets(&u_f, 0),
        },
        StreamSpec {
            level: "u",
            input: StreamInput::Goal,
            inputs: goal_inputs(&horde.goals),
            targets: factor_targets(&u_f, 1),
        },
    ];
    let (streams, losses) = train_streams(specs, opts)?;

    let report = BuildReport {
        omega_error: relative_error(&m.tensor, &m_f),
        u_error: relative_error(&u_m, &u_f),
        omega_trace: m_d.error_trace.clone(),
        u_trace: u_d.error_trace.clone(),
        stream_losses: losses,
    };
    Ok(BuiltModel {
        model: assemble(
            BuildKind::UvfaRl,
            streams,
            &[StreamInput::StateOption, StreamInput::Goal],
            &[StreamInput::StateOptionAction, StreamInput::Goal],
        ),
        omega_factors: m_f,
        u_factors: u_f,
        report,
    })
}


/// Steps-to-goal statistics over greedy rollouts for one goal.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub goal: GridPos,
    pub steps: Vec<usize>,
    pub reached: Vec<bool>,
    pub mean_steps: f64,
    /// Sample standard deviation (n - 1) of the per-episode steps.
    pub sd_steps: f64,
    pub success_rate: f64,
}

impl EvalReport {
    pub fn from_outcomes(goal: GridPos, outcomes: Vec<(usize, bool)>) -> EvalReport {
        let steps: Vec<usize> = outcomes.iter().map(|(s, _)| *s).collect();
        let reached: Vec<bool> = outcomes.iter().map(|(_, r)| *r).collect();
        let n = steps.len() as f64;
        let mean = steps.iter().sum::<usize>() as f64 / n;
        let var = if steps.len() > 1 {
            steps
                .iter()
                .map(|s| (*s as f64 - mean) * (*s as f64 - mean))
                .sum::<f64>()
                / (n - 1.0)
        } else {
            0.0
        };
        let success = reached.iter().filter(|r| **r).count() as f64 / n;
        EvalReport {
            goal,
            steps,
            reached,
            mean_steps: mean,
            sd_steps: var.sqrt(),
            success_rate: success,
        }
    }

    pub fn episodes(&self) -> usize {
        self.steps.len()
    }
}

/// Greedy call-and-return rollouts under a built model: the greedy
/// option executes greedy actions and terminates with probability
/// `beta_eval` after each step, upon which the then-current state picks
/// the next option.
pub fn greedy_rollout<R: Rng>(
    model: &HierValueModel,
    world: &FourRoomsWorld,
    goal: GridPos,
    episodes: usize,
    beta_eval: f64,
    rng: &mut R,
) -> EvalReport {
    let world = world.clone().with_goal(goal);
    let mut outcomes = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut pos = world.sample_start(rng);
        let mut option: Option<OptionId> = None;
        let mut steps = 0;
        let mut reached = false;
        while steps < world.max_steps {
            let o = *option.get_or_insert_with(|| model.greedy_option(pos, goal));
            let a = model.greedy_action(pos, goal, o);
            let (next, _, done) = world.step(pos, a);
            steps += 1;
            if done {
                reached = true;
                break;
            }
            if rng.gen::<f64>() < beta_eval {
                option = None;
            }
            pos = next;
        }
        outcomes.push((steps, reached));
    }
    EvalReport::from_outcomes(goal, outcomes)
}

/// Per-cell greedy value and action under the model for one goal: the
/// value of the greedy option and the greedy action within it.
pub fn value_policy_field(
    model: &HierValueModel,
    world: &FourRoomsWorld,
    goal: GridPos,
) -> Vec<(GridPos, f64, ActionId)> {
    world
        .free_cells()
        .into_iter()
        .map(|p| {
            let ov = model.omega.option_values(p, goal);
            let oi = argmax(&ov);
            let a = model.greedy_action(p, goal, OptionId::from_index(oi));
            (p, ov[oi], a)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::FourRoomsWorld;
    use crate::tensor::cp_reconstruct;
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_model(seed: u64, rank: usize) -> HierValueModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stream = |input: StreamInput, rng: &mut ChaCha8Rng| Stream {
            input,
            net: StreamNet::new(input.dim(), rank, rng),
        };
        HierValueModel {
            kind: BuildKind::Supervised,
            omega: ValueModel {
                streams: vec![
                    stream(StreamInput::State, &mut rng),
                    stream(StreamInput::Option, &mut rng),
                    stream(StreamInput::Goal, &mut rng),
                ],
            },
            u: ValueModel {
                streams: vec![
                    stream(StreamInput::State, &mut rng),
                    stream(StreamInput::Option, &mut rng),
                    stream(StreamInput::Action, &mut rng),
                    stream(StreamInput::Goal, &mut rng),
                ],
            },
        }
    }

    #[test]
    fn h_combine_two_streams_is_dot_product() {
        let a = [1.0, 2.0, 3.0];
        let b = [4.0, 0.5, -1.0];
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert_eq!(h_combine(&[&a, &b]), dot);
    }

    #[test]
    fn h_combine_zero_stream_annihilates() {
        let a = [1.0, 2.0];
        let z = [0.0, 0.0];
        let c = [3.0, -1.0];
        assert_eq!(h_combine(&[&a, &z, &c]), 0.0);
    }

    #[test]
    fn h_combine_matches_explicit_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut oracle = 0.0;
            for r in 0..6 {
                oracle += a[r] * b[r] * c[r];
            }
            assert!((h_combine(&[&a, &b, &c]) - oracle).abs() < 1e-14);
        }
    }

    #[test]
    #[should_panic(expected = "rank mismatch")]
    fn h_combine_rejects_mixed_ranks() {
        h_combine(&[&[1.0, 2.0], &[1.0]]);
    }

    #[test]
    fn factor_rows_through_h_combine_equal_cp_entry() {
        // Bypassing the nets and combining raw factor rows must agree
        // with the tensor reconstruction exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let factors = CpFactors {
            rank: 4,
            factors: vec![
                DMatrix::from_fn(5, 4, |_, _| rng.gen::<f64>()),
                DMatrix::from_fn(3, 4, |_, _| rng.gen::<f64>()),
                DMatrix::from_fn(6, 4, |_, _| rng.gen::<f64>()),
            ],
        };
        for i in 0..5 {
            for j in 0..3 {
                for k in 0..6 {
                    let rows = [factors.row(0, i), factors.row(1, j), factors.row(2, k)];
                    let views: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
                    assert_eq!(
                        h_combine(&views),
                        crate::tensor::cp_entry(&factors, &[i, j, k])
                    );
                }
            }
        }
    }

    #[test]
    fn zeroed_goal_stream_zeroes_every_value() {
        let mut model = random_model(3, 5);
        for st in &mut model.omega.streams {
            if st.input == StreamInput::Goal {
                st.net.w1.fill(0.0);
                st.net.b1.fill(0.0);
                st.net.w2.fill(0.0);
                st.net.b2.fill(0.0);
            }
        }
        let g = GridPos::new(9, 9);
        for x in 1..4 {
            for o in OptionId::ALL {
                assert_eq!(model.q_omega(GridPos::new(x, 1), g, o), 0.0);
            }
        }
    }

    #[test]
    fn scaling_one_stream_scales_values_linearly() {
        let model = random_model(4, 6);
        let s = GridPos::new(2, 3);
        let g = GridPos::new(9, 9);
        let base: Vec<f64> = OptionId::ALL
            .iter()
            .map(|o| model.q_omega(s, g, *o))
            .collect();
        let mut scaled = model.clone();
        scaled.omega.streams[0].net.w2 *= 3.0;
        scaled.omega.streams[0].net.b2 *= 3.0;
        for (o, b) in OptionId::ALL.iter().zip(&base) {
            let v = scaled.q_omega(s, g, *o);
            assert!((v - 3.0 * b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn scaling_any_stream_preserves_greedy_choices() {
        let world = FourRoomsWorld::load_layout();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let model = random_model(100 + trial, 5);
            let g = GridPos::new(10, 10);
            let c = if rng.gen::<bool>() { 10.0 } else { 0.1 };
            // Scale one random stream at each level.
            let mut scaled = model.clone();
            let oi = rng.gen_range(0..scaled.omega.streams.len());
            scaled.omega.streams[oi].net.w2 *= c;
            scaled.omega.streams[oi].net.b2 *= c;
            let ui = rng.gen_range(0..scaled.u.streams.len());
            scaled.u.streams[ui].net.w2 *= c;
            scaled.u.streams[ui].net.b2 *= c;
            for p in world.free_cells() {
                let o1 = model.greedy_option(p, g);
                let o2 = scaled.greedy_option(p, g);
                assert_eq!(o1, o2, "greedy option changed at {p} (c = {c})");
                assert_eq!(
                    model.greedy_action(p, g, o1),
                    scaled.greedy_action(p, g, o1),
                    "greedy action changed at {p} (c = {c})"
                );
            }
        }
    }

    #[test]
    fn option_and_action_values_match_direct_evaluation() {
        let model = random_model(6, 4);
        let s = GridPos::new(3, 3);
        let g = GridPos::new(9, 9);
        let ov = model.omega.option_values(s, g);
        for (i, o) in OptionId::ALL.iter().enumerate() {
            assert!((ov[i] - model.q_omega(s, g, *o)).abs() < 1e-12);
        }
        let av = model.u.action_values(s, g, OptionId(2));
        for (i, a) in ActionId::ALL.iter().enumerate() {
            assert!((av[i] - model.q_u(s, g, OptionId(2), *a)).abs() < 1e-12);
        }
    }

    #[test]
    fn nets_memorizing_synthetic_factors_reproduce_cp_values() {
        // Synthetic factors with the smoothness the real ones inherit
        // from the value tensors (factor rows are linear images of the
        // matching tensor slices): affine in the cell coordinates for
        // the state and goal axes, free rows for the four options. Nets
        // trained on them must reproduce cp_entry through h_combine
        // within 1e-3.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let world = FourRoomsWorld::load_layout();
        let space = StateSpace::new(&world);
        let cells: Vec<GridPos> = space.cells()[..8].to_vec();
        let goals: Vec<GridPos> = space.cells()[40..44].to_vec();
        let rank = 3;
        let mut affine = |ps: &[GridPos], rng: &mut ChaCha8Rng| {
            let coef: Vec<[f64; 3]> = (0..rank)
                .map(|_| {
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-0.5..0.5),
                    ]
                })
                .collect();
            DMatrix::from_fn(ps.len(), rank, |i, r| {
                let e = encode_cell(ps[i]);
                coef[r][0] * e[0] + coef[r][1] * e[1] + coef[r][2]
            })
        };
        let state_f = affine(&cells, &mut rng);
        let goal_f = affine(&goals, &mut rng);
        let factors = CpFactors {
            rank,
            factors: vec![
                state_f,
                DMatrix::from_fn(4, rank, |_, _| rng.gen_range(-1.0..1.0)),
                goal_f,
            ],
        };
        let recon = cp_reconstruct(&factors);

        let mut nets = Vec::new();
        for (axis, inputs, batch) in [
            (0usize, cells.iter().map(|p| encode_cell(*p)).collect::<Vec<_>>(), 4usize),
            (1, option_inputs(), 2),
            (2, goals.iter().map(|p| encode_cell(*p)).collect::<Vec<_>>(), 4),
        ] {
            let targets = factor_targets(&factors, axis);
            let mut net = StreamNet::new(inputs[0].len(), rank, &mut rng);
            train_stream(&mut net, &inputs, &targets, 0.05, batch, 30_000, &mut rng).unwrap();
            nets.push(net);
        }
        let mut worst: f64 = 0.0;
        for (i, p) in cells.iter().enumerate() {
            for (j, o) in OptionId::ALL.iter().enumerate() {
                for (k, g) in goals.iter().enumerate() {
                    let e0 = nets[0].forward(&encode_cell(*p));
                    let e1 = nets[1].forward(&encode_option(*o));
                    let e2 = nets[2].forward(&encode_cell(*g));
                    let v = h_combine(&[&e0, &e1, &e2]);
                    worst = worst.max((v - recon.get(&[i, j, k])).abs());
                }
            }
        }
        assert!(worst <= 1e-3, "worst deviation {worst}");
    }

    #[test]
    fn eval_report_statistics() {
        let r = EvalReport::from_outcomes(
            GridPos::new(1, 1),
            vec![(10, true), (20, true), (1000, false), (30, true)],
        );
        assert_eq!(r.episodes(), 4);
        assert!((r.mean_steps - 265.0).abs() < 1e-12);
        assert!((r.success_rate - 0.75).abs() < 1e-12);
        // Sample sd against a hand-computed value.
        let mean = 265.0;
        let var = [10.0f64, 20.0, 1000.0, 30.0]
            .iter()
            .map(|s| (s - mean) * (s - mean))
            .sum::<f64>()
            / 3.0;
        assert!((r.sd_steps - var.sqrt()).abs() < 1e-9);
        assert!((0.0..=1.0).contains(&r.success_rate));
    }
}
