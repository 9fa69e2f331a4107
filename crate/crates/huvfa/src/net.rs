//! Stream embedding networks.
//!
//! Each stream maps one raw input (state coordinates, goal coordinates,
//! an option one-hot, an action one-hot, or a concatenation for joint
//! streams) to a rank-sized embedding through a single 128-unit
//! rectified-linear hidden layer. Training is shuffled minibatch SGD on
//! mean squared error against factor rows.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::env::{ActionId, GridPos};
use crate::tabular::OptionId;

/// Hidden width of every stream network.
pub const HIDDEN: usize = 128;

/// Version tag of the input featurization, recorded in model bundles.
pub const CODEC_VERSION: &str = "coords-v1";

#[derive(Error, Debug)]
pub enum NetError {
    #[error("feature length {got} does not match input size {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("input/target counts differ: {inputs} vs {targets}")]
    CountMismatch { inputs: usize, targets: usize },
}

/// Normalized coordinate pair for a cell, in [0, 1] on both axes.
pub fn encode_cell(p: GridPos) -> Vec<f64> {
    vec![p.x as f64 / 12.0, p.y as f64 / 12.0]
}

pub fn encode_option(o: OptionId) -> Vec<f64> {
    let mut v = vec![0.0; OptionId::COUNT];
    v[o.index()] = 1.0;
    v
}

pub fn encode_action(a: ActionId) -> Vec<f64> {
    let mut v = vec![0.0; ActionId::COUNT];
    v[a.index()] = 1.0;
    v
}

/// Training hyperparameters shared by every stream of a build.
///
/// State, goal, and joint row streams train with `batch_state_goal`;
/// the 4-sample option and action streams use `batch_option_action`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_state_goal: usize,
    pub batch_option_action: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            batch_state_goal: 16,
            batch_option_action: 2,
            epochs: 2000,
            seed: 0,
        }
    }
}

/// One stream: input -> 128 rectified linear -> linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamNet {
    pub w1: DMatrix<f64>, // (HIDDEN, input)
    pub b1: DVector<f64>, // (HIDDEN)
    pub w2: DMatrix<f64>, // (output, HIDDEN)
    pub b2: DVector<f64>, // (output)
}

impl StreamNet {
    /// Fresh network with uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let lim1 = 1.0 / (input as f64).sqrt();
        let lim2 = 1.0 / (HIDDEN as f64).sqrt();
        StreamNet {
            w1: DMatrix::from_fn(HIDDEN, input, |_, _| rng.gen_range(-lim1..lim1)),
            b1: DVector::from_fn(HIDDEN, |_, _| rng.gen_range(-lim1..lim1)),
            w2: DMatrix::from_fn(output, HIDDEN, |_, _| rng.gen_range(-lim2..lim2)),
            b2: DVector::from_fn(output, |_, _| rng.gen_range(-lim2..lim2)),
        }
    }

    /// Init for inputs living in the unit hypercube: each hidden
    /// unit's rectifier kink is placed uniformly inside the input
    /// domain's projection range along a random direction. The default
    /// init leaves most kinks outside the data, which caps the usable
    /// basis rank far below the unit count.
    pub fn new_kinked<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let mut net = Self::new(input, output, rng);
        for i in 0..HIDDEN {
            let w: Vec<f64> = (0..input).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lo: f64 = w.iter().map(|v| v.min(0.0)).sum();
            let hi: f64 = w.iter().map(|v| v.max(0.0)).sum();
            let t = rng.gen_range(lo..hi.max(lo + 1e-9));
            for (j, wj) in w.iter().enumerate() {
                net.w1[(i, j)] = *wj;
            }
            net.b1[i] = -t;
        }
        net
    }

    pub fn input_size(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_size(&self) -> usize {
        self.w2.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Forward pass: linear, rectified linear, linear.
    pub fn forward(&self, features: &[f64]) -> Vec<f64> {
        assert_eq!(
            features.len(),
            self.input_size(),
            "feature length {} does not match input size {}",
            features.len(),
            self.input_size()
        );
        let x = DVector::from_column_slice(features);
        let mut h = &self.w1 * x + &self.b1;
        for v in h.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let y = &self.w2 * h + &self.b2;
        y.iter().copied().collect()
    }

    /// Hidden pre-activations, exposed for the finite-difference
    /// gradient tests to steer clear of rectifier kinks.
    pub fn hidden_preactivations(&self, features: &[f64]) -> Vec<f64> {
        let x = DVector::from_column_slice(features);
        let z = &self.w1 * x + &self.b1;
        z.iter().copied().collect()
    }
}

/// Parameter gradients matching [`StreamNet`] layout.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

/// Mean over components of the squared differences.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len());
    let n = pred.len() as f64;
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

/// Single-sample loss and parameter gradients by reverse accumulation.
pub fn backward(net: &StreamNet, features: &[f64], target: &[f64]) -> (f64, Gradients) {
    assert_eq!(features.len(), net.input_size());
    assert_eq!(target.len(), net.output_size());
    let x = DVector::from_column_slice(features);
    let z1 = &net.w1 * &x + &net.b1;
    let h = z1.map(|v| v.max(0.0));
    let y = &net.w2 * &h + &net.b2;

    let t = DVector::from_column_slice(target);
    let diff = &y - &t;
    let m = target.len() as f64;
    let loss = diff.norm_squared() / m;

    // dL/dy = 2 (y - t) / m
    let dy = diff.scale(2.0 / m);
    let gw2 = &dy * h.transpose();
    let gb2 = dy.clone();
    let mut dz1 = net.w2.transpose() * dy;
    for (i, v) in dz1.iter_mut().enumerate() {
        if z1[i] <= 0.0 {
            *v = 0.0;
        }
    }
    let gw1 = &dz1 * x.transpose();
    let gb1 = dz1;

    (
        loss,
        Gradients {
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
        },
    )
}

/// Shuffled minibatch SGD for `epochs` passes. Returns the per-epoch
/// mean training loss.
pub fn train_stream<R: Rng>(
    net: &mut StreamNet,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    lr: f64,
    batch_size: usize,
    epochs: usize,
    rng: &mut R,
) -> Result<Vec<f64>, NetError> {
    if inputs.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    if inputs.len() != targets.len() {
        return Err(NetError::CountMismatch {
            inputs: inputs.len(),
            targets: targets.len(),
        });
    }
    for x in inputs {
        if x.len() != net.input_size() {
            return Err(NetError::DimensionMismatch {
                expected: net.input_size(),
                got: x.len(),
            });
        }
    }
    let batch = batch_size.max(1);
    let n = inputs.len();
    let dim_in = net.input_size();
    let dim_out = net.output_size();
    // Column-per-sample layout so a minibatch is one matrix product.
    let x_all = DMatrix::from_fn(dim_in, n, |r, c| inputs[c][r]);
    let t_all = DMatrix::from_fn(dim_out, n, |r, c| targets[c][r]);

    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let b = chunk.len();
            let x = x_all.select_columns(chunk.iter());
            let t = t_all.select_columns(chunk.iter());
            let ones = DVector::from_element(b, 1.0);

            let z1 = &net.w1 * &x + &net.b1 * ones.transpose();
            let h = z1.map(|v| v.max(0.0));
            let y = &net.w2 * &h + &net.b2 * ones.transpose();
            let diff = y - &t;
            let loss = diff.norm_squared() / (dim_out as f64 * b as f64);

            // Batch-mean of the per-sample mean-squared-error gradients.
            let dy = diff.scale(2.0 / (dim_out as f64 * b as f64));
            let gw2 = &dy * h.transpose();
            let gb2 = &dy * &ones;
            let mut dz1 = net.w2.transpose() * dy;
            for (v, z) in dz1.iter_mut().zip(z1.iter()) {
                if *z <= 0.0 {
                    *v = 0.0;
                }
            }
            let gw1 = &dz1 * x.transpose();
            let gb1 = &dz1 * &ones;

            net.w1 -= gw1.scale(lr);
            net.b1 -= gb1.scale(lr);
            net.w2 -= gw2.scale(lr);
            net.b2 -= gb2.scale(lr);
            epoch_loss += loss;
            batches += 1;
        }
        trace.push(epoch_loss / batches as f64);
    }
    Ok(trace)
}

/// Solves the output layer exactly against the current hidden basis.
///
/// With the hidden layer frozen, the output weights are an ordinary
/// ridge-regularized linear regression on the rectified activations.
/// Minibatch SGD shapes the basis but stalls on this ill-conditioned
/// linear tail; one closed-form solve finishes the job. Returns the
/// final mean loss.
pub fn solve_output_layer(
    net: &mut StreamNet,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    ridge: f64,
) -> Result<f64, NetError> {
    if inputs.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    if inputs.len() != targets.len() {
        return Err(NetError::CountMismatch {
            inputs: inputs.len(),
            targets: targets.len(),
        });
    }
    let n = inputs.len();
    let dim_out = net.output_size();
    // Augmented design matrix: rectified activations plus a bias row.
    let mut phi = DMatrix::zeros(HIDDEN + 1, n);
    for (c, x) in inputs.iter().enumerate() {
        if x.len() != net.input_size() {
            return Err(NetError::DimensionMismatch {
                expected: net.input_size(),
                got: x.len(),
            });
        }
        let xv = DVector::from_column_slice(x);
        let h = (&net.w1 * xv + &net.b1).map(|v| v.max(0.0));
        for r in 0..HIDDEN {
            phi[(r, c)] = h[r];
        }
        phi[(HIDDEN, c)] = 1.0;
    }
    let t = DMatrix::from_fn(dim_out, n, |r, c| targets[c][r]);
    let mut gram = &phi * phi.transpose();
    let scale = gram.trace() / (HIDDEN + 1) as f64;
    for i in 0..HIDDEN + 1 {
        gram[(i, i)] += ridge * scale.max(1e-12);
    }
    let rhs = &phi * t.transpose(); // (HIDDEN+1, out)
    let chol = gram.cholesky().expect("ridged Gram is positive definite");
    let solved = chol.solve(&rhs); // (HIDDEN+1, out)
    for r in 0..dim_out {
        for c in 0..HIDDEN {
            net.w2[(r, c)] = solved[(c, r)];
        }
        net.b2[r] = solved[(HIDDEN, r)];
    }
    // Final loss over the dataset.
    let mut total = 0.0;
    for (x, tgt) in inputs.iter().zip(targets) {
        total += mse_loss(&net.forward(x), tgt);
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss_of(net: &StreamNet, x: &[f64], t: &[f64]) -> f64 {
        mse_loss(&net.forward(x), t)
    }

    #[test]
    fn codec_is_injective_and_bounded() {
        let world = crate::env::FourRoomsWorld::load_layout();
        let mut seen = std::collections::HashSet::new();
        for p in world.free_cells() {
            let e = encode_cell(p);
            assert!(e.iter().all(|v| (0.0..=1.0).contains(v)));
            let key = format!("{:.6},{:.6}", e[0], e[1]);
            assert!(seen.insert(key), "cell encoding collision at {p}");
        }
        let opts: Vec<Vec<f64>> = OptionId::ALL.iter().map(|o| encode_option(*o)).collect();
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert_ne!(opts[i], opts[j]);
            }
        }
    }

    #[test]
    fn zero_net_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = StreamNet::new(2, 3, &mut rng);
        net.w1.fill(0.0);
        net.b1.fill(0.0);
        net.w2.fill(0.0);
        net.b2.fill(0.0);
        assert_eq!(net.forward(&[0.3, 0.7]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn single_positive_path_scales_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = StreamNet::new(1, 1, &mut rng);
        net.w1.fill(0.0);
        net.b1.fill(0.0);
        net.w2.fill(0.0);
        net.b2.fill(0.0);
        net.w1[(0, 0)] = 2.0;
        net.w2[(0, 0)] = 3.0;
        // Positive pre-activation passes straight through the rectifier.
        assert_eq!(net.forward(&[0.5])[0], 3.0);
        // Negative pre-activation is clipped.
        assert_eq!(net.forward(&[-0.5])[0], 0.0);
    }

    #[test]
    fn forward_matches_independent_matrix_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let net = StreamNet::new(3, 4, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // Plain nested-loop evaluator.
            let mut h = vec![0.0; HIDDEN];
            for (i, hi) in h.iter_mut().enumerate() {
                let mut acc = net.b1[i];
                for (j, xj) in x.iter().enumerate() {
                    acc += net.w1[(i, j)] * xj;
                }
                *hi = acc.max(0.0);
            }
            let mut y = vec![0.0; 4];
            for (k, yk) in y.iter_mut().enumerate() {
                let mut acc = net.b2[k];
                for (i, hi) in h.iter().enumerate() {
                    acc += net.w2[(k, i)] * hi;
                }
                *yk = acc;
            }
            let got = net.forward(&x);
            for (a, b) in got.iter().zip(&y) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    #[should_panic(expected = "does not match input size")]
    fn forward_rejects_wrong_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = StreamNet::new(2, 2, &mut rng);
        net.forward(&[1.0, 2.0, 3.0]);
    }

    #[test]
    fn exact_prediction_gives_zero_loss_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = StreamNet::new(2, 3, &mut rng);
        let x = [0.2, 0.9];
        let t = net.forward(&x);
        let (loss, g) = backward(&net, &x, &t);
        assert_eq!(loss, 0.0);
        assert!(g.w1.iter().all(|v| *v == 0.0));
        assert!(g.w2.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_loss_is_quadratic_in_the_error() {
        assert_eq!(mse_loss(&[3.0], &[1.0]), 4.0);
        assert_eq!(mse_loss(&[5.0], &[1.0]), 16.0);
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let step = 1e-5;
        let mut checked = 0;
        while checked < 100 {
            let mut net = StreamNet::new(3, 5, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // Finite differences are invalid across rectifier kinks.
            if net
                .hidden_preactivations(&x)
                .iter()
                .any(|z| z.abs() < 1e-3)
            {
                continue;
            }
            checked += 1;
            let (_, g) = backward(&net, &x, &t);
            let mut worst: f64 = 0.0;
            macro_rules! check_params {
                ($field:ident) => {
                    for idx in 0..net.$field.len() {
                        let orig = net.$field[idx];
                        net.$field[idx] = orig + step;
                        let up = loss_of(&net, &x, &t);
                        net.$field[idx] = orig - step;
                        let down = loss_of(&net, &x, &t);
                        net.$field[idx] = orig;
                        let numeric = (up - down) / (2.0 * step);
                        let analytic = g.$field[idx];
                        let denom = analytic.abs().max(numeric.abs()).max(1e-3);
                        worst = worst.max((analytic - numeric).abs() / denom);
                    }
                };
            }
            check_params!(w1);
            check_params!(b1);
            check_params!(w2);
            check_params!(b2);
            assert!(worst <= 1e-4, "max relative gradient deviation {worst}");
        }
    }

    #[test]
    fn single_sample_memorization() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = StreamNet::new(2, 4, &mut rng);
        let inputs = vec![vec![0.25, 0.75]];
        let targets = vec![vec![0.5, -0.3, 0.8, 0.1]];
        let trace = train_stream(&mut net, &inputs, &targets, 0.05, 1, 3000, &mut rng).unwrap();
        assert!(
            *trace.last().unwrap() <= 1e-4,
            "final loss {}",
            trace.last().unwrap()
        );
    }

    #[test]
    fn option_table_is_exactly_representable() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = StreamNet::new(4, 3, &mut rng);
        let inputs: Vec<Vec<f64>> = OptionId::ALL.iter().map(|o| encode_option(*o)).collect();
        let targets: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let trace = train_stream(&mut net, &inputs, &targets, 0.05, 2, 4000, &mut rng).unwrap();
        assert!(
            *trace.last().unwrap() <= 1e-3,
            "final loss {}",
            trace.last().unwrap()
        );
    }

    #[test]
    fn training_loss_trends_down() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = StreamNet::new(2, 6, &mut rng);
        let inputs: Vec<Vec<f64>> = (0..40)
            .map(|_| vec![rng.gen::<f64>(), rng.gen::<f64>()])
            .collect();
        let targets: Vec<Vec<f64>> = inputs
            .iter()
            .map(|x| {
                (0..6)
                    .map(|k| (x[0] * (k as f64 + 1.0)).sin() * 0.5 + x[1])
                    .collect()
            })
            .collect();
        let trace = train_stream(&mut net, &inputs, &targets, 0.05, 16, 400, &mut rng).unwrap();
        assert!(trace.last().unwrap() < &(trace[0] * 0.2));
        // Allow jitter but require an overall downward trend.
        let early: f64 = trace[..20].iter().sum::<f64>() / 20.0;
        let late: f64 = trace[trace.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(late < early);
    }

    #[test]
    fn training_is_deterministic_for_fixed_seed() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut net = StreamNet::new(2, 3, &mut rng);
            let inputs = vec![vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]];
            let targets = vec![vec![1.0, 0.0, 0.5]; 3];
            train_stream(&mut net, &inputs, &targets, 0.05, 2, 50, &mut rng).unwrap();
            net
        };
        let a = build();
        let b = build();
        assert_eq!(a, b);
    }

    #[test]
    fn output_solve_reaches_interpolation_where_sgd_stalls() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = StreamNet::new(2, 8, &mut rng);
        let inputs: Vec<Vec<f64>> = (0..60)
            .map(|_| vec![rng.gen::<f64>(), rng.gen::<f64>()])
            .collect();
        let targets: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let trace = train_stream(&mut net, &inputs, &targets, 0.05, 16, 500, &mut rng).unwrap();
        let sgd_loss = *trace.last().unwrap();
        let solved_loss = solve_output_layer(&mut net, &inputs, &targets, 1e-10).unwrap();
        assert!(solved_loss < sgd_loss, "{solved_loss} !< {sgd_loss}");
        assert!(solved_loss <= 1e-6, "solved loss {solved_loss}");
    }

    #[test]
    fn train_rejects_empty_and_mismatched_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut net = StreamNet::new(2, 2, &mut rng);
        assert!(matches!(
            train_stream(&mut net, &[], &[], 0.05, 2, 1, &mut rng),
            Err(NetError::EmptyDataset)
        ));
        let err = train_stream(
            &mut net,
            &[vec![0.0, 0.0]],
            &[vec![0.0, 0.0], vec![1.0, 1.0]],
            0.05,
            2,
            1,
            &mut rng,
        );
        assert!(matches!(err, Err(NetError::CountMismatch { .. })));
        let err = train_stream(
            &mut net,
            &[vec![0.0, 0.0, 0.0]],
            &[vec![0.0, 0.0]],
            0.05,
            2,
            1,
            &mut rng,
        );
        assert!(matches!(err, Err(NetError::DimensionMismatch { .. })));
    }
}
