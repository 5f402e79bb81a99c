//! Central-difference verification of backward rules.
//!
//! `grad_check*` compare the tape's analytic gradients against
//! (f(x+h) - f(x-h)) / 2h per coordinate and report the worst relative error
//! max |analytic - numeric| / max(1, |analytic|, |numeric|).
//!
//! Two operating points:
//! - f64 graph, h = 1e-5, tolerance 1e-5 (the strict mode),
//! - f32 graph, h = 1e-2, tolerance 1e-3 (noisy but representative of the
//!   training dtype).
//!
//! Checks only make sense at smooth points; case generators resample until
//! the recorded graph keeps ReLU inputs and pooling ties at least `4h` away
//! from their kinks (see [`Tape::kink_margin`]).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// Worst relative error of analytic vs numeric gradients for a scalar-valued
/// graph over one input tensor.
pub fn grad_check<E, F>(f: F, x: &Tensor<E>, h: f64) -> Result<f64>
where
    E: Element,
    F: Fn(&Tape<E>, Var) -> Result<Var>,
{
    grad_check_multi(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        h,
    )
}

/// Multi-input variant; the closure receives one tracked leaf per input.
pub fn grad_check_multi<E, F>(f: F, inputs: &[Tensor<E>], h: f64) -> Result<f64>
where
    E: Element,
    F: Fn(&Tape<E>, &[Var]) -> Result<Var>,
{
    let eval = |points: &[Tensor<E>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        Ok(tape.value(loss).item().to_f64())
    };
    check_against_numeric(&f, eval, inputs, h)
}

/// Compare the analytic gradient of `f_graph` against central differences of
/// `f_eval`. Splitting the two sides is what lets tests plant a deliberately
/// inconsistent pair as a negative control.
pub fn check_against_numeric<E, F, G>(
    f_graph: F,
    f_eval: G,
    inputs: &[Tensor<E>],
    h: f64,
) -> Result<f64>
where
    E: Element,
    F: Fn(&Tape<E>, &[Var]) -> Result<Var>,
    G: Fn(&[Tensor<E>]) -> Result<f64>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f_graph(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(|g| g.to_f64_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect();

    let mut worst = 0.0f64;
    let mut points: Vec<Tensor<E>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            points[i].data_mut()[j] = orig + E::from_f64(h);
            let plus = f_eval(&points)?;
            points[i].data_mut()[j] = orig - E::from_f64(h);
            let minus = f_eval(&points)?;
            points[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Like [`grad_check_multi`] but only probing the listed (input, coordinate)
/// pairs. Used for whole-model checks where a full sweep is too slow.
pub fn grad_check_coords<E, F>(
    f: F,
    inputs: &[Tensor<E>],
    coords: &[(usize, usize)],
    h: f64,
) -> Result<f64>
where
    E: Element,
    F: Fn(&Tape<E>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(|g| g.to_f64_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect();

    let eval = |points: &[Tensor<E>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        Ok(tape.value(loss).item().to_f64())
    };

    let mut worst = 0.0f64;
    let mut points: Vec<Tensor<E>> = inputs.to_vec();
    for &(i, j) in coords {
        let orig = inputs[i].data()[j];
        points[i].data_mut()[j] = orig + E::from_f64(h);
        let plus = eval(&points)?;
        points[i].data_mut()[j] = orig - E::from_f64(h);
        let minus = eval(&points)?;
        points[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i][j];
        let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Default, Clone)]
pub struct CheckReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(CheckOutcome::passed)
    }

    pub fn failures(&self) -> Vec<&CheckOutcome> {
        self.outcomes.iter().filter(|o| !o.passed()).collect()
    }

    pub fn push(&mut self, name: &str, max_rel_err: f64, tolerance: f64) {
        self.outcomes.push(CheckOutcome {
            name: name.to_string(),
            max_rel_err,
            tolerance,
        });
    }

    pub fn merge(&mut self, other: CheckReport) {
        self.outcomes.extend(other.outcomes);
    }
}

pub(crate) fn rand_tensor<E: Element, R: Rng + ?Sized>(
    shape: Vec<usize>,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Tensor<E> {
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| E::from_f64(lo + (hi - lo) * rng.random::<f64>()))
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Run `f` at up to 50 resampled random points, skipping points whose graph
/// sits within `4h` of a kink, until `points` smooth evaluations succeed.
fn checked_at_smooth_points<E: Element>(
    name: &str,
    points: usize,
    h: f64,
    tolerance: f64,
    gen: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<E>>,
    f: impl Fn(&Tape<E>, &[Var]) -> Result<Var>,
    report: &mut CheckReport,
) {
    let mut done = 0;
    let mut worst = 0.0f64;
    for attempt in 0..60u64 {
        if done == points {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + attempt);
        let inputs = gen(&mut rng);
        // probe smoothness
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        match f(&tape, &vars) {
            Ok(_) => {
                if tape.kink_margin() <= 4.0 * h {
                    continue;
                }
            }
            Err(e) => {
                report.push(name, f64::INFINITY, tolerance);
                eprintln!("gradcheck case {name} failed to build: {e}");
                return;
            }
        }
        match grad_check_multi(&f, &inputs, h) {
            Ok(err) => {
                worst = worst.max(err);
                done += 1;
            }
            Err(e) => {
                eprintln!("gradcheck case {name} failed: {e}");
                report.push(name, f64::INFINITY, tolerance);
                return;
            }
        }
    }
    if done < points {
        eprintln!("gradcheck case {name}: no smooth point found");
        report.push(name, f64::INFINITY, tolerance);
    } else {
        report.push(name, worst, tolerance);
    }
}

/// Operating point for a check run.
#[derive(Clone, Copy, Debug)]
pub struct CheckSettings {
    pub h: f64,
    pub tolerance: f64,
    pub points: usize,
}

pub const F64_SETTINGS: CheckSettings = CheckSettings {
    h: 1e-5,
    tolerance: 1e-5,
    points: 2,
};

pub const F32_SETTINGS: CheckSettings = CheckSettings {
    h: 1e-2,
    tolerance: 1e-3,
    points: 10,
};

/// Gradient checks for every differentiable tape operation.
pub fn op_checks<E: Element>(s: CheckSettings) -> CheckReport {
    let mut report = CheckReport::default();
    let mut case = |name: &str,
                    gen: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<E>>,
                    f: &dyn Fn(&Tape<E>, &[Var]) -> Result<Var>| {
        checked_at_smooth_points(name, s.points, s.h, s.tolerance, gen, f, &mut report);
    };

    // Scalarizer: signed weights keep the loss O(1) without washing out
    // per-coordinate errors.
    fn scalarize<E: Element>(tape: &Tape<E>, v: Var) -> Result<Var> {
        let n = tape.value(v).numel();
        let mut rng = ChaCha8Rng::seed_from_u64(0xd07);
        let scale = 1.0 / (n as f64).sqrt();
        let w: Vec<E> = (0..n)
            .map(|_| E::from_f64(if rng.random::<f64>() < 0.5 { -scale } else { scale }))
            .collect();
        tape.dot_const(v, &w)
    }

    case(
        "add",
        &|rng| vec![rand_tensor(vec![3, 4], -1.0, 1.0, rng), rand_tensor(vec![3, 4], -1.0, 1.0, rng)],
        &|t, v| scalarize(t, t.add(v[0], v[1])?),
    );
    case(
        "sub",
        &|rng| vec![rand_tensor(vec![3, 4], -1.0, 1.0, rng), rand_tensor(vec![3, 4], -1.0, 1.0, rng)],
        &|t, v| scalarize(t, t.sub(v[0], v[1])?),
    );
    case(
        "mul",
        &|rng| vec![rand_tensor(vec![3, 4], -1.0, 1.0, rng), rand_tensor(vec![3, 4], -1.0, 1.0, rng)],
        &|t, v| scalarize(t, t.mul(v[0], v[1])?),
    );
    case(
        "div",
        &|rng| vec![rand_tensor(vec![3, 4], -1.0, 1.0, rng), rand_tensor(vec![3, 4], 0.5, 1.5, rng)],
        &|t, v| scalarize(t, t.div(v[0], v[1])?),
    );
    case(
        "mul_broadcast_gate",
        &|rng| vec![rand_tensor(vec![2, 4, 3, 3], -1.0, 1.0, rng), rand_tensor(vec![1, 4, 1, 1], 0.1, 0.9, rng)],
        &|t, v| scalarize(t, t.mul(v[0], v[1])?),
    );
    case(
        "mul_scalar",
        &|rng| vec![rand_tensor(vec![5], -1.0, 1.0, rng)],
        &|t, v| scalarize(t, t.mul_scalar(v[0], -1.7)),
    );
    case(
        "transpose2d",
        &|rng| vec![rand_tensor(vec![3, 5], -1.0, 1.0, rng)],
        &|t, v| scalarize(t, t.transpose2d(v[0])?),
    );
    case(
        "matmul",
        &|rng| vec![rand_tensor(vec![3, 4], -1.0, 1.0, rng), rand_tensor(vec![4, 2], -1.0, 1.0, rng)],
        &|t, v| scalarize(t, t.matmul(v[0], v[1])?),
    );
    case(
        "conv2d",
        &|rng| {
            vec![
                rand_tensor(vec![2, 3, 8, 8], -1.0, 1.0, rng),
                rand_tensor(vec![4, 3, 3, 3], -0.5, 0.5, rng),
                rand_tensor(vec![4], -0.5, 0.5, rng),
            ]
        },
        &|t, v| scalarize(t, t.conv2d(v[0], v[1], v[2], 1, 1)?),
    );
    case(
        "conv2d_strided",
        &|rng| {
            vec![
                rand_tensor(vec![1, 2, 7, 7], -1.0, 1.0, rng),
                rand_tensor(vec![3, 2, 3, 3], -0.5, 0.5, rng),
                rand_tensor(vec![3], -0.5, 0.5, rng),
            ]
        },
        &|t, v| scalarize(t, t.conv2d(v[0], v[1], v[2], 2, 1)?),
    );
    case(
        "global_avg_pool",
        &|rng| vec![rand_tensor(vec![2, 3, 4, 4], -1.0, 1.0, rng)],
        &|t, v| scalarize(t, t.global_avg_pool(v[0])?),
    );
    case(
        "global_max_pool",
        &|rng| vec![rand_tensor(vec![2, 3, 4, 4], -1.0, 1.0, rng)],
        &|t, v| scalarize(t, t.global_max_pool(v[0])?),
    );
    case(
        "channel_pool",
        &|rng| vec![rand_tensor(vec![2, 3, 4, 4], -1.0, 1.0, rng)],
        &|t, v| scalarize(t, t.channel_pool(v[0])?),
    );
    case(
        "relu",
        &|rng| vec![rand_tensor(vec![4, 5], -1.0, 1.0, rng)],
        &|t, v| scalarize(t, t.relu(v[0])),
    );
    case(
        "sigmoid",
        &|rng| vec![rand_tensor(vec![4, 5], -3.0, 3.0, rng)],
        &|t, v| scalarize(t, t.sigmoid(v[0])),
    );
    case(
        "tanh",
        &|rng| vec![rand_tensor(vec![4, 5], -2.0, 2.0, rng)],
        &|t, v| scalarize(t, t.tanh(v[0])),
    );
    case(
        "softplus",
        &|rng| vec![rand_tensor(vec![4, 5], -3.0, 3.0, rng)],
        &|t, v| scalarize(t, t.softplus(v[0])),
    );
    case(
        "exp",
        &|rng| vec![rand_tensor(vec![4, 5], -1.0, 1.0, rng)],
        &|t, v| scalarize(t, t.exp(v[0])),
    );
    case(
        "log_sum_exp",
        &|rng| vec![rand_tensor(vec![3, 7], -2.0, 2.0, rng)],
        &|t, v| scalarize(t, t.log_sum_exp(v[0])?),
    );
    case(
        "dropout",
        &|rng| vec![rand_tensor(vec![6, 5], -1.0, 1.0, rng)],
        &|t, v| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
            scalarize(t, t.dropout(v[0], 0.4, true, &mut mask_rng)?)
        },
    );
    case(
        "concat",
        &|rng| vec![rand_tensor(vec![3, 2], -1.0, 1.0, rng), rand_tensor(vec![3, 4], -1.0, 1.0, rng)],
        &|t, v| scalarize(t, t.concat(v[0], v[1])?),
    );
    case(
        "reshape",
        &|rng| vec![rand_tensor(vec![2, 6], -1.0, 1.0, rng)],
        &|t, v| scalarize(t, t.reshape(v[0], vec![2, 3, 2, 1])?),
    );
    case(
        "row_sum",
        &|rng| vec![rand_tensor(vec![3, 5], -1.0, 1.0, rng)],
        &|t, v| scalarize(t, t.row_sum(v[0])?),
    );
    case(
        "dot_const",
        &|rng| vec![rand_tensor(vec![7], -1.0, 1.0, rng)],
        &|t, v| {
            let w: Vec<E> = (0..7).map(|i| E::from_f64(0.3 + i as f64 * 0.1)).collect();
            t.dot_const(v[0], &w)
        },
    );
    case(
        "gather_rows",
        &|rng| vec![rand_tensor(vec![5, 3], -1.0, 1.0, rng)],
        &|t, v| scalarize(t, t.gather_rows(v[0], &[4, 0, 2])?),
    );
    case(
        "gather_class",
        &|rng| vec![rand_tensor(vec![4, 7], -1.0, 1.0, rng)],
        &|t, v| scalarize(t, t.gather_class(v[0], &[0, 3, 6, 2])?),
    );
    case(
        "select_column",
        &|rng| vec![rand_tensor(vec![4, 3], -1.0, 1.0, rng)],
        &|t, v| scalarize(t, t.select_column(v[0], 1)?),
    );

    report
}

/// Analytic-vs-numeric check of a graph that reads parameters from a store.
/// Perturbs the listed coordinates, or every coordinate when `coords` is
/// `None`.
pub fn grad_check_store<E, F>(
    f: F,
    store: &mut crate::params::ParamStore<E>,
    coords: Option<&[(crate::params::ParamId, usize)]>,
    h: f64,
) -> Result<f64>
where
    E: Element,
    F: Fn(&Tape<E>, &crate::params::ParamStore<E>) -> Result<Var>,
{
    // analytic gradients into the store
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    tape.backward(loss)?;
    store.zero_grads();
    tape.write_param_grads(store);

    let all_coords: Vec<(crate::params::ParamId, usize)> = match coords {
        Some(c) => c.to_vec(),
        None => store
            .ids()
            .flat_map(|id| (0..store.get(id).value.numel()).map(move |j| (id, j)))
            .collect(),
    };

    let mut worst = 0.0f64;
    for &(id, j) in &all_coords {
        let analytic = store.get(id).grad.data()[j].to_f64();
        let orig = store.get(id).value.data()[j];
        let eval = |store: &crate::params::ParamStore<E>| -> Result<f64> {
            let tape = Tape::new();
            let loss = f(&tape, store)?;
            Ok(tape.value(loss).item().to_f64())
        };
        store.get_mut(id).value.data_mut()[j] = orig + E::from_f64(h);
        let plus = eval(store)?;
        store.get_mut(id).value.data_mut()[j] = orig - E::from_f64(h);
        let minus = eval(store)?;
        store.get_mut(id).value.data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic - numeric).abs() / 1.0f64.max(analytic.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

type BlockForward<E> = Box<dyn Fn(&Tape<E>, &crate::params::ParamStore<E>, Var) -> Result<Var>>;

fn block_case<E: Element>(
    name: &str,
    s: CheckSettings,
    report: &mut CheckReport,
    build: &dyn Fn(
        &mut crate::params::ParamStore<E>,
        &mut ChaCha8Rng,
    ) -> Result<(BlockForward<E>, Tensor<E>)>,
) {
    let mut done = 0;
    let mut worst = 0.0f64;
    for attempt in 0..60u64 {
        if done == s.points {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0xb10c_0000 + attempt);
        let mut store = crate::params::ParamStore::new();
        let (forward, x) = match build(&mut store, &mut rng) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("gradcheck case {name} failed to build: {e}");
                report.push(name, f64::INFINITY, s.tolerance);
                return;
            }
        };

        // smoothness probe
        let probe = Tape::new();
        let px = probe.constant(x.clone());
        if forward(&probe, &store, px).is_err() {
            report.push(name, f64::INFINITY, s.tolerance);
            return;
        }
        if probe.kink_margin() <= 4.0 * s.h {
            continue;
        }

        let scalarize = |t: &Tape<E>, v: Var| -> Result<Var> {
            let n = t.value(v).numel();
            let mut wrng = ChaCha8Rng::seed_from_u64(0xd07);
            let scale = 1.0 / (n as f64).sqrt();
            let w: Vec<E> = (0..n)
                .map(|_| E::from_f64(if wrng.random::<f64>() < 0.5 { -scale } else { scale }))
                .collect();
            t.dot_const(v, &w)
        };

        // gradient w.r.t. the input
        let input_err = match grad_check_multi(
            |t, vars| scalarize(t, forward(t, &store, vars[0])?),
            std::slice::from_ref(&x),
            s.h,
        ) {
            Ok(e) => e,
            Err(e) => {
                eprintln!("gradcheck case {name} failed: {e}");
                report.push(name, f64::INFINITY, s.tolerance);
                return;
            }
        };
        // gradient w.r.t. every parameter
        let param_err = match grad_check_store(
            |t, store| {
                let xv = t.constant(x.clone());
                scalarize(t, forward(t, store, xv)?)
            },
            &mut store,
            None,
            s.h,
        ) {
            Ok(e) => e,
            Err(e) => {
                eprintln!("gradcheck case {name} failed: {e}");
                report.push(name, f64::INFINITY, s.tolerance);
                return;
            }
        };
        worst = worst.max(input_err).max(param_err);
        done += 1;
    }
    if done < s.points {
        eprintln!("gradcheck case {name}: no smooth point found");
        report.push(name, f64::INFINITY, s.tolerance);
    } else {
        report.push(name, worst, s.tolerance);
    }
}

/// Gradient checks through the layer and attention blocks.
pub fn block_checks<E: Element>(s: CheckSettings) -> CheckReport {
    use crate::nn::{AttentionMode, CbamBlock, DenseLayer, ResidualBlock, SeBlock};
    use crate::params::Init;

    let mut report = CheckReport::default();

    block_case(
        "dense_layer",
        s,
        &mut report,
        &|store, rng| {
            let layer = DenseLayer::new(store, "dense", 6, 4, Init::FanIn, rng);
            let x = rand_tensor(vec![3, 6], -1.0, 1.0, rng);
            Ok((
                Box::new(move |t: &Tape<E>, st: &crate::params::ParamStore<E>, v: Var| {
                    layer.forward(t, st, v)
                }),
                x,
            ))
        },
    );
    block_case(
        "se_block",
        s,
        &mut report,
        &|store, rng| {
            let block = SeBlock::new(store, "se", 8, 4, rng)?;
            let x = rand_tensor(vec![2, 8, 5, 5], -1.0, 1.0, rng);
            Ok((
                Box::new(move |t: &Tape<E>, st: &crate::params::ParamStore<E>, v: Var| {
                    block.forward(t, st, v)
                }),
                x,
            ))
        },
    );
    block_case(
        "cbam_block",
        s,
        &mut report,
        &|store, rng| {
            let block = CbamBlock::new(store, "cbam", 8, 4, 3, rng)?;
            let x = rand_tensor(vec![2, 8, 6, 6], -1.0, 1.0, rng);
            Ok((
                Box::new(move |t: &Tape<E>, st: &crate::params::ParamStore<E>, v: Var| {
                    block.forward(t, st, v)
                }),
                x,
            ))
        },
    );
    block_case(
        "se_residual_block",
        s,
        &mut report,
        &|store, rng| {
            let block =
                ResidualBlock::new(store, "blk", 4, 4, 1, 6, AttentionMode::Se, 2, 3, rng)?;
            let x = rand_tensor(vec![2, 4, 6, 6], -1.0, 1.0, rng);
            Ok((
                Box::new(move |t: &Tape<E>, st: &crate::params::ParamStore<E>, v: Var| {
                    block.forward(t, st, v)
                }),
                x,
            ))
        },
    );
    block_case(
        "se_residual_block_strided",
        s,
        &mut report,
        &|store, rng| {
            let block =
                ResidualBlock::new(store, "blk", 4, 8, 3, 7, AttentionMode::Se, 4, 3, rng)?;
            let x = rand_tensor(vec![2, 4, 7, 7], -1.0, 1.0, rng);
            Ok((
                Box::new(move |t: &Tape<E>, st: &crate::params::ParamStore<E>, v: Var| {
                    block.forward(t, st, v)
                }),
                x,
            ))
        },
    );
    block_case(
        "cbam_residual_block",
        s,
        &mut report,
        &|store, rng| {
            let block =
                ResidualBlock::new(store, "blk", 4, 4, 1, 6, AttentionMode::Cbam, 2, 3, rng)?;
            let x = rand_tensor(vec![2, 4, 6, 6], -1.0, 1.0, rng);
            Ok((
                Box::new(move |t: &Tape<E>, st: &crate::params::ParamStore<E>, v: Var| {
                    block.forward(t, st, v)
                }),
                x,
            ))
        },
    );

    report
}

/// Central-difference check of the full model's total loss over a sampled
/// subset of parameter coordinates (dropout disabled).
///
/// At this scale some ReLU input always sits near zero, so instead of
/// hunting for a globally smooth point the check validates every coordinate
/// with two step sizes (h and h/2): on a smooth path both estimates agree to
/// O(h^2) and the coordinate counts, while a kink crossing makes them
/// disagree and the coordinate is swapped for another. Coordinates span
/// distinct parameters; the weighted variant always includes the three
/// log-variance scalars.
pub fn model_check(min_coords: usize, h: f64, tolerance: f64) -> CheckReport {
    use crate::model::{ModelConfig, MtaNet};
    use crate::objectives::{
        au_loss, expr_loss, total_sum_loss, va_loss, weighted_loss, BatchLabels,
    };

    let mut report = CheckReport::default();
    let labels = BatchLabels {
        n: 2,
        va: vec![0.3, -0.2, -0.5, 0.4],
        au: vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0],
        expr: vec![2, 5],
        mask_va: vec![true, true],
        mask_au: vec![true, true],
        mask_expr: vec![true, true],
    };

    for (name, weighted) in [("model_sum_loss", false), ("model_weighted_loss", true)] {
        let mut model = match MtaNet::<f64>::new(ModelConfig::default(), 0xa0de) {
            Ok(m) => m,
            Err(e) => {
                eprintln!("model gradcheck build failed: {e}");
                report.push(name, f64::INFINITY, tolerance);
                continue;
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0x1a9e);
        let images = rand_tensor::<f64, _>(vec![2, 3, 32, 32], 0.0, 1.0, &mut rng);

        let loss_of = |model: &MtaNet<f64>| -> Result<(Tape<f64>, Var)> {
            let tape = Tape::new();
            let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
            let out = model.forward(&tape, &images, false, &mut drop_rng)?;
            let l_va = va_loss(&tape, out.va, &labels)?;
            let l_au = au_loss(&tape, out.au_logits, &labels)?;
            let l_expr = expr_loss(&tape, out.expr_logits, &labels)?;
            let total = if weighted {
                weighted_loss(&tape, &model.store, &model.loss_weights, &l_va, &l_au, &l_expr)?
            } else {
                total_sum_loss(&tape, &[l_va, l_au, l_expr])?
            };
            Ok((tape, total))
        };

        // analytic gradients
        let Ok((tape, total)) = loss_of(&model) else {
            report.push(name, f64::INFINITY, tolerance);
            continue;
        };
        if tape.backward(total).is_err() {
            report.push(name, f64::INFINITY, tolerance);
            continue;
        }
        model.store.zero_grads();
        tape.write_param_grads(&mut model.store);

        let eval_at = |model: &mut MtaNet<f64>,
                       id: crate::params::ParamId,
                       j: usize,
                       delta: f64|
         -> f64 {
            let orig = model.store.get(id).value.data()[j];
            model.store.get_mut(id).value.data_mut()[j] = orig + delta;
            let value = {
                let (t, l) = loss_of(model).expect("forward at perturbed point");
                t.value(l).item()
            };
            model.store.get_mut(id).value.data_mut()[j] = orig;
            value
        };

        let ids: Vec<_> = model.store.ids().collect();
        let mut pick = ChaCha8Rng::seed_from_u64(0xc0de);
        let mut next_param = 0usize;
        let mut sample = |model: &MtaNet<f64>| -> (crate::params::ParamId, usize) {
            let id = ids[next_param % ids.len()];
            next_param += 1;
            let numel = model.store.get(id).value.numel();
            (id, (pick.random::<u64>() as usize) % numel)
        };

        let mut mandatory = Vec::new();
        if weighted {
            mandatory.extend([
                model.loss_weights.va,
                model.loss_weights.au,
                model.loss_weights.expr,
            ]);
        }

        let mut worst = 0.0f64;
        let mut accepted = 0usize;
        let mut attempts = 0usize;
        let budget = min_coords * 8;
        while accepted < min_coords && attempts < budget {
            attempts += 1;
            let (id, j) = match mandatory.pop() {
                Some(id) => (id, 0),
                None => sample(&model),
            };
            let analytic = model.store.get(id).grad.data()[j];
            let n_full = (eval_at(&mut model, id, j, h) - eval_at(&mut model, id, j, -h))
                / (2.0 * h);
            let n_half = (eval_at(&mut model, id, j, h / 2.0)
                - eval_at(&mut model, id, j, -h / 2.0))
                / h;
            let scale = 1.0f64.max(n_full.abs()).max(n_half.abs());
            if (n_full - n_half).abs() / scale > 0.25 * tolerance {
                // kink inside the stencil; try another coordinate
                continue;
            }
            let err = (analytic - n_full).abs() / 1.0f64.max(analytic.abs()).max(n_full.abs());
            worst = worst.max(err);
            accepted += 1;
        }
        if accepted < min_coords {
            eprintln!("model gradcheck: only {accepted} smooth coordinates of {min_coords}");
            report.push(name, f64::INFINITY, tolerance);
        } else {
            report.push(name, worst, tolerance);
        }
    }
    report
}
