//! Shared helpers for the integration tests and the acceptance harness.
#![allow(dead_code)]

use pada::autodiff::{NodeId, Tape};
use pada::config::ExperimentConfig;
use pada::datagen::{subset_target_classes, Dataset};
use pada::eval::{evaluate, weight_stats};
use pada::model::{init_params, ModelConfig, NetworkParams};
use pada::train::{
    build_step_graph, lambda_at, pada_step, train_run, Mode, TrainConfig, TrainState,
};
use pada::weighting::ClassWeights;
use pada::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_REL: f64 = 1e-4;
/// Floor for entries whose true gradient is zero; central differences
/// leave noise around 1e-11 there.
pub const FD_ABS: f64 = 1e-7;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Entries bounded away from zero so ReLU kinks stay outside the FD stencil.
pub fn rand_off_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(0.05..2.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= FD_REL * analytic.abs().max(numeric.abs()) + FD_ABS
}

type Build<'a> = dyn Fn(&mut Tape, &[NodeId]) -> pada::Result<NodeId> + 'a;

/// Finite-difference check of `build` with respect to every input entry.
/// Non-scalar outputs are reduced through a fixed random softmax
/// cross-entropy head so every output entry gets a distinct adjoint.
pub fn fd_check(
    name: &str,
    inputs: &[Matrix],
    build: &Build<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<(), String> {
    let probe = {
        let mut t = Tape::new();
        let ids: Vec<_> = inputs.iter().map(|m| t.leaf(m.clone()).unwrap()).collect();
        let out = build(&mut t, &ids).map_err(|e| format!("{name}: {e}"))?;
        t.value(out).shape()
    };
    let head = (probe != (1, 1)).then(|| {
        let r = rand_matrix(rng, probe.1, 3, -1.0, 1.0);
        let labels: Vec<usize> = (0..probe.0).map(|_| rng.random_range(0..3)).collect();
        (r, labels)
    });
    let run = |values: &[Matrix]| -> (Tape, Vec<NodeId>, NodeId) {
        let mut t = Tape::new();
        let ids: Vec<_> = values.iter().map(|m| t.leaf(m.clone()).unwrap()).collect();
        let mut out = build(&mut t, &ids).unwrap();
        if let Some((r, labels)) = &head {
            let rn = t.leaf(r.clone()).unwrap();
            let z = t.matmul(out, rn).unwrap();
            let p = t.softmax_rows(z).unwrap();
            out = t.cross_entropy(p, labels, None).unwrap();
        }
        (t, ids, out)
    };
    let (tape, ids, loss) = run(inputs);
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;
    for (i, id) in ids.iter().enumerate() {
        let g = grads.get(*id);
        for j in 0..inputs[i].data().len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_EPS;
            let (tp, _, lp) = run(&plus);
            let (tm, _, lm) = run(&minus);
            let numeric = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * FD_EPS);
            let analytic = g.data()[j];
            if !grad_close(analytic, numeric) {
                return Err(format!(
                    "{name}: input {i} entry {j}: analytic {analytic:e} vs numeric {numeric:e}"
                ));
            }
        }
    }
    Ok(())
}

/// Every differentiable tape op on random shapes up to 6x6.
pub fn check_ops(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let n = r.random_range(1..=6);
    let k = r.random_range(1..=6);
    let m = r.random_range(1..=6);
    let c = r.random_range(2..=6);

    let a = rand_matrix(&mut r, n, k, -1.5, 1.5);
    let b = rand_matrix(&mut r, k, m, -1.5, 1.5);
    fd_check(
        "matmul",
        &[a.clone(), b],
        &|t, x| t.matmul(x[0], x[1]),
        &mut r,
    )?;

    let x = rand_matrix(&mut r, n, m, -1.5, 1.5);
    let bias = rand_matrix(&mut r, 1, m, -1.5, 1.5);
    fd_check(
        "add_bias",
        &[x.clone(), bias],
        &|t, v| t.add_bias(v[0], v[1]),
        &mut r,
    )?;

    let xr = rand_off_zero(&mut r, n, m);
    fd_check("relu", &[xr], &|t, v| t.relu(v[0]), &mut r)?;

    let logits = rand_matrix(&mut r, n, c, -3.0, 3.0);
    fd_check(
        "softmax_rows",
        &[logits.clone()],
        &|t, v| t.softmax_rows(v[0]),
        &mut r,
    )?;

    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    let weights: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    fd_check(
        "cross_entropy(softmax)",
        &[logits.clone()],
        &|t, v| {
            let p = t.softmax_rows(v[0])?;
            t.cross_entropy(p, &labels, Some(&weights))
        },
        &mut r,
    )?;
    let probs = rand_matrix(&mut r, n, c, 0.05, 1.0);
    fd_check(
        "cross_entropy(raw)",
        &[probs],
        &|t, v| t.cross_entropy(v[0], &labels, Some(&weights)),
        &mut r,
    )?;

    fd_check("sum", &[x.clone()], &|t, v| t.sum(v[0]), &mut r)?;
    let factor = r.random_range(-2.0..2.0);
    fd_check("scale", &[x.clone()], &|t, v| t.scale(v[0], factor), &mut r)?;
    let y = rand_matrix(&mut r, n, m, -1.5, 1.5);
    fd_check("add", &[x.clone(), y], &|t, v| t.add(v[0], v[1]), &mut r)?;
    fd_check("add(shared)", &[x], &|t, v| t.add(v[0], v[0]), &mut r)?;
    Ok(())
}

/// Small random network and batch for composite checks.
pub struct Case {
    pub params: NetworkParams,
    pub mode: Mode,
    pub weights: ClassWeights,
    pub lambda: f64,
    pub xs: Matrix,
    pub ys: Vec<usize>,
    pub xt: Matrix,
}

pub fn random_case(seed: u64, adversarial_only: bool) -> Case {
    let mut r = rng(seed ^ 0x5eed);
    let classes = r.random_range(2..=6);
    let input = r.random_range(1..=6);
    let hidden = r.random_range(1..=6);
    let feat = r.random_range(1..=6);
    let disc = r.random_range(1..=6);
    let mc = ModelConfig {
        input_dim: input,
        feature_dims: vec![hidden, feat],
        num_source_classes: classes,
        discriminator_dims: vec![disc],
        init_scale: 1.0,
        seed,
    };
    let mut params = init_params(&mc).unwrap();
    // Zero biases put dead-feature rows exactly on a ReLU kink downstream.
    for (i, (_, m)) in params.matrices_mut().into_iter().enumerate() {
        if i % 2 == 1 {
            *m = rand_matrix(&mut r, 1, m.cols(), -0.5, 0.5);
        }
    }
    let modes: &[Mode] = if adversarial_only {
        &[
            Mode::Dann,
            Mode::Pada,
            Mode::PadaClassifierOnly,
            Mode::PadaAdversarialOnly,
        ]
    } else {
        &Mode::ALL
    };
    let mode = modes[r.random_range(0..modes.len())];
    let mut gamma: Vec<f64> = (0..classes).map(|_| r.random_range(0.0..1.0)).collect();
    let top = r.random_range(0..classes);
    gamma[top] = 1.0;
    let weights = ClassWeights::from_vec(gamma, true).unwrap();
    let ns = r.random_range(1..=8);
    let nt = r.random_range(1..=8);
    Case {
        params,
        mode,
        weights,
        lambda: r.random_range(0.1..1.0),
        xs: rand_matrix(&mut r, ns, input, -2.0, 2.0),
        ys: (0..ns).map(|_| r.random_range(0..classes)).collect(),
        xt: rand_matrix(&mut r, nt, input, -2.0, 2.0),
    }
}

fn case_losses(case: &Case, params: &NetworkParams) -> (f64, f64) {
    let g = build_step_graph(
        params,
        case.mode,
        &case.weights,
        case.lambda,
        &case.xs,
        &case.ys,
        &case.xt,
    )
    .unwrap();
    let l = g.losses();
    (
        l.source_cls_loss,
        l.source_domain_loss + l.target_domain_loss,
    )
}

/// Full objective: classifier and discriminator parameters against central
/// differences of the objective; feature parameters against
/// `FD(cls) - lambda * FD(domain)`.
pub fn check_composite(seed: u64) -> Result<(), String> {
    let case = random_case(seed, true);
    let graph = build_step_graph(
        &case.params,
        case.mode,
        &case.weights,
        case.lambda,
        &case.xs,
        &case.ys,
        &case.xt,
    )
    .map_err(|e| e.to_string())?;
    let grads = graph
        .tape
        .backward(graph.train_loss)
        .map_err(|e| e.to_string())?;
    let analytic = graph.params.gradients(&grads);
    let analytic = analytic.named();
    for (idx, (name, group, m)) in case.params.named().into_iter().enumerate() {
        for j in 0..m.data().len() {
            let perturbed = |delta: f64| {
                let mut p = case.params.clone();
                p.matrices_mut()[idx].1.data_mut()[j] += delta;
                case_losses(&case, &p)
            };
            let (cp, dp) = perturbed(FD_EPS);
            let (cm, dm) = perturbed(-FD_EPS);
            let fd_cls = (cp - cm) / (2.0 * FD_EPS);
            let fd_dom = (dp - dm) / (2.0 * FD_EPS);
            let expected = match group {
                pada::model::ParamGroup::Feature => fd_cls - case.lambda * fd_dom,
                _ => fd_cls + case.lambda * fd_dom,
            };
            let got = analytic[idx].2.data()[j];
            if !grad_close(got, expected) {
                return Err(format!(
                    "{name}[{j}] ({:?}, mode {}): analytic {got:e} vs numeric {expected:e}",
                    group, case.mode
                ));
            }
        }
    }
    Ok(())
}

/// Discriminator on the tape without the reversal node.
pub fn discriminate_plain(
    tape: &mut Tape,
    layers: &[pada::model::BoundLinear],
    f: NodeId,
) -> NodeId {
    let mut h = f;
    for (i, l) in layers.iter().enumerate() {
        h = tape.matmul(h, l.weight).unwrap();
        h = tape.add_bias(h, l.bias).unwrap();
        if i + 1 < layers.len() {
            h = tape.relu(h).unwrap();
        }
    }
    tape.softmax_rows(h).unwrap()
}

/// Gradient into the features through the reversal node equals `-coeff`
/// times the gradient computed with the reversal replaced by identity.
pub fn check_reversal(seed: u64) -> Result<f64, String> {
    let case = random_case(seed, true);
    let mut r = rng(seed ^ 0x9e71);
    let coeff = r.random_range(0.0..2.0);
    let labels: Vec<usize> = (0..case.xs.rows()).map(|_| r.random_range(0..2)).collect();
    let feature_grad = |reversed: bool| -> (Matrix, Vec<Matrix>, Matrix) {
        let mut t = Tape::new();
        let bound = case.params.bind(&mut t).unwrap();
        let x = t.leaf(case.xs.clone()).unwrap();
        let f = pada::model::feature_forward(&mut t, &bound, x).unwrap();
        let d = if reversed {
            pada::model::discriminate_forward(&mut t, &bound, f, coeff).unwrap()
        } else {
            discriminate_plain(&mut t, &bound.discriminator, f)
        };
        let loss = t.cross_entropy(d, &labels, None).unwrap();
        let g = t.backward(loss).unwrap();
        let disc: Vec<Matrix> = bound
            .discriminator
            .iter()
            .flat_map(|l| [g.get(l.weight).clone(), g.get(l.bias).clone()])
            .collect();
        (g.get(f).clone(), disc, t.value(d).clone())
    };
    let (with, disc_with, out_with) = feature_grad(true);
    let (plain, disc_plain, out_plain) = feature_grad(false);
    if out_with != out_plain {
        return Err("forward output depends on the reversal".into());
    }
    if disc_with != disc_plain {
        return Err("discriminator gradients depend on the reversal".into());
    }
    let mut worst: f64 = 0.0;
    for (a, b) in with.data().iter().zip(plain.data()) {
        let err = (a + coeff * b).abs();
        worst = worst.max(err);
        if err > 1e-12 {
            return Err(format!("feature gradient {a:e} vs -{coeff} * {b:e}"));
        }
    }
    Ok(worst)
}

fn mlp_row(layers: &[pada::model::Linear], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, l) in layers.iter().enumerate() {
        let (inp, out) = l.weight.shape();
        let mut next = vec![0.0; out];
        for (j, nj) in next.iter_mut().enumerate() {
            let mut acc = l.bias.get(0, j);
            for (k, hk) in h.iter().enumerate().take(inp) {
                acc += hk * l.weight.get(k, j);
            }
            *nj = if i + 1 < layers.len() {
                acc.max(0.0)
            } else {
                acc
            };
        }
        h = next;
    }
    h
}

fn softmax_vec(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn neg_log(p: f64) -> f64 {
    -p.max(1e-12).ln()
}

/// Scalar-loop evaluation of the weighted adversarial objective.
pub fn oracle_objective(
    params: &NetworkParams,
    mode: Mode,
    gamma: &[f64],
    lambda: f64,
    xs: &Matrix,
    ys: &[usize],
    xt: &Matrix,
) -> f64 {
    let (w_cls, w_dom) = match mode {
        Mode::SourceOnly | Mode::Dann => (false, false),
        Mode::Pada => (true, true),
        Mode::PadaClassifierOnly => (true, false),
        Mode::PadaAdversarialOnly => (false, true),
    };
    let lambda = if mode == Mode::SourceOnly {
        0.0
    } else {
        lambda
    };
    let classifier = std::slice::from_ref(&params.classifier);
    let (mut cls, mut sd, mut td) = (0.0, 0.0, 0.0);
    for i in 0..xs.rows() {
        let f = mlp_row(&params.feature, xs.row(i));
        let p = softmax_vec(&mlp_row(classifier, &f));
        let d = softmax_vec(&mlp_row(&params.discriminator, &f));
        let g = gamma[ys[i]];
        cls += if w_cls { g } else { 1.0 } * neg_log(p[ys[i]]);
        sd += if w_dom { g } else { 1.0 } * neg_log(d[0]);
    }
    for i in 0..xt.rows() {
        let f = mlp_row(&params.feature, xt.row(i));
        let d = softmax_vec(&mlp_row(&params.discriminator, &f));
        td += neg_log(d[1]);
    }
    let ns = xs.rows() as f64;
    let nt = xt.rows() as f64;
    cls / ns + lambda * (sd / ns + td / nt)
}

/// `pada_step`'s reported objective against the scalar oracle, at a random
/// point of the schedule. Returns the absolute difference.
pub fn check_objective(seed: u64) -> Result<f64, String> {
    let case = random_case(seed, false);
    let mut r = rng(seed ^ 0x0b1e);
    let config = TrainConfig {
        mode: case.mode,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(case.params.clone(), 4, seed);
    state.class_weights = case.weights.clone();
    let warm = r.random_range(0..4);
    for _ in 0..warm {
        pada_step(&mut state, &config, &case.xs, &case.ys, &case.xt).map_err(|e| e.to_string())?;
    }
    let before = state.params.clone();
    let lambda = lambda_at(&config, state.progress()).unwrap();
    let got = pada_step(&mut state, &config, &case.xs, &case.ys, &case.xt)
        .map_err(|e| e.to_string())?
        .total_objective;
    let want = oracle_objective(
        &before,
        case.mode,
        case.weights.gamma(),
        lambda,
        &case.xs,
        &case.ys,
        &case.xt,
    );
    Ok((got - want).abs())
}

/// The reference fixture with all 8 classes in the target domain.
pub fn full_fixture() -> Dataset {
    let mut c = ExperimentConfig::default();
    c.synth.num_target_classes = c.synth.num_source_classes;
    c.load_dataset().unwrap()
}

pub fn fixture(k: usize) -> Dataset {
    subset_target_classes(&full_fixture(), k).unwrap()
}

pub struct RunResult {
    pub target_accuracy: f64,
    pub shared_mean: f64,
    pub outlier_mean: f64,
}

/// Trains one mode on `dataset` with the default configuration and `seed`
/// driving both initialization and shuffling.
pub fn run(dataset: &Dataset, mode: Mode, seed: u64) -> RunResult {
    let mut c = ExperimentConfig::default();
    c.train.mode = mode;
    c.train.seed = seed;
    let mc = c.model_config(dataset.feature_dim(), dataset.num_source_classes());
    let out = train_run(dataset, &mc, &c.train).unwrap();
    let report = evaluate(&out.params, dataset).unwrap();
    let gamma = out.history.last().map(|h| h.gamma.clone()).unwrap();
    let stats = weight_stats(
        &ClassWeights::from_vec(gamma, true).unwrap(),
        dataset.target_class_set(),
    )
    .unwrap();
    RunResult {
        target_accuracy: report.target_accuracy,
        shared_mean: stats.mean_shared,
        outlier_mean: stats.mean_outlier,
    }
}
