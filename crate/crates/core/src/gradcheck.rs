//! Finite-difference verification of the analytic gradients.
//!
//! Every check reduces its output to a scalar through a fixed random
//! projection, then compares each analytic partial against the central
//! difference `(f(x + h) - f(x - h)) / 2h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::layers::{Activation, BiLstmLayer, DenseLayer, EmbeddingTable, LstmCell, LstmState};
use crate::network::{ModelError, SsvcConfig, SsvcParams};
use crate::params::{uniform, Bound, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

pub const STEP: f64 = 1e-5;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

/// `|analytic - numeric| / (|analytic| + 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + 1e-8)
}

#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub partials: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<OpCheck>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&OpCheck> {
        self.checks.iter().max_by(|a, b| {
            (a.max_relative_error / a.tolerance).total_cmp(&(b.max_relative_error / b.tolerance))
        })
    }
}

/// `sum(out * R)` for a fixed seeded `R`, so every output element matters.
fn project(g: &Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out)?;
    if shape.is_empty() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let r = g.constant(uniform(&mut rng, &shape, 1.0));
    g.sum(g.mul(out, r)?)
}

/// Max relative error of d(build)/d(inputs).
pub fn check_inputs<F, E>(inputs: &[Tensor], build: F) -> std::result::Result<(f64, usize), E>
where
    F: Fn(&Graph, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |xs: &[Tensor]| -> std::result::Result<f64, E> {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = build(&g, &vars)?;
        Ok(g.scalar(project(&g, out, 1)?)?)
    };
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = build(&g, &vars)?;
    let loss = project(&g, out, 1)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut count = 0;
    let mut xs = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads
            .get(v)
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
            count += 1;
        }
    }
    Ok((worst, count))
}

/// Max relative error of d(build)/d(every parameter in `store`).
pub fn check_params<F, E>(store: &ParamStore, build: F) -> std::result::Result<(f64, usize), E>
where
    F: Fn(&Graph, &Bound) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let mut store = store.clone();
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        store.set_trainable(id, true);
    }
    let eval = |s: &ParamStore| -> std::result::Result<f64, E> {
        let g = Graph::new();
        let p = s.bind(&g, false);
        let out = build(&g, &p)?;
        Ok(g.scalar(project(&g, out, 2)?)?)
    };
    let g = Graph::new();
    let p = store.bind(&g, true);
    let out = build(&g, &p)?;
    let loss = project(&g, out, 2)?;
    let grads = store.collect_grads(&p, &g.backward(loss)?);

    let mut worst = 0.0f64;
    let mut count = 0;
    for (&id, analytic) in ids.iter().zip(&grads) {
        for (j, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + STEP;
            let up = eval(&store)?;
            store.get_mut(id).data_mut()[j] = orig - STEP;
            let down = eval(&store)?;
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(a, numeric));
            count += 1;
        }
    }
    Ok((worst, count))
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, 1.0)
}

/// Values bounded away from zero so relu never sits on its kink.
fn rand_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_t(rng, shape);
    for x in t.data_mut() {
        *x = x.signum() * (0.1 + x.abs());
    }
    t
}

/// Randomizes every parameter so zero-initialized biases do not hide errors.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for x in store.get_mut(id).data_mut() {
            *x += rng.random_range(-scale..scale);
        }
    }
}

type InputCheck = (
    &'static str,
    Vec<Tensor>,
    Box<dyn Fn(&Graph, &[Var]) -> Result<Var>>,
);

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<InputCheck> {
    let mut r = |shape: &[usize]| rand_t(rng, shape);
    let (a23, b34, a23b, v3, v4, m34, m35) = (
        r(&[2, 3]),
        r(&[3, 4]),
        r(&[2, 3]),
        r(&[3]),
        r(&[4]),
        r(&[3, 4]),
        r(&[3, 5]),
    );
    let (w3, logits, table) = (r(&[3]), r(&[5]), r(&[4, 3]));
    let (v3b, v3c, a23c) = (r(&[3]), r(&[3]), r(&[2, 3]));
    let relu_in = rand_off_zero(rng, &[2, 3]);
    vec![
        (
            "matmul",
            vec![a23.clone(), b34.clone()],
            Box::new(|g, x| g.matmul(x[0], x[1])),
        ),
        (
            "matmul_vec",
            vec![v3.clone(), b34.clone()],
            Box::new(|g, x| g.matmul(x[0], x[1])),
        ),
        (
            "add",
            vec![a23.clone(), a23b.clone()],
            Box::new(|g, x| g.add(x[0], x[1])),
        ),
        (
            "sub",
            vec![a23.clone(), a23b.clone()],
            Box::new(|g, x| g.sub(x[0], x[1])),
        ),
        (
            "mul",
            vec![a23.clone(), a23b.clone()],
            Box::new(|g, x| g.mul(x[0], x[1])),
        ),
        (
            "add_row",
            vec![a23.clone(), v3.clone()],
            Box::new(|g, x| g.add_row(x[0], x[1])),
        ),
        (
            "scale",
            vec![a23.clone()],
            Box::new(|g, x| g.scale(x[0], -2.5)),
        ),
        ("tanh", vec![a23.clone()], Box::new(|g, x| g.tanh(x[0]))),
        (
            "sigmoid",
            vec![a23.clone()],
            Box::new(|g, x| g.sigmoid(x[0])),
        ),
        ("relu", vec![relu_in], Box::new(|g, x| g.relu(x[0]))),
        (
            "softmax",
            vec![v4.clone()],
            Box::new(|g, x| g.softmax(x[0])),
        ),
        (
            "softmax_rows",
            vec![m34.clone()],
            Box::new(|g, x| g.softmax(x[0])),
        ),
        (
            "concat_rows",
            vec![a23.clone(), m35.clone().reshaped(vec![5, 3]).unwrap()],
            Box::new(|g, x| g.concat(&[x[0], x[1]], 0)),
        ),
        (
            "concat_cols",
            vec![m34.clone(), m35.clone()],
            Box::new(|g, x| g.concat(&[x[0], x[1]], 1)),
        ),
        (
            "concat_vec",
            vec![v3.clone(), v4.clone()],
            Box::new(|g, x| g.concat(&[x[0], x[1]], 0)),
        ),
        (
            "narrow",
            vec![m35.clone()],
            Box::new(|g, x| g.narrow(x[0], 1, 1, 3)),
        ),
        (
            "reshape",
            vec![a23.clone()],
            Box::new(|g, x| g.reshape(x[0], &[3, 2])),
        ),
        (
            "flatten",
            vec![m34.clone()],
            Box::new(|g, x| g.flatten(x[0])),
        ),
        (
            "repeat_rows",
            vec![v3.clone()],
            Box::new(|g, x| g.repeat_rows(x[0], 4)),
        ),
        (
            "stack",
            vec![v3.clone(), v3b, v3c],
            Box::new(|g, x| g.stack(x)),
        ),
        ("row", vec![m34.clone()], Box::new(|g, x| g.row(x[0], 2))),
        (
            "weighted_sum",
            vec![m34.clone(), w3],
            Box::new(|g, x| g.weighted_sum(x[0], x[1])),
        ),
        (
            "gather",
            vec![table],
            Box::new(|g, x| g.gather(x[0], &[2, 0, 2, 3])),
        ),
        ("sum", vec![a23.clone()], Box::new(|g, x| g.sum(x[0]))),
        ("mean", vec![a23.clone()], Box::new(|g, x| g.mean(x[0]))),
        (
            "add_n",
            vec![a23.clone(), a23b, a23c],
            Box::new(|g, x| g.add_n(x)),
        ),
        (
            "softmax_cross_entropy",
            vec![logits],
            Box::new(|g, x| g.softmax_cross_entropy(x[0], 3)),
        ),
        (
            "attention_score",
            vec![m34, v4],
            Box::new(|g, x| {
                let s = g.matmul(
                    g.tanh(x[0])?,
                    g.constant(Tensor::from_rows(&[[0.3], [-0.7], [1.1], [0.2]])),
                )?;
                let w = g.softmax(g.reshape(s, &[3])?)?;
                g.add(g.weighted_sum(x[0], w)?, x[1])
            }),
        ),
    ]
}

type ParamCheck = (
    &'static str,
    ParamStore,
    Box<dyn Fn(&Graph, &Bound) -> Result<Var>>,
);

fn layer_cases(rng: &mut ChaCha8Rng) -> Vec<ParamCheck> {
    let mut out: Vec<ParamCheck> = Vec::new();
    let seq = rand_t(rng, &[4, 3]);

    for (name, act) in [
        ("dense_tanh", Activation::Tanh),
        ("dense_relu", Activation::Relu),
    ] {
        let mut store = ParamStore::new();
        let layer = DenseLayer::new(&mut store, rng, "d", 3, 2, act);
        jitter(&mut store, rng, 0.3);
        let x = seq.clone();
        if act == Activation::Relu {
            // Keep pre-activations off the kink.
            let pre = {
                let g = Graph::new();
                let p = store.bind(&g, false);
                let w = g.value(p.var(layer.weight)).unwrap();
                let b = g.value(p.var(layer.bias)).unwrap();
                crate::autodiff::matmul_raw(x.data(), w.data(), 4, 3, 2)
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + b.data()[i % 2])
                    .collect::<Vec<_>>()
            };
            if pre.iter().any(|v| v.abs() < 1e-3) {
                continue;
            }
        }
        out.push((
            name,
            store,
            Box::new(move |g, p| layer.forward(g, p, g.constant(x.clone()))),
        ));
    }

    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, rng, "lstm", 3, 2);
    jitter(&mut store, rng, 0.3);
    let (x, h0, c0) = (rand_t(rng, &[3]), rand_t(rng, &[2]), rand_t(rng, &[2]));
    out.push((
        "lstm_step",
        store,
        Box::new(move |g, p| {
            let s = LstmState {
                h: g.constant(h0.clone()),
                c: g.constant(c0.clone()),
            };
            let s = cell.step(g, p, g.constant(x.clone()), s)?;
            g.concat(&[s.h, s.c], 0)
        }),
    ));

    let mut store = ParamStore::new();
    let bi = BiLstmLayer::new(&mut store, rng, "bi", 3, 2);
    jitter(&mut store, rng, 0.3);
    let x = seq.clone();
    out.push((
        "bilstm",
        store,
        Box::new(move |g, p| {
            let o = bi.forward(g, p, g.constant(x.clone()))?;
            g.concat(
                &[g.flatten(o.outputs)?, o.forward_final.c, o.backward_final.c],
                0,
            )
        }),
    ));

    let mut store = ParamStore::new();
    let emb = EmbeddingTable::new(&mut store, rng, "emb", 5, 3);
    out.push((
        "embedding",
        store,
        Box::new(move |g, p| emb.lookup(g, p, &[1, 4, 1])),
    ));
    out
}

fn op_check(name: &str, (err, partials): (f64, usize), tolerance: f64) -> OpCheck {
    OpCheck {
        name: name.to_string(),
        max_relative_error: err,
        tolerance,
        partials,
        passed: err < tolerance,
    }
}

/// Checks every primitive op and layer at `PRIMITIVE_TOLERANCE`.
pub fn check_primitives(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    for (name, inputs, build) in primitive_cases(&mut rng) {
        checks.push(op_check(
            name,
            check_inputs(&inputs, build)?,
            PRIMITIVE_TOLERANCE,
        ));
    }
    for (name, store, build) in layer_cases(&mut rng) {
        checks.push(op_check(
            name,
            check_params(&store, build)?,
            PRIMITIVE_TOLERANCE,
        ));
    }
    Ok(checks)
}

/// Caption loss of the miniature model against every parameter.
pub fn check_end_to_end(seed: u64) -> std::result::Result<OpCheck, ModelError> {
    let config = SsvcConfig::mini();
    let mut params = SsvcParams::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for id in params.store.ids().collect::<Vec<_>>() {
        *params.store.get_mut(id) = rand_t(&mut rng, params.store.get(id).shape());
    }
    let frames = rand_t(&mut rng, &[config.frames_per_seq, config.feature_dim]);
    // start, three words, end, pad
    let caption = vec![1, 4, 6, 5, 2, 0];
    let result = check_params(&params.store, |g, p| {
        params.caption_loss(g, p, g.constant(frames.clone()), &caption)
    })?;
    Ok(op_check("ssvc_end_to_end", result, END_TO_END_TOLERANCE))
}

pub fn gradcheck(seed: u64) -> std::result::Result<GradcheckReport, ModelError> {
    let mut checks = check_primitives(seed)?;
    checks.push(check_end_to_end(seed)?);
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradcheckReport { checks, passed })
}
