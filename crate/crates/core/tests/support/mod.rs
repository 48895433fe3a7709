//! Oracles shared by the gradient-check and acceptance suites: central
//! finite differences and textbook metric formulas written independently
//! of the library code.

#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salvit::geom::{make_layout, LayoutKind};
use salvit::losses::{self, CcMode, MaskMode, SupervisedConfig, VacConfig};
use salvit::model::{Instrument, ModelConfig, SalVit};
use salvit::tensor::{Graph, SparseMatrix, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

/// A scalar function of `inputs` built on a fresh graph.
pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

impl Case {
    fn new(name: impl Into<String>, inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var + 'static) -> Self {
        Self {
            name: name.into(),
            inputs,
            build: Box::new(build),
        }
    }

    fn eval(&self, inputs: &[Tensor]) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (self.build)(&mut g, &vars);
        g.value(out).item()
    }

    fn analytic(&self) -> Vec<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = (self.build)(&mut g, &vars);
        g.backward(out).expect("scalar output");
        vars.iter()
            .zip(&self.inputs)
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    fn numeric(&self, h: f64) -> Vec<Tensor> {
        let mut inputs = self.inputs.clone();
        let mut out = Vec::with_capacity(inputs.len());
        for k in 0..inputs.len() {
            let mut grad = Tensor::zeros(inputs[k].shape());
            for i in 0..inputs[k].numel() {
                let x = inputs[k].data()[i];
                inputs[k].data_mut()[i] = x + h;
                let up = self.eval(&inputs);
                inputs[k].data_mut()[i] = x - h;
                let down = self.eval(&inputs);
                inputs[k].data_mut()[i] = x;
                grad.data_mut()[i] = (up - down) / (2.0 * h);
            }
            out.push(grad);
        }
        out
    }

    /// `||a - n|| / max(||a||, ||n||)` over all inputs jointly; 0 when both
    /// gradients vanish.
    pub fn relative_error(&self) -> f64 {
        let a = self.analytic();
        let n = self.numeric(FD_STEP);
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for (ta, tn) in a.iter().zip(&n) {
            for (x, y) in ta.data().iter().zip(tn.data()) {
                diff += (x - y) * (x - y);
                na += x * x;
                nn += y * y;
            }
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale == 0.0 {
            0.0
        } else {
            diff.sqrt() / scale
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Values in `[lo, hi]` with magnitude at least `gap`, away from kinks at 0.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(gap..1.0);
        if r.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Contracts `out` with a fixed random tensor so every output element
/// contributes to the checked gradient.
fn readout(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let mut r = rng(seed ^ 0x5a5a);
    let w = g.constant(uniform(&mut r, &shape, -1.0, 1.0));
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

fn unary(name: &str, x: Tensor, f: fn(&mut Graph, Var) -> Var) -> Case {
    Case::new(name, vec![x], move |g, v| {
        let y = f(g, v[0]);
        readout(g, y, 1)
    })
}

fn shaped(name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var + 'static) -> Case {
    Case::new(name, inputs, move |g, v| {
        let y = f(g, v);
        readout(g, y, 2)
    })
}

/// One case per differentiable graph operation.
pub fn op_cases() -> Vec<Case> {
    let mut r = rng(11);
    let s = [2, 3, 4];
    let mut c = Vec::new();
    let bin: [(&str, fn(&mut Graph, Var, Var) -> Var); 4] = [
        ("add", |g, a, b| g.add(a, b).unwrap()),
        ("sub", |g, a, b| g.sub(a, b).unwrap()),
        ("mul", |g, a, b| g.mul(a, b).unwrap()),
        ("div", |g, a, b| g.div(a, b).unwrap()),
    ];
    for (name, f) in bin {
        for (mode, bshape) in [("same", vec![2, 3, 4]), ("trailing", vec![2, 3, 1]), ("row", vec![4]), ("scalar", vec![1])] {
            let a = uniform(&mut r, &s, -1.0, 1.0);
            let b = uniform(&mut r, &bshape, 0.5, 1.5);
            c.push(shaped(&format!("{name}/{mode}"), vec![a, b], move |g, v| f(g, v[0], v[1])));
        }
    }
    c.push(unary("add_scalar", uniform(&mut r, &s, -1.0, 1.0), |g, x| g.add_scalar(x, 0.7)));
    c.push(unary("mul_scalar", uniform(&mut r, &s, -1.0, 1.0), |g, x| g.mul_scalar(x, -1.3)));
    c.push(unary("neg", uniform(&mut r, &s, -1.0, 1.0), |g, x| g.neg(x)));
    c.push(unary("square", uniform(&mut r, &s, -1.0, 1.0), |g, x| g.square(x)));
    c.push(unary("exp", uniform(&mut r, &s, -1.0, 1.0), |g, x| g.exp(x)));
    c.push(unary("log", uniform(&mut r, &s, 0.2, 2.0), |g, x| g.log(x)));
    c.push(unary("relu", away_from_zero(&mut r, &s, 0.05), |g, x| g.relu(x)));
    c.push(unary("gelu", uniform(&mut r, &s, -2.0, 2.0), |g, x| g.gelu(x)));
    c.push(unary("softplus", uniform(&mut r, &s, -2.0, 2.0), |g, x| g.softplus(x)));
    c.push(unary("sqrt", uniform(&mut r, &s, 0.2, 2.0), |g, x| g.sqrt(x).unwrap()));
    c.push(shaped(
        "matmul/2d",
        vec![uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[4, 5], -1.0, 1.0)],
        |g, v| g.matmul(v[0], v[1]).unwrap(),
    ));
    c.push(shaped(
        "matmul/batched",
        vec![uniform(&mut r, &[2, 3, 4], -1.0, 1.0), uniform(&mut r, &[2, 4, 2], -1.0, 1.0)],
        |g, v| g.matmul(v[0], v[1]).unwrap(),
    ));
    c.push(shaped("permute", vec![uniform(&mut r, &s, -1.0, 1.0)], |g, v| g.permute(v[0], &[2, 0, 1]).unwrap()));
    c.push(shaped("transpose", vec![uniform(&mut r, &s, -1.0, 1.0)], |g, v| g.transpose(v[0]).unwrap()));
    c.push(shaped("reshape", vec![uniform(&mut r, &s, -1.0, 1.0)], |g, v| g.reshape(v[0], &[6, 4]).unwrap()));
    c.push(shaped(
        "concat",
        vec![uniform(&mut r, &[2, 3], -1.0, 1.0), uniform(&mut r, &[2, 2], -1.0, 1.0)],
        |g, v| g.concat(&[v[0], v[1]], 1).unwrap(),
    ));
    c.push(shaped("slice", vec![uniform(&mut r, &s, -1.0, 1.0)], |g, v| g.slice(v[0], 1, 1, 2).unwrap()));
    c.push(shaped("sum", vec![uniform(&mut r, &s, -1.0, 1.0)], |g, v| g.sum(v[0])));
    c.push(shaped("mean", vec![uniform(&mut r, &s, -1.0, 1.0)], |g, v| g.mean(v[0])));
    c.push(shaped("sum_last", vec![uniform(&mut r, &s, -1.0, 1.0)], |g, v| g.sum_last(v[0]).unwrap()));
    c.push(shaped("mean_last", vec![uniform(&mut r, &s, -1.0, 1.0)], |g, v| g.mean_last(v[0]).unwrap()));
    // distinct values keep the argmax stable under the FD step
    let distinct = Tensor::from_fn(&[3, 4], |i| ((i * 7) % 12) as f64 * 0.1);
    c.push(shaped("max_all", vec![distinct], |g, v| g.max_all(v[0]).unwrap()));
    c.push(shaped("softmax", vec![uniform(&mut r, &s, -2.0, 2.0)], |g, v| g.softmax(v[0]).unwrap()));
    c.push(shaped("layer_norm", vec![uniform(&mut r, &s, -2.0, 2.0)], |g, v| g.layer_norm(v[0], 1e-5).unwrap()));
    c.push(shaped(
        "layer_norm_affine",
        vec![
            uniform(&mut r, &s, -2.0, 2.0),
            uniform(&mut r, &[4], 0.5, 1.5),
            uniform(&mut r, &[4], -0.5, 0.5),
        ],
        |g, v| g.layer_norm_affine(v[0], v[1], v[2], 1e-5).unwrap(),
    ));
    c.push(shaped(
        "linear",
        vec![
            uniform(&mut r, &[3, 4], -1.0, 1.0),
            uniform(&mut r, &[4, 5], -1.0, 1.0),
            uniform(&mut r, &[5], -1.0, 1.0),
        ],
        |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap(),
    ));
    for pad in [0, 1] {
        c.push(shaped(
            &format!("conv2d/pad{pad}"),
            vec![
                uniform(&mut r, &[2, 3, 5, 5], -1.0, 1.0),
                uniform(&mut r, &[4, 3, 3, 3], -1.0, 1.0),
                uniform(&mut r, &[4], -1.0, 1.0),
            ],
            move |g, v| g.conv2d(v[0], v[1], Some(v[2]), pad).unwrap(),
        ));
    }
    c.push(shaped("avg_pool2d", vec![uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0)], |g, v| {
        g.avg_pool2d(v[0]).unwrap()
    }));
    c.push(shaped("upsample2x", vec![uniform(&mut r, &[2, 3, 2, 3], -1.0, 1.0)], |g, v| {
        g.upsample2x(v[0]).unwrap()
    }));
    c.push(shaped("rotary", vec![uniform(&mut r, &[2, 5, 6], -1.0, 1.0)], |g, v| {
        g.rotary(v[0], &[0, 3, 1, 7, 2], 10_000.0).unwrap()
    }));
    let rows: Vec<Vec<(usize, f64)>> = (0..5)
        .map(|i| (0..3).map(|k| ((i * 5 + k * 7) % 12, r.random_range(-1.0..1.0))).collect())
        .collect();
    let map = Arc::new(SparseMatrix::from_rows(12, &rows).unwrap());
    c.push(shaped("sparse_map", vec![uniform(&mut r, &[3, 4], -1.0, 1.0)], move |g, v| {
        g.sparse_map(v[0], map.clone(), &[5]).unwrap()
    }));
    c
}

fn positive_map(r: &mut ChaCha8Rng, n: usize) -> Tensor {
    let t = uniform(r, &[n], 0.05, 1.0);
    let s: f64 = t.data().iter().sum();
    Tensor::from_fn(&[n], |i| t.data()[i] / s)
}

/// One case per supervised and consistency loss term (both arguments vary).
pub fn loss_cases() -> Vec<Case> {
    let mut r = rng(23);
    let n = 24;
    let mut c = Vec::new();
    let pair = |r: &mut ChaCha8Rng| vec![positive_map(r, n), positive_map(r, n)];
    let fix = Tensor::from_fn(&[n], |i| f64::from(i % 5 == 1));
    let weights = uniform(&mut r, &[n], 0.0, 1.0);

    c.push(Case::new("kld_loss", pair(&mut r), |g, v| losses::kld_loss(g, v[0], v[1], 1e-7).unwrap()));
    c.push(Case::new("pearson", pair(&mut r), |g, v| losses::pearson(g, v[0], v[1]).unwrap()));
    c.push(Case::new("cc_loss", pair(&mut r), |g, v| losses::cc_loss(g, v[0], v[1]).unwrap()));
    let f1 = fix.clone();
    c.push(Case::new("smse_loss", pair(&mut r), move |g, v| losses::smse_loss(g, v[0], v[1], &f1).unwrap()));
    let f2 = fix.clone();
    c.push(Case::new("supervised_loss", pair(&mut r), move |g, v| {
        losses::supervised_loss(g, v[0], v[1], &f2, SupervisedConfig::default()).unwrap().total
    }));
    let w1 = weights.clone();
    c.push(Case::new("weighted_kld", pair(&mut r), move |g, v| {
        let w = g.constant(w1.clone());
        losses::weighted_kld(g, v[0], v[1], w, 1e-7).unwrap()
    }));
    for mode in [CcMode::Cosine, CcMode::Literal] {
        let w = weights.clone();
        c.push(Case::new(format!("weighted_cc/{mode:?}"), pair(&mut r), move |g, v| {
            let w = g.constant(w.clone());
            losses::weighted_cc(g, v[0], v[1], w, mode).unwrap()
        }));
    }
    c.push(Case::new("cosine_cc_loss", pair(&mut r), |g, v| losses::cosine_cc_loss(g, v[0], v[1]).unwrap()));
    let w2 = weights.clone();
    c.push(Case::new("vac_loss", pair(&mut r), move |g, v| {
        let w = g.constant(w2.clone());
        losses::vac_loss(g, v[0], v[1], w, &VacConfig::default()).unwrap().total
    }));
    // the mask enters as a constant; check it against a real grid too
    let layout = make_layout(LayoutKind::Ring, 4, 120.0, 8).unwrap();
    let (inv, _) = salvit::geom::build_inverse_grid(&layout, 4, 8).unwrap();
    let mask = losses::vac_mask(&inv, MaskMode::Count);
    c.push(Case::new("vac_loss/grid_mask", vec![positive_map(&mut r, 32), positive_map(&mut r, 32)], move |g, v| {
        let w = g.constant(mask.clone());
        losses::vac_loss(g, v[0], v[1], w, &VacConfig::default()).unwrap().total
    }));
    c
}

pub fn block_config() -> ModelConfig {
    ModelConfig {
        frames: 3,
        dim: 8,
        heads: 2,
        depth: 1,
        patch_px: 8,
        feat_hw: 1,
        decoder_out: 8,
        seed: 4,
        ..ModelConfig::default()
    }
}

/// One transformer block (temporal then spatial attention then MLP) over
/// (F, T, D) tokens; inputs are the tokens followed by every block-0
/// parameter.
pub fn vsta_block_case() -> Case {
    let model = SalVit::new(block_config()).unwrap();
    let names: Vec<String> = model
        .params
        .names()
        .iter()
        .filter(|n| n.starts_with("blocks.0."))
        .cloned()
        .collect();
    let cfg = &model.config;
    let mut r = rng(31);
    let mut inputs = vec![uniform(&mut r, &[cfg.frames, 4, cfg.dim], -1.0, 1.0)];
    inputs.extend(names.iter().map(|n| {
        // perturb so e.g. unit gammas and zero biases are generic points
        let t = model.params.get(n).unwrap();
        Tensor::from_fn(t.shape(), |i| t.data()[i] + r.random_range(-0.1..0.1))
    }));
    Case::new("vsta_block", inputs, move |g, v| {
        let vars: Vec<Var> = model
            .params
            .names()
            .iter()
            .zip(model.params.values())
            .map(|(n, t)| match names.iter().position(|k| k == n) {
                Some(i) => v[i + 1],
                None => g.constant(t.clone()),
            })
            .collect();
        let b = model.params.bind_vars(vars);
        let mut instr = Instrument::default();
        let y = model.transformer(g, &b, v[0], &mut instr).unwrap();
        readout(g, y, 3)
    })
}

/// The position-embedding FC: gradient of the summed embeddings with
/// respect to its weight and bias.
pub fn position_embedding_case() -> Case {
    let cfg = ModelConfig {
        feat_hw: 2,
        patch_px: 16,
        decoder_out: 16,
        ..block_config()
    };
    let model = SalVit::new(cfg).unwrap();
    let layout = make_layout(LayoutKind::Ring, 6, 120.0, 16).unwrap();
    let set = model.tangent_set(&layout, 8, 16).unwrap();
    let inputs = vec![
        model.params.get("pos.weight").unwrap().clone(),
        model.params.get("pos.bias").unwrap().clone(),
    ];
    Case::new("position_embedding", inputs, move |g, v| {
        let vars: Vec<Var> = model
            .params
            .names()
            .iter()
            .zip(model.params.values())
            .map(|(n, t)| match n.as_str() {
                "pos.weight" => v[0],
                "pos.bias" => v[1],
                _ => g.constant(t.clone()),
            })
            .collect();
        let b = model.params.bind_vars(vars);
        let e = model.position_embedding(g, &b, &set).unwrap().unwrap();
        g.sum(e)
    })
}

// ---------------------------------------------------------------- metrics

pub fn brute_nss(p: &[f64], fix: &[f64]) -> f64 {
    let n = p.len() as f64;
    let mut mean = 0.0;
    for v in p {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for v in p {
        var += (v - mean).powi(2);
    }
    let std = (var / n).sqrt();
    let (mut acc, mut k) = (0.0, 0.0);
    for i in 0..p.len() {
        if fix[i] > 0.0 {
            acc += (p[i] - mean) / std;
            k += 1.0;
        }
    }
    acc / k
}

fn normalize(x: &[f64]) -> Vec<f64> {
    let s: f64 = x.iter().sum();
    x.iter().map(|v| v / s).collect()
}

/// `sum q log(eps + q / (p + eps))` of the sum-normalised maps.
pub fn brute_kld(p: &[f64], q: &[f64]) -> f64 {
    let eps = 1e-7;
    let (p, q) = (normalize(p), normalize(q));
    let mut acc = 0.0;
    for i in 0..p.len() {
        acc += q[i] * (eps + q[i] / (p[i] + eps)).ln();
    }
    acc
}

pub fn brute_cc(p: &[f64], q: &[f64]) -> f64 {
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let mq = q.iter().sum::<f64>() / n;
    let (mut num, mut dp, mut dq) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        num += (p[i] - mp) * (q[i] - mq);
        dp += (p[i] - mp).powi(2);
        dq += (q[i] - mq).powi(2);
    }
    num / (dp * dq).sqrt()
}

pub fn brute_sim(p: &[f64], q: &[f64]) -> f64 {
    let (p, q) = (normalize(p), normalize(q));
    let mut acc = 0.0;
    for i in 0..p.len() {
        acc += if p[i] < q[i] { p[i] } else { q[i] };
    }
    acc
}
