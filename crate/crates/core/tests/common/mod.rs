//! Check suites shared by the integration tests and the acceptance runner.

#![allow(dead_code)]

use grid_vlp::fusion::{sample_grid_indices, FusionConfig};
use grid_vlp::model::{GridVlpModel, ModelConfig, ModelInput, VisualInput};
use grid_vlp::tasks::{apply_mlm_masking, itm_corrupt, task_losses, ItmSlot, MaskBranch, MaskingConfig, TaskLabels, IGNORE};
use grid_vlp::tensor::gradcheck;
use grid_vlp::tensor::{Bindings, ParamStore, Tape, Tensor, TensorError, Var};
use grid_vlp::text::{TokenSequence, CLS, MASK, PAD, SEP};
use grid_vlp::vision::{nms, roi_pool, BoundingBox, CnnConfig, CnnEncoder, GridFeatureMap};
use grid_vlp::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub mod pipeline;

pub const GRAD_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
pub const ORACLE_TOL: f64 = 1e-10;

/// One named measurement against its acceptance bound.
#[derive(Clone, Debug)]
pub struct Measure {
    pub name: String,
    pub value: f64,
    pub pass: bool,
    pub detail: String,
}

impl Measure {
    pub fn below(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            pass: value < bound,
            detail: format!("{value:.3e} < {bound:.0e}"),
        }
    }

    pub fn exact(name: impl Into<String>, mismatches: usize) -> Self {
        Self {
            name: name.into(),
            value: mismatches as f64,
            pass: mismatches == 0,
            detail: format!("{mismatches} mismatches"),
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            pass: value >= bound,
            detail: format!("{value:.4} >= {bound}"),
        }
    }

    pub fn within(name: impl Into<String>, observed: f64, expected: f64, sigma: f64) -> Self {
        let z = (observed - expected) / sigma;
        Self {
            name: name.into(),
            value: observed,
            pass: z.abs() <= 3.0,
            detail: format!("{observed:.5} vs {expected:.5} ({z:+.2} sigma)"),
        }
    }
}

pub fn failures(measures: &[Measure]) -> Vec<String> {
    measures
        .iter()
        .filter(|m| !m.pass)
        .map(|m| format!("{}: {}", m.name, m.detail))
        .collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum with fixed distinct weights, reducing any output to a scalar.
fn probe(tape: &mut Tape<f64>, y: Var) -> Result<Var, TensorError> {
    let n = tape.value(y).len();
    let w = Tensor::new(
        tape.shape(y).to_vec(),
        (0..n).map(|i| ((i * 7919 % 113) as f64 / 113.0) - 0.4).collect(),
    )?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn grad_op<F>(name: &str, inputs: Vec<Tensor<f64>>, build: F) -> Measure
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let report = gradcheck::check::<_, TensorError>(&inputs, FD_STEP, build).unwrap();
    Measure::below(name, report.max_rel_err, GRAD_TOL)
}

pub fn tiny_fusion() -> FusionConfig {
    FusionConfig {
        layers: 2,
        width: 8,
        heads: 2,
        ffn_width: 16,
        max_text_len: 1,
        grid_sample_k: 2,
        dropout: 0.0,
        ln_eps: 1e-12,
    }
}

pub fn tiny_model(seed: u64) -> GridVlpModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ModelConfig::new(tiny_fusion(), 9, 3);
    cfg.tie_mlm_weights = true;
    let mut model = GridVlpModel::<f64>::new(cfg, &mut rng).unwrap();
    jitter(&mut model.store, 0.1, &mut rng);
    model
}

/// Adds uniform noise to every parameter so zero-initialised biases and
/// unit gains do not sit on special points.
pub fn jitter(store: &mut ParamStore<f64>, amount: f64, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get(id).clone();
        let moved: Vec<f64> = t.data().iter().map(|v| v + rng.gen_range(-amount..amount)).collect();
        store.replace(id, Tensor::new(t.shape().to_vec(), moved).unwrap()).unwrap();
    }
}

pub fn token_seq(ids: &[usize]) -> TokenSequence {
    TokenSequence {
        ids: ids.to_vec(),
        valid: ids.iter().map(|&i| i != PAD).collect(),
    }
}

pub fn visual(rng: &mut ChaCha8Rng, n: usize, channels: usize) -> VisualInput<f64> {
    VisualInput {
        features: rand_tensor(rng, &[n, channels]),
        cells: (0..n).map(|i| (i / 2, i % 2)).collect(),
    }
}

/// Full fused model: 3 text tokens and 2 grid tokens per sample, all three
/// losses active, checked against central differences on every parameter.
pub fn full_model_gradient() -> Measure {
    let model = tiny_model(40);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let tokens = [token_seq(&[CLS, MASK, SEP]), token_seq(&[CLS, 7, SEP])];
    let visuals = [visual(&mut rng, 2, 3), visual(&mut rng, 2, 3)];
    let labels = TaskLabels {
        mlm: vec![IGNORE, 6, IGNORE, IGNORE, IGNORE, IGNORE],
        itm: vec![1, 0],
        qa: vec![3, IGNORE],
    };
    let inputs: Vec<Tensor<f64>> = model.store.ids().map(|id| model.store.get(id).clone()).collect();
    let report = gradcheck::check(&inputs, FD_STEP, |tape, vars| {
        let params = Bindings::from_vars(vars.to_vec());
        let batch: Vec<ModelInput<f64>> = tokens
            .iter()
            .zip(&visuals)
            .map(|(tokens, visual)| ModelInput { tokens, visual })
            .collect();
        let enc = model.forward::<ChaCha8Rng>(tape, &params, &batch, None)?;
        Ok::<_, Error>(model.losses(tape, &params, &enc, &labels)?.total)
    })
    .unwrap();
    Measure::below("full fused model", report.max_rel_err, GRAD_TOL)
}

/// Grid encoder and its cell classifier on a 32×64 input.
pub fn cnn_gradient() -> Measure {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut cnn = CnnEncoder::<f64>::new(
        CnnConfig {
            channels: [2, 2, 3, 3, 4],
            depth: 1,
            head_hidden: 5,
            num_classes: 3,
        },
        &mut rng,
    )
    .unwrap();
    jitter(&mut cnn.store, 0.05, &mut rng);
    let mut inputs: Vec<Tensor<f64>> = cnn.store.ids().map(|id| cnn.store.get(id).clone()).collect();
    inputs.push(
        Tensor::new(
            vec![1, 3, 32, 64],
            (0..3 * 32 * 64).map(|i| ((i * 37 % 101) as f64) / 101.0).collect(),
        )
        .unwrap(),
    );
    let n = cnn.store.len();
    let report = gradcheck::check(&inputs, FD_STEP, |tape, vars| {
        let params = Bindings::from_vars(vars[..n].to_vec());
        let fmap = cnn.forward(tape, &params, vars[n])?;
        let logits = cnn.classify_cells(tape, &params, fmap)?;
        Ok::<_, Error>(tape.cross_entropy(logits, &[2, 0], -1)?)
    })
    .unwrap();
    Measure::below("grid encoder + cell head", report.max_rel_err, GRAD_TOL)
}

/// Every differentiable operation, then the grid encoder and the full model.
pub fn gradient_suite() -> Vec<Measure> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut out = Vec::new();
    let r = &mut rng;
    out.push(grad_op("matmul + transpose", vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[5, 4])], |t, v| {
        let bt = t.transpose(v[1])?;
        let y = t.matmul(v[0], bt)?;
        probe(t, y)
    }));
    out.push(grad_op(
        "add, mul, add_row, scale, reshape, mean",
        vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[3, 4]), rand_tensor(r, &[4])],
        |t, v| {
            let a = t.add(v[0], v[1])?;
            let m = t.mul(a, v[0])?;
            let s = t.add_row(m, v[2])?;
            let s = t.scale(s, 1.7)?;
            let flat = t.reshape(s, vec![12])?;
            let mn = t.mean(flat)?;
            let p = probe(t, s)?;
            t.add(p, mn)
        },
    ));
    out.push(grad_op("sum", vec![rand_tensor(r, &[2, 5])], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        t.sum(sq)
    }));
    out.push(grad_op("gelu", vec![rand_tensor(r, &[4, 5])], |t, v| {
        let y = t.gelu(v[0])?;
        probe(t, y)
    }));
    let mut x = rand_tensor(r, &[13]);
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    out.push(grad_op("relu", vec![x], |t, v| {
        let y = t.relu(v[0])?;
        probe(t, y)
    }));
    out.push(grad_op(
        "layer_norm",
        vec![rand_tensor(r, &[4, 6]), rand_tensor(r, &[6]), rand_tensor(r, &[6])],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(t, y)
        },
    ));
    out.push(grad_op(
        "gather_rows + concat_rows",
        vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[2, 4])],
        |t, v| {
            let c = t.concat_rows(&[v[0], v[1], v[0]])?;
            let g = t.gather_rows(c, &[0, 5, 1, 0, 3])?;
            probe(t, g)
        },
    ));
    out.push(grad_op(
        "conv2d",
        vec![rand_tensor(r, &[2, 6, 6]), rand_tensor(r, &[3, 2, 3, 3]), rand_tensor(r, &[3])],
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            probe(t, y)
        },
    ));
    let mask = vec![true, true, false, true, false, true];
    out.push(grad_op(
        "attention (masked)",
        vec![rand_tensor(r, &[6, 4]), rand_tensor(r, &[6, 4]), rand_tensor(r, &[6, 4])],
        move |t, v| {
            let y = t.attention(v[0], v[1], v[2], 2, 2, &mask)?;
            probe(t, y)
        },
    ));
    out.push(grad_op("dropout + cross_entropy", vec![rand_tensor(r, &[4, 7])], |t, v| {
        let mut drop_rng = ChaCha8Rng::seed_from_u64(99);
        let d = t.dropout(v[0], 0.3, &mut drop_rng)?;
        t.cross_entropy(d, &[3, -1, 0, 6], -1)
    }));
    out.push(cnn_gradient());
    out.push(full_model_gradient());
    out
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel(*x, *y)).fold(0.0, f64::max)
}

fn matmul_ref(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn conv_ref(x: &[f64], w: &[f64], bias: &[f64], cin: usize, h: usize, wd: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < wd as isize {
                                acc += x[(ci * h + iy as usize) * wd + ix as usize] * w[((co * cin + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

fn nll(row: &[f64], label: usize) -> f64 {
    let z: f64 = row.iter().map(|x| x.exp()).sum();
    z.ln() - row[label]
}

fn iou_ref(a: &BoundingBox, b: &BoundingBox) -> f32 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let area = |r: &BoundingBox| (r.x2 - r.x1) * (r.y2 - r.y1);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Repeatedly takes the best remaining box and discards its overlaps.
fn nms_ref(boxes: &[BoundingBox], scores: &[f32], thr: f32, keep: usize) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut out = Vec::new();
    while !alive.is_empty() && out.len() < keep {
        let mut best = alive[0];
        for &i in &alive {
            if scores[i] > scores[best] || (scores[i] == scores[best] && i < best) {
                best = i;
            }
        }
        out.push(best);
        alive.retain(|&j| j != best && iou_ref(&boxes[best], &boxes[j]) < thr);
    }
    out
}

fn roi_ref(fmap: &[f64], c: usize, rows: usize, cols: usize, b: &BoundingBox) -> Vec<f64> {
    let mut members = Vec::new();
    for r in 0..rows {
        for q in 0..cols {
            let (cx, cy) = (q as f32 + 0.5, r as f32 + 0.5);
            if b.x1 <= cx && cx <= b.x2 && b.y1 <= cy && cy <= b.y2 {
                members.push((r, q));
            }
        }
    }
    if members.is_empty() {
        let (mx, my) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
        let mut best = (0, 0);
        let mut best_d = f32::INFINITY;
        for r in 0..rows {
            for q in 0..cols {
                let d = (q as f32 + 0.5 - mx).powi(2) + (r as f32 + 0.5 - my).powi(2);
                if d < best_d {
                    best_d = d;
                    best = (r, q);
                }
            }
        }
        members.push(best);
    }
    (0..c)
        .map(|ch| {
            members
                .iter()
                .map(|&(r, q)| fmap[(ch * rows + r) * cols + q])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

fn random_box(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> BoundingBox {
    let (xa, xb) = (rng.gen_range(0.0..cols as f32), rng.gen_range(0.0..cols as f32));
    let (ya, yb) = (rng.gen_range(0.0..rows as f32), rng.gen_range(0.0..rows as f32));
    BoundingBox {
        x1: xa.min(xb),
        y1: ya.min(yb),
        x2: xa.max(xb) + 0.01,
        y2: ya.max(yb) + 0.01,
    }
    .clamp_to(rows, cols)
}

trait ClampTo {
    fn clamp_to(self, rows: usize, cols: usize) -> Self;
}

impl ClampTo for BoundingBox {
    fn clamp_to(self, rows: usize, cols: usize) -> Self {
        BoundingBox {
            x2: self.x2.min(cols as f32),
            y2: self.y2.min(rows as f32),
            ..self
        }
    }
}

/// Floating kernels and losses against direct double-precision loops;
/// pooling and suppression against brute-force references.
pub fn oracle_suite() -> Vec<Measure> {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    for (m, k, n) in [(1, 1, 1), (3, 5, 2), (17, 33, 9), (64, 64, 64), (2, 100, 3)] {
        let (a, b) = (rand_tensor(&mut rng, &[m, k]), rand_tensor(&mut rng, &[k, n]));
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        worst = worst.max(max_rel(tape.value(c).data(), &matmul_ref(a.data(), b.data(), m, k, n)));
    }
    out.push(Measure::below("matmul vs triple loop", worst, ORACLE_TOL));

    let mut worst = 0.0f64;
    for (cin, h, w, cout, k, stride, pad) in [(3, 8, 8, 4, 3, 2, 1), (2, 7, 5, 3, 3, 1, 1), (1, 6, 9, 2, 2, 2, 0), (4, 32, 32, 5, 3, 2, 1)] {
        let x = rand_tensor(&mut rng, &[cin, h, w]);
        let kern = rand_tensor(&mut rng, &[cout, cin, k, k]);
        let bias = rand_tensor(&mut rng, &[cout]);
        let mut tape = Tape::new();
        let (vx, vk, vb) = (tape.constant(x.clone()), tape.constant(kern.clone()), tape.constant(bias.clone()));
        let y = tape.conv2d(vx, vk, Some(vb), stride, pad).unwrap();
        let expect = conv_ref(x.data(), kern.data(), bias.data(), cin, h, w, cout, k, stride, pad);
        worst = worst.max(max_rel(tape.value(y).data(), &expect));
    }
    out.push(Measure::below("conv2d vs direct loops", worst, ORACLE_TOL));

    let mut mismatches = 0;
    for (rows, cols, c) in [(1, 1, 3), (2, 3, 4), (5, 8, 2), (19, 32, 3)] {
        let data = rand_tensor(&mut rng, &[c, rows, cols]);
        let fmap = GridFeatureMap::new(data.clone()).unwrap();
        let boxes: Vec<BoundingBox> = (0..40).map(|_| random_box(&mut rng, rows, cols)).collect();
        let pooled = roi_pool(&fmap, &boxes).unwrap();
        for (i, b) in boxes.iter().enumerate() {
            if pooled.row(i) != roi_ref(data.data(), c, rows, cols, b).as_slice() {
                mismatches += 1;
            }
        }
    }
    out.push(Measure::exact("RoIPool vs loop over cells", mismatches));

    let mut mismatches = 0;
    for trial in 0..60 {
        let n = 1 + trial * 3;
        let boxes: Vec<BoundingBox> = (0..n).map(|_| random_box(&mut rng, 6, 6)).collect();
        // coarse scores force ties
        let scores: Vec<f32> = (0..n).map(|_| rng.gen_range(0..8) as f32 / 8.0).collect();
        for (thr, keep) in [(0.7, 100), (0.3, 5), (0.5, 1)] {
            if nms(&boxes, &scores, thr, keep) != nms_ref(&boxes, &scores, thr, keep) {
                mismatches += 1;
            }
        }
    }
    out.push(Measure::exact("NMS vs brute force", mismatches));

    let mut worst = 0.0f64;
    for (b, v) in [(1, 2), (5, 9), (16, 40)] {
        let logits = rand_tensor(&mut rng, &[b, v]).data().iter().map(|x| x * 6.0).collect::<Vec<_>>();
        let labels: Vec<i64> = (0..b).map(|i| if i % 4 == 3 { IGNORE } else { rng.gen_range(0..v as i64) }).collect();
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::new(vec![b, v], logits.clone()).unwrap());
        let loss = tape.cross_entropy(l, &labels, IGNORE).unwrap();
        let terms: Vec<f64> = labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y != IGNORE)
            .map(|(r, &y)| nll(&logits[r * v..(r + 1) * v], y as usize))
            .collect();
        let expect = terms.iter().sum::<f64>() / terms.len() as f64;
        worst = worst.max(rel(tape.value(loss).item(), expect));
    }
    out.push(Measure::below("cross-entropy vs direct", worst, ORACLE_TOL));

    out.push(task_loss_oracle());
    out
}

fn ln_ref(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + eps).sqrt() * g[i] + b[i])
        .collect()
}

fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn affine_ref(x: &[f64], w: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
    let n = w.shape()[1];
    (0..n)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, v)| v * w.data()[i * n + j]).sum::<f64>())
        .collect()
}

/// MLM, ITM and QA losses of a hand-built 2-sample batch recomputed from the
/// raw parameter tensors, one sample at a time.
pub fn task_loss_oracle() -> Measure {
    let model = tiny_model(60);
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let tokens = [token_seq(&[CLS, MASK, SEP]), token_seq(&[CLS, 8, SEP])];
    let visuals = [visual(&mut rng, 2, 3), visual(&mut rng, 1, 3)];
    let labels = TaskLabels {
        mlm: vec![IGNORE, 6, IGNORE, IGNORE, 7, IGNORE],
        itm: vec![1, 0],
        qa: vec![IGNORE, 4],
    };
    let mut tape = Tape::new();
    let params = model.store.bind(&mut tape);
    let batch: Vec<ModelInput<f64>> = tokens
        .iter()
        .zip(&visuals)
        .map(|(tokens, visual)| ModelInput { tokens, visual })
        .collect();
    let enc = model.forward::<ChaCha8Rng>(&mut tape, &params, &batch, None).unwrap();
    let out = task_losses(&mut tape, &params, &model.heads, &enc, &labels, model.token_table(), 1e-12).unwrap();
    let states = tape.value(enc.states).clone();
    let p = |name: &str| {
        let id = model.store.ids().find(|&id| model.store.name(id) == name).unwrap();
        model.store.get(id).clone()
    };
    let table = p("text.token");
    let (d, v) = (table.shape()[1], table.shape()[0]);
    let mlm_logits = |row: &[f64]| -> Vec<f64> {
        let h = affine_ref(row, &p("heads.mlm.dense.weight"), p("heads.mlm.dense.bias").data());
        let h: Vec<f64> = h.into_iter().map(gelu_ref).collect();
        let h = ln_ref(&h, p("heads.mlm.norm.gamma").data(), p("heads.mlm.norm.beta").data(), 1e-12);
        let bias = p("heads.mlm.bias");
        (0..v)
            .map(|t| bias.data()[t] + (0..d).map(|i| h[i] * table.data()[t * d + i]).sum::<f64>())
            .collect()
    };
    let mlm = (nll(&mlm_logits(states.row(enc.row(0, 1))), 6) + nll(&mlm_logits(states.row(enc.row(1, 1))), 7)) / 2.0;
    let itm_logits = |row: &[f64]| affine_ref(row, &p("heads.itm.weight"), p("heads.itm.bias").data());
    let itm = (nll(&itm_logits(states.row(enc.row(0, 0))), 1) + nll(&itm_logits(states.row(enc.row(1, 0))), 0)) / 2.0;
    let qa_hidden = affine_ref(states.row(enc.row(1, 0)), &p("heads.qa.hidden.weight"), p("heads.qa.hidden.bias").data());
    let qa_hidden: Vec<f64> = qa_hidden.into_iter().map(gelu_ref).collect();
    let qa = nll(&affine_ref(&qa_hidden, &p("heads.qa.out.weight"), p("heads.qa.out.bias").data()), 4);
    let worst = [
        rel(tape.value(out.mlm).item(), mlm),
        rel(tape.value(out.itm).item(), itm),
        rel(tape.value(out.qa).item(), qa),
        rel(tape.value(out.total).item(), mlm + itm + qa),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    Measure::below("task losses vs per-sample recomputation", worst, ORACLE_TOL)
}

pub const SUBSET_DRAWS: usize = 100_000;
pub const MLM_TOKENS: usize = 100_000;
pub const ITM_SAMPLES: usize = 10_000;

/// Chi-square p-value of `k`-subsets of `0..n` drawn by the grid sampler.
pub fn subset_uniformity_p(n: usize, k: usize, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = std::collections::BTreeMap::<Vec<usize>, usize>::new();
    for _ in 0..draws {
        *counts.entry(sample_grid_indices(n, k, &mut rng).unwrap()).or_default() += 1;
    }
    let categories = binomial(n, k);
    assert_eq!(counts.len(), categories, "some subsets never drawn");
    let expected = draws as f64 / categories as f64;
    let stat: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    1.0 - ChiSquared::new((categories - 1) as f64).unwrap().cdf(stat)
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

fn rate_measure(name: &str, hits: usize, trials: usize, p: f64) -> Measure {
    let sigma = (p * (1.0 - p) / trials as f64).sqrt();
    Measure::within(name, hits as f64 / trials as f64, p, sigma)
}

pub fn sampling_suite() -> Vec<Measure> {
    let mut out = Vec::new();
    let p = subset_uniformity_p(4, 2, SUBSET_DRAWS, 70);
    out.push(Measure {
        name: "grid subsets k=2 of n=4, chi-square".into(),
        value: p,
        pass: p > 0.01,
        detail: format!("p = {p:.4} > 0.01"),
    });

    let cfg = MaskingConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let words = 18;
    let seq = token_seq(&[vec![CLS], (0..words).map(|i| 5 + i % 20).collect(), vec![SEP]].concat());
    let (mut seen, mut selected) = (0, 0);
    let mut branch = [0usize; 3];
    while seen < MLM_TOKENS {
        let (_, labels, branches) = apply_mlm_masking(&seq, 30, &cfg, &mut rng);
        seen += words;
        selected += labels.iter().filter(|&&l| l != IGNORE).count();
        for b in branches.into_iter().flatten() {
            branch[match b {
                MaskBranch::Mask => 0,
                MaskBranch::Random => 1,
                MaskBranch::Keep => 2,
            }] += 1;
        }
    }
    out.push(rate_measure("MLM selection rate", selected, seen, cfg.mask_prob));
    out.push(rate_measure("MLM [MASK] branch", branch[0], selected, cfg.mask_token_prob));
    out.push(rate_measure("MLM random branch", branch[1], selected, cfg.random_token_prob));
    let keep = 1.0 - cfg.mask_token_prob - cfg.random_token_prob;
    out.push(rate_measure("MLM keep branch", branch[2], selected, keep));

    let contents: Vec<Vec<u8>> = (0..8u8).map(|i| vec![i + 1]).collect();
    let slots: Vec<ItmSlot> = contents.iter().map(|c| ItmSlot { eligible: true, content: c }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let (mut total, mut corrupted, mut self_pairs) = (0, 0, 0);
    while total < ITM_SAMPLES {
        for (i, d) in itm_corrupt(&slots, 0.5, &mut rng).unwrap().into_iter().enumerate() {
            total += 1;
            if d.label == 0 {
                corrupted += 1;
                self_pairs += usize::from(d.text_from == i);
            }
        }
    }
    out.push(rate_measure("ITM corruption rate", corrupted, total, 0.5));
    out.push(Measure::exact("ITM negatives paired with own caption", self_pairs));
    out
}
