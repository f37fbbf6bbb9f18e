//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use dualnet_core::classes::{View, NUM_CLASSES};
use dualnet_core::densenet::{DenseNetConfig, SingleViewModel};
use dualnet_core::nn::{Mode, BN_EPS};
use dualnet_core::tensor::{finite_diff_check, norm_rel, NormStats, Tape, Tensor, Var};
use dualnet_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Pair counting: a positive outranks a negative for 1, ties count ½.
pub fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Direct seven-loop cross-correlation with zero padding.
pub fn brute_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let [b, c, h, wd] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [oc, _, kh, kw] = <[usize; 4]>::try_from(w.shape()).unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let xd = x.data();
    let wdata = w.data();
    let mut out = vec![0.0; b * oc * oh * ow];
    for bi in 0..b {
        for o in 0..oc {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |t| t.data()[o]);
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xo * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((bi * c + ci) * h + iy as usize) * wd + ix as usize];
                                acc += xv * wdata[((o * c + ci) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((bi * oc + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, oc, oh, ow], out).unwrap()
}

/// Triangular2 traced piece by piece: cycle `c` (from 0) rises over `step`
/// iterations and falls over the next `step`, with amplitude halved per cycle.
pub fn triangular2_piecewise(base: f64, max: f64, step: u64, iter: u64) -> f64 {
    let cycle = iter / (2 * step);
    let pos = iter % (2 * step);
    let amp = (max - base) / (1u64 << cycle.min(62)) as f64;
    let frac = if pos <= step {
        pos as f64 / step as f64
    } else {
        (2 * step - pos) as f64 / step as f64
    };
    base + amp * frac
}

/// `Σ out ⊙ R` for a fixed random `R`, so no gradient is degenerate.
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(out, rv)?;
    Ok(tape.sum(p))
}

/// Worst per-tensor normwise error, worst single-coordinate error, coordinates compared.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradErr {
    pub norm: f64,
    pub elementwise: f64,
    pub checked: usize,
}

impl GradErr {
    fn merge(&mut self, norm: f64, elementwise: f64, checked: usize) {
        self.norm = self.norm.max(norm);
        self.elementwise = self.elementwise.max(elementwise);
        self.checked += checked;
    }
}

/// Checks `f` with respect to each input in turn, the others held constant.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradErr>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut err = GradErr::default();
    for i in 0..inputs.len() {
        let r = finite_diff_check(
            |tape, v| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == i { v } else { tape.constant(t.clone()) })
                    .collect();
                f(tape, &vars)
            },
            &inputs[i],
            H,
        )?;
        err.merge(r.norm_rel_err, r.max_rel_err, r.checked);
    }
    Ok(err)
}

/// Every differentiable op used by the network, checked at one seed.
pub fn layer_checks(seed: u64) -> Vec<(&'static str, GradErr)> {
    let mut g = rng(seed);
    let mut out = Vec::new();
    let mut push = |name, r: Result<GradErr>| {
        out.push((name, r.unwrap_or_else(|e| panic!("{name}: {e}"))));
    };

    let x = randn(&mut g, &[2, 3, 6, 5], 1.0);
    let w = randn(&mut g, &[4, 3, 3, 3], 0.5);
    let b = randn(&mut g, &[4], 0.5);
    let r = randn(&mut g, &[2, 4, 6, 5], 1.0);
    push(
        "conv3x3_pad1",
        check_inputs(&[x.clone(), w, b], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            weighted_sum(t, y, &r)
        }),
    );

    let x7 = randn(&mut g, &[1, 1, 9, 9], 1.0);
    let w7 = randn(&mut g, &[2, 1, 7, 7], 0.3);
    let r7 = randn(&mut g, &[1, 2, 5, 5], 1.0);
    push(
        "conv7x7_stride2_pad3",
        check_inputs(&[x7, w7], |t, v| {
            let y = t.conv2d(v[0], v[1], None, 2, 3)?;
            weighted_sum(t, y, &r7)
        }),
    );

    let w1 = randn(&mut g, &[5, 3, 1, 1], 0.5);
    let r1 = randn(&mut g, &[2, 5, 6, 5], 1.0);
    push(
        "conv1x1",
        check_inputs(&[x.clone(), w1], |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, 0)?;
            weighted_sum(t, y, &r1)
        }),
    );

    let xb = randn(&mut g, &[3, 2, 4, 4], 2.0);
    let gamma = randn(&mut g, &[2], 1.0);
    let beta = randn(&mut g, &[2], 1.0);
    let rb = randn(&mut g, &[3, 2, 4, 4], 1.0);
    push(
        "batch_norm_train",
        check_inputs(&[xb.clone(), gamma.clone(), beta.clone()], |t, v| {
            let (y, _) = t.batch_norm2d(v[0], v[1], v[2], NormStats::Batch { eps: BN_EPS })?;
            weighted_sum(t, y, &rb)
        }),
    );
    let mean = [0.3, -0.2];
    let var = [1.5, 0.7];
    push(
        "batch_norm_eval",
        check_inputs(&[xb.clone(), gamma, beta], |t, v| {
            let (y, _) = t.batch_norm2d(
                v[0],
                v[1],
                v[2],
                NormStats::Running {
                    mean: &mean,
                    var: &var,
                    eps: BN_EPS,
                },
            )?;
            weighted_sum(t, y, &rb)
        }),
    );

    push(
        "relu",
        check_inputs(std::slice::from_ref(&xb), |t, v| {
            let y = t.relu(v[0]);
            weighted_sum(t, y, &rb)
        }),
    );

    let rp = randn(&mut g, &[3, 2, 2, 2], 1.0);
    push(
        "avg_pool2x2",
        check_inputs(std::slice::from_ref(&xb), |t, v| {
            let y = t.avg_pool2d(v[0], 2)?;
            weighted_sum(t, y, &rp)
        }),
    );

    let rg = randn(&mut g, &[3, 2], 1.0);
    push(
        "global_avg_pool",
        check_inputs(std::slice::from_ref(&xb), |t, v| {
            let y = t.global_avg_pool(v[0])?;
            weighted_sum(t, y, &rg)
        }),
    );

    let xa = randn(&mut g, &[3, 2, 4, 4], 1.0);
    let rc = randn(&mut g, &[3, 4, 4, 4], 1.0);
    push(
        "channel_concat",
        check_inputs(&[xb, xa], |t, v| {
            let y = t.concat_axis1(&[v[0], v[1]])?;
            weighted_sum(t, y, &rc)
        }),
    );

    let xl = randn(&mut g, &[4, 6], 1.0);
    let wl = randn(&mut g, &[6, NUM_CLASSES], 0.5);
    let bl = randn(&mut g, &[NUM_CLASSES], 0.5);
    let targets = Tensor::new(
        vec![4, NUM_CLASSES],
        (0..4 * NUM_CLASSES)
            .map(|_| if g.random_bool(0.3) { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap();
    push(
        "linear_sigmoid_bce",
        check_inputs(&[xl.clone(), wl, bl], |t, v| {
            let y = dualnet_core::nn::linear(t, v[0], v[1], v[2])?;
            t.sigmoid_bce(y, &targets)
        }),
    );

    let xz = randn(&mut g, &[4, NUM_CLASSES], 6.0);
    push(
        "sigmoid_bce_large_logits",
        check_inputs(&[xz], |t, v| t.sigmoid_bce(v[0], &targets)),
    );

    let a = randn(&mut g, &[3, 4], 1.0);
    let c = randn(&mut g, &[3, 4], 1.0);
    let pos = a.map(|v| v.abs() + 0.5);
    let re = randn(&mut g, &[3, 4], 1.0);
    push(
        "elementwise",
        check_inputs(&[a.clone(), c.clone(), pos], |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(s, v[1])?;
            let m = t.mul(d, v[1])?;
            let q = t.div(m, v[2])?;
            let l = t.ln(v[2])?;
            let e = t.exp(v[0])?;
            let sg = t.sigmoid(v[1]);
            let z = t.add(q, l)?;
            let z = t.add(z, e)?;
            let z = t.mul(z, sg)?;
            let z = t.add_scalar(z, 0.25);
            let z = t.mul_scalar(z, 1.5);
            weighted_sum(t, z, &re)
        }),
    );

    let bm = randn(&mut g, &[4, 5], 1.0);
    let bias = randn(&mut g, &[5], 1.0);
    let rm = randn(&mut g, &[3, 5], 1.0);
    push(
        "matmul_bias_mean",
        check_inputs(&[a, bm, bias], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.add_row_bias(y, v[2])?;
            let rv = t.constant(rm.clone());
            let y = t.mul(y, rv)?;
            let y = t.reshape(y, &[15])?;
            Ok(t.mean(y))
        }),
    );
    let _ = c;
    out
}

pub fn tiny_config() -> DenseNetConfig {
    DenseNetConfig {
        stem_channels: 4,
        growth_rate: 2,
        block_layers: vec![1, 1, 1, 1],
        ..DenseNetConfig::desk()
    }
}

/// End-to-end loss of a tiny DenseNet in train mode, checked against central
/// differences over a strided subset of input pixels and a random sample of
/// every trainable tensor. Coordinates whose probes flip a relu are skipped.
pub fn densenet_check(seed: u64, per_tensor: usize) -> GradErr {
    let mut g = rng(seed ^ 0xD5);
    let mut model = SingleViewModel::<f64>::build(&tiny_config(), View::Pa, seed).unwrap();
    // At side 64 the last block is 2×2, so with batch 3 every batch norm
    // normalizes over at least 12 values and is not saturated.
    let (batch, side) = (3, 64);
    let x = randn(&mut g, &[batch, 1, side, side], 1.0);
    let targets = Tensor::new(
        vec![batch, NUM_CLASSES],
        (0..batch * NUM_CLASSES)
            .map(|_| if g.random_bool(0.4) { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap();

    let eval = |m: &mut SingleViewModel<f64>, x: &Tensor<f64>| -> (f64, u64) {
        let mut tape = Tape::new();
        let bound = m.store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = m.forward(&mut tape, &bound, xv, Mode::Train).unwrap();
        let l = tape.sigmoid_bce(y, &targets).unwrap();
        (tape.value(l).item().unwrap(), tape.relu_signature())
    };

    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let xv = tape.param(x.clone());
    let y = model.forward(&mut tape, &bound, xv, Mode::Train).unwrap();
    let l = tape.sigmoid_bce(y, &targets).unwrap();
    let mut grads = tape.backward(l).unwrap();
    let gx = grads.get(xv).unwrap().clone();
    let gp = bound.collect(&mut grads);

    let mut err = GradErr::default();
    // Accumulates one tensor's coordinates, then folds them into `err`.
    struct Acc {
        diff2: f64,
        a2: f64,
        n2: f64,
        worst: f64,
        n: usize,
    }
    let fresh = || Acc {
        diff2: 0.0,
        a2: 0.0,
        n2: 0.0,
        worst: 0.0,
        n: 0,
    };
    let compare = |acc: &mut Acc, a: f64, plus: (f64, u64), minus: (f64, u64)| {
        if plus.1 != minus.1 {
            return;
        }
        let n = (plus.0 - minus.0) / (2.0 * H);
        acc.worst = acc
            .worst
            .max((a - n).abs() / (a.abs() + n.abs()).max(1e-12));
        acc.diff2 += (a - n) * (a - n);
        acc.a2 += a * a;
        acc.n2 += n * n;
        acc.n += 1;
    };

    let mut acc = fresh();
    for i in (0..x.numel()).step_by(29) {
        let mut p = x.clone();
        p.data_mut()[i] += H;
        let mut m = x.clone();
        m.data_mut()[i] -= H;
        let fp = eval(&mut model, &p);
        let fm = eval(&mut model, &m);
        compare(&mut acc, gx.data()[i], fp, fm);
    }
    err.merge(norm_rel(acc.diff2, acc.a2, acc.n2), acc.worst, acc.n);

    for (k, grad) in gp.iter().enumerate() {
        let Some(grad) = grad else { continue };
        let numel = grad.numel();
        let coords: Vec<usize> = if numel <= per_tensor {
            (0..numel).collect()
        } else {
            (0..per_tensor).map(|_| g.random_range(0..numel)).collect()
        };
        let mut acc = fresh();
        for i in coords {
            let orig = model.store.entries()[k].value.data()[i];
            model.store.entries_mut()[k].value.data_mut()[i] = orig + H;
            let fp = eval(&mut model, &x);
            model.store.entries_mut()[k].value.data_mut()[i] = orig - H;
            let fm = eval(&mut model, &x);
            model.store.entries_mut()[k].value.data_mut()[i] = orig;
            compare(&mut acc, grad.data()[i], fp, fm);
        }
        if acc.n > 0 {
            err.merge(norm_rel(acc.diff2, acc.a2, acc.n2), acc.worst, acc.n);
        }
    }
    err
}

pub fn fixture_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Hand-labeled report fixtures: `(name, expected classes, produced classes)`.
pub fn labeler_fixture_results() -> Vec<(String, Vec<String>, Vec<String>)> {
    use dualnet_core::classes::CLASS_NAMES;
    use dualnet_core::labeler::Labeler;
    let labeler = Labeler::bundled();
    let dir = fixture_dir();
    let expected = std::fs::read_to_string(dir.join("expected_labels.csv")).unwrap();
    expected
        .lines()
        .skip(1)
        .map(|line| {
            let mut f = line.splitn(3, ',');
            let name = f.next().unwrap().to_string();
            let mut want: Vec<String> = f.next().unwrap().split(';').map(str::to_string).collect();
            want.sort();
            let text =
                std::fs::read_to_string(dir.join("reports").join(format!("{name}.txt"))).unwrap();
            let labels = labeler.label(&text).labels;
            let mut got: Vec<String> = labels
                .positives()
                .map(|c| CLASS_NAMES[c].to_string())
                .collect();
            got.sort();
            (name, want, got)
        })
        .collect()
}

/// Prevalence CSV over the produced fixture labels.
pub fn labeler_fixture_prevalence_csv() -> String {
    use dualnet_core::labeler::{label_prevalence, write_prevalence_csv, Labeler};
    let labeler = Labeler::bundled();
    let dir = fixture_dir().join("reports");
    let mut names: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    names.sort();
    let labels: Vec<_> = names
        .iter()
        .map(|p| labeler.label(&std::fs::read_to_string(p).unwrap()).labels)
        .collect();
    let mut buf = Vec::new();
    write_prevalence_csv(&label_prevalence(&labels), &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

/// Signal-free detector: mean of the class's grid cell minus the image mean.
/// Knows only where each class lives, not what it looks like.
pub fn cell_score(img: &dualnet_core::image::ImageGray12, slot: usize, num_classes: usize) -> f64 {
    let side = img.width();
    let g = dualnet_core::synth::grid_side(num_classes);
    let (row, col) = (slot / g, slot % g);
    let (x0, x1) = (col * side / g, (col + 1) * side / g);
    let (y0, y1) = (row * side / g, (row + 1) * side / g);
    let mut cell = 0.0;
    for y in y0..y1 {
        for x in x0..x1 {
            cell += img.get(x, y) as f64;
        }
    }
    let cell = cell / ((x1 - x0) * (y1 - y0)) as f64;
    let all = img.pixels().iter().map(|&p| p as f64).sum::<f64>() / img.pixels().len() as f64;
    cell - all
}
