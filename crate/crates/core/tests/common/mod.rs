//! Independent reference implementations used as test oracles. Nothing here
//! calls into the engine's kernels.
#![allow(dead_code)]

use isunet::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn random_unit(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(0.05..0.95))
}

fn at4(t: &Tensor<f64>, n: usize, c: usize, h: usize, w: usize) -> f64 {
    let s = t.shape();
    t.data()[((n * s[1] + c) * s[2] + h) * s[3] + w]
}

/// Direct nested-loop cross-correlation.
pub fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for s in 0..n {
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ih = (i * stride + ki) as isize - pad as isize;
                                let iw = (j * stride + kj) as isize - pad as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                    acc += at4(x, s, c, ih as usize, iw as usize) * at4(w, o, c, ki, kj);
                                }
                            }
                        }
                    }
                    out[((s * cout + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, ho, wo], out).unwrap()
}

/// Transposed convolution as an explicit scatter-add of each input pixel.
pub fn naive_conv_transpose2d(
    z: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, cin, h, wd) = (z.shape()[0], z.shape()[1], z.shape()[2], z.shape()[3]);
    let (cout, k) = (w.shape()[1], w.shape()[2]);
    let full_h = (h - 1) * stride + k;
    let full_w = (wd - 1) * stride + k;
    let ho = full_h - 2 * pad;
    let wo = full_w - 2 * pad;
    let mut out = vec![0.0; n * cout * ho * wo];
    for s in 0..n {
        for c in 0..cin {
            for i in 0..h {
                for j in 0..wd {
                    let v = at4(z, s, c, i, j);
                    for o in 0..cout {
                        for ki in 0..k {
                            for kj in 0..k {
                                let oh = (i * stride + ki) as isize - pad as isize;
                                let ow = (j * stride + kj) as isize - pad as isize;
                                if oh >= 0 && ow >= 0 && (oh as usize) < ho && (ow as usize) < wo {
                                    out[((s * cout + o) * ho + oh as usize) * wo + ow as usize] +=
                                        v * at4(w, c, o, ki, kj);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = b {
        for s in 0..n {
            for o in 0..cout {
                for p in 0..ho * wo {
                    out[(s * cout + o) * ho * wo + p] += b.data()[o];
                }
            }
        }
    }
    Tensor::new(vec![n, cout, ho, wo], out).unwrap()
}

pub fn naive_maxpool(x: &Tensor<f64>, win: usize) -> Tensor<f64> {
    let s = x.shape();
    let (ho, wo) = (s[2] / win, s[3] / win);
    let mut out = Vec::new();
    for n in 0..s[0] {
        for c in 0..s[1] {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    for di in 0..win {
                        for dj in 0..win {
                            best = best.max(at4(x, n, c, i * win + di, j * win + dj));
                        }
                    }
                    out.push(best);
                }
            }
        }
    }
    Tensor::new(vec![s[0], s[1], ho, wo], out).unwrap()
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn inner(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Central finite differences of a scalar function of several tensors.
pub fn numeric_grads(inputs: &[Tensor<f64>], f: &dyn Fn(&[Tensor<f64>]) -> f64, h: f64) -> Vec<Tensor<f64>> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut grads = Vec::new();
    for t in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[t].shape());
        for i in 0..inputs[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let up = f(&work);
            work[t].data_mut()[i] = orig - h;
            let down = f(&work);
            work[t].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, with tiny norms treated as exact zeros.
pub fn rel_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let norm = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: f64 = analytic.data().iter().zip(numeric.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Largest relative error between tape gradients and finite differences for a
/// loss built by `build` from leaves holding `inputs`.
pub fn grad_check(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> =
        vars.iter().map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v)))).collect();
    let f = |xs: &[Tensor<f64>]| {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item()
    };
    let numeric = numeric_grads(inputs, &f, 1e-5);
    analytic.iter().zip(&numeric).map(|(a, n)| rel_error(a, n)).fold(0.0, f64::max)
}

/// Mean binary cross-entropy with the engine's documented clamp.
pub fn naive_bce(p: &[f64], t: &[f64], clamp: f64) -> f64 {
    let s: f64 = p
        .iter()
        .zip(t)
        .map(|(&p, &t)| {
            let p = p.clamp(clamp, 1.0 - clamp);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    s / p.len() as f64
}

/// Soft Dice loss per sample (leading axis), averaged over the batch.
pub fn naive_dice(p: &Tensor<f64>, t: &Tensor<f64>, smooth: f64) -> f64 {
    let n = p.shape()[0];
    let per = p.len() / n;
    let mut total = 0.0;
    for s in 0..n {
        let (pp, tt) = (&p.data()[s * per..(s + 1) * per], &t.data()[s * per..(s + 1) * per]);
        let inter: f64 = pp.iter().zip(tt).map(|(a, b)| a * b).sum();
        let denom: f64 = pp.iter().sum::<f64>() + tt.iter().sum::<f64>();
        total += 1.0 - (2.0 * inter + smooth) / (denom + smooth);
    }
    total / n as f64
}

pub fn naive_mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Closed-form trainable parameter count of each variant.
pub fn expected_params(variant: &str, base: usize, input: usize, share_heads: bool) -> usize {
    let depth = 5;
    let ch: Vec<usize> = (0..depth).map(|l| (base << l).min(8 * base)).collect();
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let encoder: usize = (0..depth)
        .map(|l| {
            let cin = if l == 0 { input } else { ch[l - 1] };
            conv(cin, ch[l], 3) + conv(ch[l], ch[l], 3)
        })
        .sum();
    let decoder = |skips: bool| -> usize {
        (0..depth - 1)
            .map(|l| {
                let block_in = if skips { 2 * ch[l] } else { ch[l] };
                conv(ch[l + 1], ch[l], 3) + conv(block_in, ch[l], 3) + conv(ch[l], ch[l], 3)
            })
            .sum()
    };
    let final_head = conv(ch[0], 1, 1);
    // j = 0 reads the bottleneck, j = 1..4 the decoder blocks from deep to shallow
    let inter_heads: usize = (0..depth).map(|j| conv(ch[depth - 1 - j], 1, 1)).sum();
    let tied_biases: usize = input + ch[..depth - 1].iter().sum::<usize>();
    let unet = encoder + decoder(true) + final_head;
    let inter = unet + inter_heads;
    let sae = inter + encoder + if share_heads { 0 } else { inter_heads + final_head };
    match variant {
        "unet" => unet,
        "inter" => inter,
        "ae" => inter + encoder + decoder(false) + inter_heads + final_head,
        "sae" => sae,
        "twi" => inter + tied_biases,
        "twae" => sae + tied_biases,
        other => panic!("unknown variant {other}"),
    }
}
