//! Scalar-loop reference implementations. Nothing here calls into the
//! engine's kernels; every result is computed with plain nested loops.
#![allow(dead_code)]

use adsd_core::tensor::{ConvSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn idx4(shape: &[usize], a: usize, b: usize, c: usize, d: usize) -> usize {
    ((a * shape[1] + b) * shape[2] + c) * shape[3] + d
}

pub fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: &ConvSpec) -> Tensor<f64> {
    let xs = x.shape();
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let oh = (h + 2 * ph - dh * (kh - 1) - 1) / sh + 1;
    let ow = (wd + 2 * pw - dw * (kw - 1) - 1) / sw + 1;
    let cout = spec.out_channels;
    let oshape = [n, cout, oh, ow];
    let mut out = vec![0.0; n * cout * oh * ow];
    for bi in 0..n {
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let y = (i * sh + ki * dh) as isize - ph as isize;
                                let xx = (j * sw + kj * dw) as isize - pw as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[idx4(xs, bi, c, y as usize, xx as usize)]
                                    * w.data()[idx4(w.shape(), o, c, ki, kj)];
                            }
                        }
                    }
                    out[idx4(&oshape, bi, o, i, j)] = acc;
                }
            }
        }
    }
    Tensor::new(oshape.to_vec(), out).unwrap()
}

/// Scatter formulation of the transposed convolution; `w` is `[in, out, kh, kw]`.
pub fn conv_transpose2d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: &ConvSpec) -> Tensor<f64> {
    let xs = x.shape();
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let oh = (h - 1) * sh + dh * (kh - 1) + 1 - 2 * ph;
    let ow = (wd - 1) * sw + dw * (kw - 1) + 1 - 2 * pw;
    let cout = spec.out_channels;
    let oshape = [n, cout, oh, ow];
    let mut out = vec![0.0; n * cout * oh * ow];
    for bi in 0..n {
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    out[idx4(&oshape, bi, o, i, j)] = b.map_or(0.0, |b| b.data()[o]);
                }
            }
        }
        for c in 0..cin {
            for i in 0..h {
                for j in 0..wd {
                    let v = x.data()[idx4(xs, bi, c, i, j)];
                    for o in 0..cout {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let y = (i * sh + ki * dh) as isize - ph as isize;
                                let xx = (j * sw + kj * dw) as isize - pw as isize;
                                if y < 0 || xx < 0 || y >= oh as isize || xx >= ow as isize {
                                    continue;
                                }
                                out[idx4(&oshape, bi, o, y as usize, xx as usize)] +=
                                    v * w.data()[idx4(w.shape(), c, o, ki, kj)];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(oshape.to_vec(), out).unwrap()
}

/// Training-mode batch normalization with biased batch variance.
pub fn batchnorm(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor<f64> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = x.clone();
    for ch in 0..c {
        let mut sum = 0.0;
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    sum += x.data()[idx4(s, b, ch, i, j)];
                }
            }
        }
        let m = (n * h * w) as f64;
        let mean = sum / m;
        let mut var = 0.0;
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let d = x.data()[idx4(s, b, ch, i, j)] - mean;
                    var += d * d;
                }
            }
        }
        var /= m;
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let k = idx4(s, b, ch, i, j);
                    out.data_mut()[k] = gamma[ch] * (x.data()[k] - mean) / (var + eps).sqrt() + beta[ch];
                }
            }
        }
    }
    out
}

pub fn global_avg_pool(x: &Tensor<f64>) -> Vec<f64> {
    let s = x.shape();
    let mut out = Vec::new();
    for b in 0..s[0] {
        for c in 0..s[1] {
            let mut acc = 0.0;
            for i in 0..s[2] {
                for j in 0..s[3] {
                    acc += x.data()[idx4(s, b, c, i, j)];
                }
            }
            out.push(acc / (s[2] * s[3]) as f64);
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Dense layer on a vector: `w` is `[out, in]` flattened.
fn matvec(w: &[f64], b: Option<&[f64]>, x: &[f64], out: usize) -> Vec<f64> {
    let inn = x.len();
    (0..out)
        .map(|o| b.map_or(0.0, |b| b[o]) + (0..inn).map(|i| w[o * inn + i] * x[i]).sum::<f64>())
        .collect()
}

/// pool → 1×1 reduce → relu → 1×1 expand → sigmoid → channel scale.
pub fn channel_attention(
    u: &Tensor<f64>,
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
    reduced: usize,
) -> Tensor<f64> {
    let s = u.shape();
    let (n, c) = (s[0], s[1]);
    let z = global_avg_pool(u);
    let mut out = u.clone();
    for b in 0..n {
        let zb = &z[b * c..(b + 1) * c];
        let hidden: Vec<f64> = matvec(w1, Some(b1), zb, reduced).into_iter().map(|v| v.max(0.0)).collect();
        let zhat = matvec(w2, Some(b2), &hidden, c);
        for ch in 0..c {
            let g = sigmoid(zhat[ch]);
            for i in 0..s[2] {
                for j in 0..s[3] {
                    out.data_mut()[idx4(s, b, ch, i, j)] *= g;
                }
            }
        }
    }
    out
}

/// 1×1 projection to one channel → sigmoid → per-location scale.
pub fn spatial_attention(u: &Tensor<f64>, w: &[f64], bias: f64) -> Tensor<f64> {
    let s = u.shape();
    let mut out = u.clone();
    for b in 0..s[0] {
        for i in 0..s[2] {
            for j in 0..s[3] {
                let q: f64 = bias + (0..s[1]).map(|c| w[c] * u.data()[idx4(s, b, c, i, j)]).sum::<f64>();
                let g = sigmoid(q);
                for c in 0..s[1] {
                    out.data_mut()[idx4(s, b, c, i, j)] *= g;
                }
            }
        }
    }
    out
}

/// Weighted per-pixel cross-entropy averaged over non-ignored pixels.
pub fn cross_entropy(logits: &Tensor<f64>, labels: &[i32], weights: &[f64], ignore: i32) -> f64 {
    let s = logits.shape();
    let mut total = 0.0;
    let mut count = 0;
    for b in 0..s[0] {
        for i in 0..s[2] {
            for j in 0..s[3] {
                let y = labels[(b * s[2] + i) * s[3] + j];
                if y == ignore {
                    continue;
                }
                let zs: Vec<f64> = (0..s[1]).map(|c| logits.data()[idx4(s, b, c, i, j)]).collect();
                let lse = zs.iter().map(|z| z.exp()).sum::<f64>().ln();
                total += weights[y as usize] * (lse - zs[y as usize]);
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Reverse Huber with threshold a fifth of the largest valid residual.
pub fn berhu(pred: &[f64], target: &[f64], valid: &[bool]) -> f64 {
    let res: Vec<f64> = (0..pred.len()).filter(|&i| valid[i]).map(|i| (pred[i] - target[i]).abs()).collect();
    let beta = res.iter().cloned().fold(0.0, f64::max) / 5.0;
    let sum: f64 = res
        .iter()
        .map(|&r| if r <= beta { r } else { (r * r + beta * beta) / (2.0 * beta) })
        .sum();
    sum / res.len() as f64
}

/// `α_c = p_m / p_c` with the lower median over present classes.
pub fn median_frequency(hist: &[u64]) -> Vec<f64> {
    let total: u64 = hist.iter().sum();
    let p: Vec<f64> = hist.iter().map(|&c| c as f64 / total as f64).collect();
    let mut present: Vec<f64> = p.iter().copied().filter(|&x| x > 0.0).collect();
    present.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pm = present[(present.len() - 1) / 2];
    p.iter().map(|&x| if x > 0.0 { pm / x } else { 0.0 }).collect()
}

/// Per-pixel counting of the segmentation scores.
pub struct PixelScores {
    pub counts: Vec<Vec<u64>>,
    pub pixacc: f64,
    pub macc: f64,
    pub miou: f64,
    pub iou: Vec<Option<f64>>,
}

pub fn pixel_scores(pred: &[i32], gt: &[i32], classes: usize, ignore: i32) -> PixelScores {
    let mut counts = vec![vec![0u64; classes]; classes];
    let mut correct = 0u64;
    let mut total = 0u64;
    for i in 0..gt.len() {
        if gt[i] == ignore {
            continue;
        }
        counts[gt[i] as usize][pred[i] as usize] += 1;
        total += 1;
        if gt[i] == pred[i] {
            correct += 1;
        }
    }
    let mut acc = Vec::new();
    let mut iou = Vec::new();
    for c in 0..classes {
        let (mut tp, mut in_gt, mut in_pred) = (0u64, 0u64, 0u64);
        for i in 0..gt.len() {
            if gt[i] == ignore {
                continue;
            }
            let (g, p) = (gt[i] as usize == c, pred[i] as usize == c);
            tp += (g && p) as u64;
            in_gt += g as u64;
            in_pred += p as u64;
        }
        if in_gt == 0 {
            iou.push(None);
            continue;
        }
        acc.push(tp as f64 / in_gt as f64);
        iou.push(Some(tp as f64 / (in_gt + in_pred - tp) as f64));
    }
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    PixelScores {
        counts,
        pixacc: correct as f64 / total as f64,
        macc: acc.iter().sum::<f64>() / acc.len() as f64,
        miou: present.iter().sum::<f64>() / present.len() as f64,
        iou,
    }
}
