//! Shared test oracles: independent reference implementations and a
//! finite-difference gradient checker. Everything here computes from raw
//! buffers with plain loops, deliberately bypassing the tensor engine's
//! code paths.

#![allow(dead_code)]

use onevos_core::tensor::Tensor;

/// Relative error with a small absolute floor.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central-finite-difference gradient checker. `build` re-evaluates the
/// loss graph from the current leaf values (it must be deterministic);
/// analytic gradients from one backward pass are compared against
/// `(f(x+h) - f(x-h)) / 2h` at every element of every leaf, or at the given
/// `(leaf, index)` samples.
///
/// A component passes on relative error below `tol` *or* absolute
/// agreement below `abs_floor`: the difference quotient itself carries
/// roundoff noise of roughly `eps * flops / (2h)`, so components whose
/// gradient sits below that floor cannot be meaningfully compared by
/// ratio. Pass `abs_floor = 0.0` for small graphs.
pub fn fd_check_graph(
    leaves: &[(&str, &Tensor)],
    build: &dyn Fn() -> Tensor,
    h: f64,
    tol: f64,
    abs_floor: f64,
    samples: Option<&[(usize, usize)]>,
) {
    for (_, t) in leaves {
        t.zero_grad();
    }
    let loss = build();
    assert!(loss.item().is_finite(), "loss must be finite");
    loss.backward().unwrap();
    let grads: Vec<Vec<f64>> = leaves
        .iter()
        .map(|(name, t)| {
            t.grad()
                .unwrap_or_else(|| panic!("no gradient reached leaf {name}"))
        })
        .collect();
    let probe = |leaf: usize, idx: usize| {
        let (name, t) = &leaves[leaf];
        t.nudge(idx, h);
        let plus = build().item();
        t.nudge(idx, -2.0 * h);
        let minus = build().item();
        t.nudge(idx, h);
        let fd = (plus - minus) / (2.0 * h);
        let an = grads[leaf][idx];
        let err = rel_err(fd, an);
        assert!(
            err < tol || (fd - an).abs() <= abs_floor,
            "gradient mismatch at {name}[{idx}]: analytic {an}, fd {fd}, rel err {err}"
        );
    };
    match samples {
        Some(pairs) => {
            for &(leaf, idx) in pairs {
                probe(leaf, idx);
            }
        }
        None => {
            for (leaf, (_, t)) in leaves.iter().enumerate() {
                for idx in 0..t.numel() {
                    probe(leaf, idx);
                }
            }
        }
    }
    for (_, t) in leaves {
        t.zero_grad();
    }
}

// ── Naive convolution oracles ───────────────────────────────────────

/// Direct nested-loop convolution with stride = kernel = `p` over a
/// `[c_in, h, w]` raster. Kernel layout `[c_out][c_in][p][p]` flattened.
/// Output `[patch][c_out]` with patches in row-major grid order, matching
/// the production layout. Accumulation order matches the production dot
/// product (c_in, then ky, then kx), so results are bit-exact.
pub fn naive_patch_conv(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    bias: &[f64],
    c_out: usize,
    p: usize,
) -> Vec<f64> {
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![0.0; gh * gw * c_out];
    for gy in 0..gh {
        for gx in 0..gw {
            let patch = gy * gw + gx;
            for co in 0..c_out {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for ky in 0..p {
                        for kx in 0..p {
                            let xv = x[ci * h * w + (gy * p + ky) * w + (gx * p + kx)];
                            let kv = kernel[co * c_in * p * p + (ci * p + ky) * p + kx];
                            acc += xv * kv;
                        }
                    }
                }
                out[patch * c_out + co] = acc + bias[co];
            }
        }
    }
    out
}

/// Flatten-then-linear patch embedding oracle: per patch, flatten the pixel
/// block channel-major and apply an explicit linear map.
pub fn naive_patchify_linear(
    x: &[f64],
    h: usize,
    w: usize,
    weight: &[f64], // [c_out][3*p*p]
    bias: &[f64],
    c_out: usize,
    p: usize,
) -> Vec<f64> {
    let (gh, gw) = (h / p, w / p);
    let width = 3 * p * p;
    let mut out = vec![0.0; gh * gw * c_out];
    for gy in 0..gh {
        for gx in 0..gw {
            let mut flat = Vec::with_capacity(width);
            for ci in 0..3 {
                for ky in 0..p {
                    for kx in 0..p {
                        flat.push(x[ci * h * w + (gy * p + ky) * w + (gx * p + kx)]);
                    }
                }
            }
            let patch = gy * gw + gx;
            for co in 0..c_out {
                let row = &weight[co * width..(co + 1) * width];
                let mut acc = 0.0;
                for (xv, kv) in flat.iter().zip(row) {
                    acc += xv * kv;
                }
                out[patch * c_out + co] = acc + bias[co];
            }
        }
    }
    out
}

// ── Naive attention oracle ──────────────────────────────────────────

/// Raw activation buffers for the attention oracle.
pub struct RawActs {
    pub n_ref: usize,
    pub n_t: usize,
    pub n_mem: usize,
    pub c: usize,
    pub q_ref: Vec<f64>,
    pub k_ref: Vec<f64>,
    pub v_ref: Vec<f64>,
    pub q_t: Vec<f64>,
    pub k_t: Vec<f64>,
    pub v_t: Vec<f64>,
    pub k_mem: Vec<f64>,
    pub v_mem: Vec<f64>,
}

/// Which query-block -> key-block paths are blocked (score forced to -inf
/// before the softmax). Query blocks: 0 = reference, 1 = current. Key
/// blocks: 0 = memory, 1 = reference, 2 = current.
pub type PathMask = [[bool; 3]; 2];

pub const MASK_NONE: PathMask = [[false; 3]; 2];
/// Reference queries no longer see current-frame keys.
pub const MASK_DECOUP1: PathMask = [[false, false, true], [false; 3]];
/// Reference queries no longer see memory keys.
pub const MASK_DECOUP2: PathMask = [[true, false, false], [false; 3]];
/// Fully decoupled: reference queries see only reference keys.
pub const MASK_BOTH: PathMask = [[true, false, true], [false; 3]];

/// Joint multi-head attention over concatenated blocks with -inf path
/// masks: the reference implementation for every decoupling variant.
/// Returns (a_ref, a_t) as raw `[n, c]` buffers.
pub fn naive_masked_attention(acts: &RawActs, heads: usize, mask: PathMask) -> (Vec<f64>, Vec<f64>) {
    let c = acts.c;
    let d_k = c / heads;
    let scale = 1.0 / (d_k as f64).sqrt();
    let nq = acts.n_ref + acts.n_t;
    let nk = acts.n_mem + acts.n_ref + acts.n_t;

    // Concatenate queries [ref; t] and keys/values [mem; ref; t].
    let mut q = Vec::with_capacity(nq * c);
    q.extend_from_slice(&acts.q_ref);
    q.extend_from_slice(&acts.q_t);
    let mut k = Vec::with_capacity(nk * c);
    k.extend_from_slice(&acts.k_mem);
    k.extend_from_slice(&acts.k_ref);
    k.extend_from_slice(&acts.k_t);
    let mut v = Vec::with_capacity(nk * c);
    v.extend_from_slice(&acts.v_mem);
    v.extend_from_slice(&acts.v_ref);
    v.extend_from_slice(&acts.v_t);

    let qblock = |qi: usize| usize::from(qi >= acts.n_ref);
    let kblock = |kj: usize| {
        if kj < acts.n_mem {
            0
        } else if kj < acts.n_mem + acts.n_ref {
            1
        } else {
            2
        }
    };

    let mut out = vec![0.0; nq * c];
    for head in 0..heads {
        let off = head * d_k;
        for qi in 0..nq {
            let mut scores = vec![f64::NEG_INFINITY; nk];
            for kj in 0..nk {
                if mask[qblock(qi)][kblock(kj)] {
                    continue;
                }
                let mut dot = 0.0;
                for d in 0..d_k {
                    dot += q[qi * c + off + d] * k[kj * c + off + d];
                }
                scores[kj] = dot * scale;
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut weights = vec![0.0; nk];
            let mut denom = 0.0;
            for kj in 0..nk {
                if scores[kj].is_finite() {
                    let e = (scores[kj] - mx).exp();
                    weights[kj] = e;
                    denom += e;
                }
            }
            for kj in 0..nk {
                let wgt = weights[kj] / denom;
                if wgt == 0.0 {
                    continue;
                }
                for d in 0..d_k {
                    out[qi * c + off + d] += wgt * v[kj * c + off + d];
                }
            }
        }
    }
    let a_ref = out[..acts.n_ref * c].to_vec();
    let a_t = out[acts.n_ref * c..].to_vec();
    (a_ref, a_t)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ── Brute-force boundary oracle ─────────────────────────────────────

/// O(n^2) boundary F-measure: nearest-boundary distances computed pairwise.
pub fn brute_boundary_f(pred: &[bool], gt: &[bool], h: usize, w: usize, tol: f64) -> f64 {
    let boundary = |mask: &[bool]| -> Vec<(isize, isize)> {
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !mask[y * w + x] {
                    continue;
                }
                let inside = y > 0
                    && y + 1 < h
                    && x > 0
                    && x + 1 < w
                    && mask[(y - 1) * w + x]
                    && mask[(y + 1) * w + x]
                    && mask[y * w + x - 1]
                    && mask[y * w + x + 1];
                if !inside {
                    out.push((y as isize, x as isize));
                }
            }
        }
        out
    };
    let pb = boundary(pred);
    let gb = boundary(gt);
    if pb.is_empty() && gb.is_empty() {
        return 1.0;
    }
    if pb.is_empty() || gb.is_empty() {
        return 0.0;
    }
    let matched = |from: &[(isize, isize)], to: &[(isize, isize)]| -> usize {
        from.iter()
            .filter(|&&(y, x)| {
                to.iter().any(|&(gy, gx)| {
                    let d2 = ((y - gy) * (y - gy) + (x - gx) * (x - gx)) as f64;
                    d2 <= tol * tol
                })
            })
            .count()
    };
    let precision = matched(&pb, &gb) as f64 / pb.len() as f64;
    let recall = matched(&gb, &pb) as f64 / gb.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Brute-force Jaccard (direct set counting).
pub fn brute_jaccard(pred: &[bool], gt: &[bool]) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(&p, &g)| p && g).count();
    let union = pred.iter().zip(gt).filter(|(&p, &g)| p || g).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
