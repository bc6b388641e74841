//! Independent reference implementations used by the integration tests.
//! Nothing here calls into the crate's numerics.

#![allow(dead_code)]

use rand::Rng;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Direct 7-deep loop cross-correlation over a `C×H×W` input with a
/// `[C_out, C_in, kh, kw]` kernel. Row-major flat buffers.
#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    input: &[f64],
    (c_in, h, w): (usize, usize, usize),
    kernel: &[f64],
    (c_out, kh, kw): (usize, usize, usize),
    bias: Option<&[f64]>,
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
) -> (Vec<f64>, (usize, usize, usize)) {
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for c in 0..c_in {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (y * sh + dy) as isize - ph as isize;
                            let ix = (x * sw + dx) as isize - pw as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let v = input[(c * h + iy as usize) * w + ix as usize];
                            let k = kernel[((o * c_in + c) * kh + dy) * kw + dx];
                            acc += v * k;
                        }
                    }
                }
                out[(o * oh + y) * ow + x] = acc;
            }
        }
    }
    (out, (c_out, oh, ow))
}

pub fn matvec(w: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| (0..cols).map(|c| w[r * cols + c] * x[c]).sum())
        .collect()
}

pub fn uniform_vec(n: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn binary_vec(n: usize, p: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect()
}

/// Dense scalar-loop spiking cell covering Cuba-LIF, SpikGRU and the
/// dense variant (mod1, mod2). Weights are row-major `[n × fan_in]`.
#[derive(Clone, Debug)]
pub struct DenseRef {
    pub n: usize,
    pub w_i: Vec<f64>,
    pub u_i: Vec<f64>,
    pub b_i: Vec<f64>,
    /// Update gate; `None` means a fixed `β`.
    pub z: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    /// Current gate replacing `α` (mod1).
    pub r: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// The update gate reads the fresh current instead of the input (mod2).
    pub z_reads_current: bool,
    pub v_th: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefState {
    pub i: Vec<f64>,
    pub v: Vec<f64>,
    pub s: Vec<f64>,
}

impl DenseRef {
    pub fn step(&self, st: &RefState, x: &[f64]) -> RefState {
        let n = self.n;
        let gate = |(w, u, b): &(Vec<f64>, Vec<f64>, Vec<f64>), from: &[f64]| -> Vec<f64> {
            let wx = matvec(w, n, from);
            let us = matvec(u, n, &st.s);
            (0..n).map(|k| sigmoid(wx[k] + us[k] + b[k])).collect()
        };
        let keep_i = match &self.r {
            Some(g) => gate(g, x),
            None => self.alpha.clone(),
        };
        let wx = matvec(&self.w_i, n, x);
        let us = matvec(&self.u_i, n, &st.s);
        let i: Vec<f64> = (0..n)
            .map(|k| keep_i[k] * st.i[k] + (wx[k] + us[k] + self.b_i[k]))
            .collect();
        let keep_v = match &self.z {
            Some(g) => gate(g, if self.z_reads_current { &i } else { x }),
            None => self.beta.clone(),
        };
        let v: Vec<f64> = (0..n)
            .map(|k| keep_v[k] * st.v[k] + (1.0 - keep_v[k]) * i[k] - self.v_th * st.s[k])
            .collect();
        let s = v.iter().map(|&v| if v >= self.v_th { 1.0 } else { 0.0 }).collect();
        RefState { i, v, s }
    }
}

/// Reference Adam step on flat parameters.
pub struct RefAdam {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: i32,
}

impl RefAdam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, p: &mut [f64], g: &[f64]) {
        self.t += 1;
        for k in 0..p.len() {
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g[k];
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g[k] * g[k];
            let mh = self.m[k] / (1.0 - self.b1.powi(self.t));
            let vh = self.v[k] / (1.0 - self.b2.powi(self.t));
            p[k] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Numerically stable softmax cross-entropy.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn configs_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}
