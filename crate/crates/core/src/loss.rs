//! Max-over-time pooling, softmax cross-entropy and the Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::autodiff::softmax_cross_entropy;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-class maximum over the rows of a `[T × classes]` trajectory.
pub fn max_over_time(trajectory: &Tensor) -> Result<Tensor> {
    let &[t, c] = trajectory.shape() else {
        return Err(Error::Config(format!(
            "readout trajectory must be T×classes, got {:?}",
            trajectory.shape()
        )));
    };
    if t == 0 {
        return Err(Error::Empty("readout trajectory"));
    }
    let mut best = trajectory.data()[..c].to_vec();
    for row in trajectory.data().chunks_exact(c).skip(1) {
        for (b, &x) in best.iter_mut().zip(row) {
            if x > *b {
                *b = x;
            }
        }
    }
    Tensor::new([c], best)
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    Ok(softmax_cross_entropy(logits.data(), label).0)
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Rescale the whole gradient to at most this L2 norm.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            config,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    /// One bias-corrected Adam step, applied in parameter order.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() {
                return Err(Error::dim("adam gradient", p.shape(), g.shape()));
            }
            if p.shape() != m.shape() {
                return Err(Error::dim("adam moments", p.shape(), m.shape()));
            }
        }
        let c = self.config;
        let scale = match c.clip_norm {
            Some(max) => {
                let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut());
            for (((p, &g), m), v) in it {
                let g = g * scale;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_over_time_examples() {
        let c = Tensor::new([3, 2], vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]).unwrap();
        assert_eq!(max_over_time(&c).unwrap().data(), &[0.5, -1.0]);
        let one = Tensor::new([3, 1], vec![1.0, 3.0, 2.0]).unwrap();
        assert_eq!(max_over_time(&one).unwrap().data(), &[3.0]);
        let two = Tensor::new([3, 2], vec![1.0, 5.0, 4.0, 2.0, 3.0, 3.0]).unwrap();
        assert_eq!(max_over_time(&two).unwrap().data(), &[4.0, 5.0]);
        assert!(matches!(
            max_over_time(&Tensor::zeros([0, 2])),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let ln3 = cross_entropy(&Tensor::vector(vec![0.7; 3]), 1).unwrap();
        assert!((ln3 - 3f64.ln()).abs() < 1e-15);
        let tiny = cross_entropy(&Tensor::vector(vec![10.0, -10.0]), 0).unwrap();
        let expected = (-20f64).exp().ln_1p();
        assert!((tiny - expected).abs() < 1e-20);
        assert!((tiny - 2.06e-9).abs() < 1e-11);
        assert!(matches!(
            cross_entropy(&Tensor::vector(vec![0.0; 2]), 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut p = Tensor::vector(vec![0.3, -1.2]);
        let before = p.clone();
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        for _ in 0..5 {
            state.update(&mut [&mut p], &[Tensor::zeros([2])]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(state.t, 5);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = Tensor::vector(vec![0.0, 0.0, 0.0]);
        let g = Tensor::vector(vec![0.25, -4.0, 1e-3]);
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        state.update(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
        for (&x, &gi) in p.data().iter().zip(g.data()) {
            let expected = -1e-3 * gi / (gi.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-15);
        }
        let before = p.clone();
        state.update(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
        for (a, b) in p.data().iter().zip(before.data()) {
            assert!(((a - b).abs() - 1e-3).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_rejects_mismatched_shapes() {
        let mut p = Tensor::vector(vec![0.0, 0.0]);
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        assert!(state.update(&mut [&mut p], &[Tensor::zeros([3])]).is_err());
    }

    #[test]
    fn clip_norm_bounds_gradient() {
        let cfg = AdamConfig {
            clip_norm: Some(1.0),
            lr: 0.0,
            ..AdamConfig::default()
        };
        let mut p = Tensor::vector(vec![0.0, 0.0]);
        let mut state = AdamState::new(cfg, [&p]);
        state.update(&mut [&mut p], &[Tensor::vector(vec![3.0, 4.0])]).unwrap();
        assert!((state.m[0].data()[0] - 0.1 * 0.6).abs() < 1e-15);
        assert!((state.m[0].data()[1] - 0.1 * 0.8).abs() < 1e-15);
    }
}
