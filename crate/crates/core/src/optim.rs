//! Adam with bias correction, and the warmup + exponential-decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Result, XpqError};
use crate::linalg::Matrix;
use crate::tensor_io::{put_tensor_f64, put_u32, put_u64, Reader};

const MAGIC: &[u8; 4] = b"XPOS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First/second moment estimates for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Matrix]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every tensor in `params` with the matching `grads`.
    pub fn update(&mut self, params: Vec<&mut Matrix>, grads: &[&Matrix], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(XpqError::Argument(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(XpqError::Argument(format!("tensor {i} shape mismatch in optimizer")));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, p) in params.into_iter().enumerate() {
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (((p, &g), m), v) in p
                .as_mut_slice()
                .iter_mut()
                .zip(grads[i].as_slice())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, VERSION);
        put_u64(&mut out, self.step);
        put_u32(&mut out, self.m.len() as u32);
        for (m, v) in self.m.iter().zip(&self.v) {
            put_tensor_f64(&mut out, m);
            put_tensor_f64(&mut out, v);
        }
        out
    }

    /// Restore moments; `shapes` must match the tensors the state was built for.
    pub fn from_bytes(bytes: &[u8], config: AdamConfig, shapes: &[(usize, usize)]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, VERSION, "optimizer state")?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        if count != shapes.len() {
            return Err(XpqError::Format(format!(
                "optimizer state holds {count} tensors, expected {}",
                shapes.len()
            )));
        }
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for &(rows, cols) in shapes {
            m.push(r.tensor_f64(rows, cols)?);
            v.push(r.tensor_f64(rows, cols)?);
        }
        r.finish()?;
        Ok(Self { config, step, m, v })
    }
}

/// Linear warmup to `lr` over `warmup` steps, then `lr · gamma^(step − warmup)`.
/// Steps count from 1.
pub fn scheduled_lr(step: u64, lr: f64, warmup: u64, gamma: f64) -> f64 {
    if warmup > 0 && step <= warmup {
        lr * step as f64 / warmup as f64
    } else {
        lr * gamma.powf((step - warmup) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar Adam written out longhand.
    fn reference_adam(grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64, x0: f64) -> f64 {
        let (mut x, mut m, mut v) = (x0, 0.0f64, 0.0f64);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        x
    }

    #[test]
    fn matches_scalar_reference() {
        // minimize (x - 3)^2 from x = 0
        let cfg = AdamConfig::default();
        let mut x = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let mut adam = Adam::new(cfg, &[&x]);
        let mut grads = Vec::new();
        for _ in 0..200 {
            let g = 2.0 * (x.get(0, 0) - 3.0);
            grads.push(g);
            let gm = Matrix::from_vec(1, 1, vec![g]).unwrap();
            adam.update(vec![&mut x], &[&gm], 0.05).unwrap();
        }
        let expected = reference_adam(&grads, 0.05, cfg.beta1, cfg.beta2, cfg.eps, 0.0);
        assert!((x.get(0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(scheduled_lr(4000, 0.001, 4000, 0.999), 0.001);
        assert_eq!(scheduled_lr(1, 0.001, 4000, 0.999), 0.001 / 4000.0);
        assert_eq!(scheduled_lr(5000, 0.001, 4000, 1.0), 0.001);
        assert!((scheduled_lr(4001, 0.001, 4000, 0.999) - 0.000999).abs() < 1e-15);
    }

    #[test]
    fn schedule_is_continuous_then_non_increasing() {
        let (lr, w, g) = (0.001, 200, 0.999);
        let at_w = scheduled_lr(w, lr, w, g);
        assert!((scheduled_lr(w + 1, lr, w, g) - at_w).abs() <= lr * (1.0 - g) + 1e-18);
        let mut prev = at_w;
        for s in w + 1..w + 500 {
            let cur = scheduled_lr(s, lr, w, g);
            assert!(cur <= prev);
            prev = cur;
        }
        for s in 1..w {
            assert!(scheduled_lr(s, lr, w, g) < scheduled_lr(s + 1, lr, w, g));
        }
    }

    #[test]
    fn state_round_trip() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(1, 3);
        let mut adam = Adam::new(AdamConfig::default(), &[&a, &b]);
        let (mut pa, mut pb) = (a.clone(), b.clone());
        let ga = Matrix::from_fn(2, 3, |i, j| (i + j) as f64 * 0.1);
        let gb = Matrix::from_fn(1, 3, |_, j| j as f64);
        adam.update(vec![&mut pa, &mut pb], &[&ga, &gb], 0.01).unwrap();
        let back = Adam::from_bytes(&adam.to_bytes(), adam.config, &[(2, 3), (1, 3)]).unwrap();
        assert_eq!(back, adam);
        assert!(Adam::from_bytes(&adam.to_bytes(), adam.config, &[(2, 3)]).is_err());
    }
}
