use crate::model::RenParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Linear warmup to `base` over `warmup` steps, then cosine decay to 0 at `total`.
pub fn lr_at(step: usize, base: f64, warmup: usize, total: usize) -> f64 {
    if step <= warmup {
        return base * step as f64 / warmup.max(1) as f64;
    }
    if total <= warmup {
        return 0.0;
    }
    let t = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Scale `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut RenParams<f32>, max_norm: f64) -> f64 {
    let norm = grads.global_norm() as f64;
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.for_each_mut(|_, g, _| g.iter_mut().for_each(|v| *v *= s));
    }
    norm
}

/// AdamW with decoupled weight decay; LayerNorm parameters are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: RenParams<f32>,
    v: RenParams<f32>,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &RenParams<f32>, weight_decay: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            weight_decay,
        }
    }

    /// Apply step `t` (1-based) at learning rate `lr`.
    pub fn step(&mut self, params: &mut RenParams<f32>, grads: &RenParams<f32>, t: usize, lr: f64) {
        assert!(t >= 1, "optimizer steps are 1-based");
        let bc1 = 1.0 - BETA1.powi(t as i32);
        let bc2 = 1.0 - BETA2.powi(t as i32);
        let wd = self.weight_decay;
        let mut p_t = params.tensors_mut();
        let mut m_t = self.m.tensors_mut();
        let mut v_t = self.v.tensors_mut();
        let g_t = grads.tensors();
        for (((p, m), v), g) in p_t.iter_mut().zip(m_t.iter_mut()).zip(v_t.iter_mut()).zip(&g_t) {
            let decay = if p.decay { wd } else { 0.0 };
            for i in 0..p.data.len() {
                let gi = g.data[i] as f64;
                let mi = BETA1 * m.data[i] as f64 + (1.0 - BETA1) * gi;
                let vi = BETA2 * v.data[i] as f64 + (1.0 - BETA2) * gi * gi;
                m.data[i] = mi as f32;
                v.data[i] = vi as f32;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let pi = p.data[i] as f64;
                p.data[i] = (pi - lr * (mhat / (vhat.sqrt() + ADAM_EPS) + decay * pi)) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, RenConfig};

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(100, 1e-3, 100, 2000), 1e-3);
        assert_eq!(lr_at(50, 1e-3, 100, 2000), 5e-4);
        assert!(lr_at(2000, 1e-3, 100, 2000).abs() < 1e-18);
        assert!((lr_at(1050, 1e-3, 100, 2000) - 5e-4).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for t in 100..=2000 {
            let lr = lr_at(t, 1e-3, 100, 2000);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    fn small() -> (RenConfig, RenParams<f32>) {
        let cfg = RenConfig {
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            encoder_dim: 4,
            ffn_mult: 2,
        };
        let p = init_params(3, &cfg).unwrap();
        (cfg, p)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (_, mut p) = small();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.for_each_mut(|_, d, _| {
            for (i, v) in d.iter_mut().enumerate() {
                *v = if i % 2 == 0 { 0.37 } else { -2.5 };
            }
        });
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &g, 1, 1e-3);
        for ((a, b), gg) in p.tensors().iter().zip(before.tensors()).zip(g.tensors()) {
            for i in 0..a.data.len() {
                let step = (a.data[i] - b.data[i]) as f64;
                let want = -1e-3 * (gg.data[i] as f64).signum();
                assert!((step - want).abs() < 1e-6, "{} {step} vs {want}", a.name);
            }
        }
    }

    #[test]
    fn zero_gradient_only_decays() {
        let (_, mut p) = small();
        let before = p.clone();
        let g = p.zeros_like();
        let mut opt = AdamW::new(&p, 0.01);
        opt.step(&mut p, &g, 1, 0.1);
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.data.iter().zip(b.data) {
                let want = if a.decay { y * (1.0 - 0.1 * 0.01) } else { *y };
                assert!((x - want).abs() <= 1e-7 * (1.0 + y.abs()), "{}", a.name);
            }
        }
    }

    #[test]
    fn clipping_caps_norm() {
        let (_, p) = small();
        let mut g = p.zeros_like();
        g.for_each_mut(|_, d, _| d.iter_mut().for_each(|v| *v = 1.0));
        let n = (g.n_values() as f64).sqrt();
        assert!((clip_global_norm(&mut g, 5.0) - n).abs() < 1e-3);
        assert!((g.global_norm() as f64 - 5.0).abs() < 1e-4);
        let before = g.clone();
        clip_global_norm(&mut g, 10.0);
        assert_eq!(g, before);
    }
}
