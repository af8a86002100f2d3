use super::{DenseNet, Tensor};

/// Stochastic gradient descent with optional heavy-ball momentum:
/// `v <- m v + g`, `p <- p - lr v`. Gradients are reset after each step.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: Option<f64>,
    /// Rescales the gradient so its global L2 norm is at most this value.
    pub clip_norm: Option<f64>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: Option<f64>) -> Self {
        Sgd {
            lr,
            momentum,
            clip_norm: None,
            velocity: Vec::new(),
        }
    }

    pub fn with_clip_norm(mut self, clip_norm: Option<f64>) -> Self {
        self.clip_norm = clip_norm;
        self
    }

    pub fn step_params<'a>(&mut self, params: impl Iterator<Item = &'a mut Tensor>) {
        let mut params: Vec<&mut Tensor> = params.collect();
        if let Some(c) = self.clip_norm {
            let norm = params.iter().flat_map(|t| &t.grad).map(|g| g * g).sum::<f64>().sqrt();
            if norm > c {
                let k = c / norm;
                params.iter_mut().for_each(|t| t.grad.iter_mut().for_each(|g| *g *= k));
            }
        }
        for (i, t) in params.into_iter().enumerate() {
            if self.velocity.len() <= i {
                self.velocity.push(vec![0.0; t.len()]);
            }
            let v = &mut self.velocity[i];
            match self.momentum {
                Some(m) => {
                    for ((p, g), v) in t.values.iter_mut().zip(&t.grad).zip(v.iter_mut()) {
                        *v = m * *v + g;
                        *p -= self.lr * *v;
                    }
                }
                None => {
                    for (p, g) in t.values.iter_mut().zip(&t.grad) {
                        *p -= self.lr * g;
                    }
                }
            }
            t.zero_grad();
        }
    }

    pub fn step(&mut self, net: &mut DenseNet) {
        self.step_params(net.params_mut());
    }
}
