use crate::error::{Error, Result};

/// Polynomial decay: `base * (1 - iter/total)^power`.
pub fn lr_at(iter: usize, total: usize, base: f64, power: f64) -> Result<f64> {
    if total == 0 || iter > total {
        return Err(Error::Argument(format!(
            "iteration {iter} outside 0..={total}"
        )));
    }
    Ok(base * (1.0 - iter as f64 / total as f64).powf(power))
}

/// SGD with heavy-ball momentum: `v = m v + g; p -= lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, shapes: &[Vec<f32>]) -> Self {
        Self {
            momentum,
            velocity: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Vec<f32>], grads: &[Vec<f32>], lr: f32) {
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }
}
