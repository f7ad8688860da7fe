use super::{NnError, ParamSet, Scalar};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the accumulated gradients. Tensors without a
    /// gradient buffer are left untouched.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamSet<T>) -> Result<(), NnError> {
        if self.m.len() != params.len() {
            self.m = (0..params.len()).map(|i| vec![0.0; params.get(i).len()]).collect();
            self.v = self.m.clone();
        }
        for i in 0..params.len() {
            if let Some(g) = &params.get(i).grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NnError::NonFiniteGradient { op: "adam", node: i });
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            let Some(g) = t.grad.take() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let gj = g[j].as_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *p -= T::from_f64(self.lr * mh / (vh.sqrt() + self.eps));
            }
            t.grad = Some(g);
        }
        Ok(())
    }
}
