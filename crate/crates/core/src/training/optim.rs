use crate::error::{Error, Result};
use crate::network::Parameter;
use crate::tensor::io::Archive;
use crate::tensor::Tensor;
use crate::Scalar;

/// Adam with per-parameter learning rates. Moments are allocated on first use; a parameter
/// whose gradient is `None` or whose rate is zero is left untouched, moments included.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, t: 0, moments: Vec::new() }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn update(&mut self, params: &mut [Parameter<T>], grads: &[Option<Tensor<T>>], lrs: &[f64]) -> Result<()> {
        if grads.len() != params.len() || lrs.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer got {} params, {} grads, {} rates",
                params.len(),
                grads.len(),
                lrs.len()
            )));
        }
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let eps = T::lit(self.eps);
        for ((p, g), (&lr, slot)) in params.iter_mut().zip(grads).zip(lrs.iter().zip(&mut self.moments)) {
            let Some(g) = g else { continue };
            if lr == 0.0 {
                continue;
            }
            if g.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (m, v) = slot.get_or_insert_with(|| {
                (Tensor::zeros(p.value.shape().to_vec()), Tensor::zeros(p.value.shape().to_vec()))
            });
            let lr = T::lit(lr);
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Appends the state under `prefix/...` names.
    pub fn save_into(&self, a: &mut Archive<T>, prefix: &str, params: &[Parameter<T>]) {
        a.push(format!("{prefix}/t"), Tensor::scalar(T::lit(self.t as f64)));
        for (p, slot) in params.iter().zip(&self.moments) {
            if let Some((m, v)) = slot {
                a.push(format!("{prefix}/m/{}", p.name), m.clone());
                a.push(format!("{prefix}/v/{}", p.name), v.clone());
            }
        }
    }

    /// Restores state written by [`Adam::save_into`]; hyperparameters are kept.
    pub fn load_from(&mut self, a: &Archive<T>, prefix: &str, params: &[Parameter<T>]) -> Result<()> {
        let t = a
            .get(&format!("{prefix}/t"))
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {prefix}/t")))?;
        self.t = t.item().to_f64().unwrap_or(0.0) as u64;
        self.moments = params
            .iter()
            .map(|p| {
                let m = a.get(&format!("{prefix}/m/{}", p.name));
                let v = a.get(&format!("{prefix}/v/{}", p.name));
                match (m, v) {
                    (Some(m), Some(v)) if m.shape() == p.value.shape() && v.shape() == p.value.shape() => {
                        Ok(Some((m.clone(), v.clone())))
                    }
                    (None, None) => Ok(None),
                    _ => Err(Error::Format(format!("inconsistent optimizer state for {}", p.name))),
                }
            })
            .collect::<Result<_>>()?;
        Ok(())
    }
}
