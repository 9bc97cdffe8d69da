use crate::array::Array;
use crate::params::ParamStore;

/// Adam with bias correction. Moments are kept per parameter in store order;
/// [`Adam::step`] consumes the accumulated gradients and zeroes them.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        let m = store
            .ids()
            .map(|id| {
                let p = store.value(id);
                Array::zeros(p.rows(), p.cols())
            })
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over every parameter, then gradients are zeroed.
    pub fn step(&mut self, store: &mut ParamStore) {
        assert_eq!(
            self.m.len(),
            store.len(),
            "optimizer state does not match parameter store"
        );
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let g = store.grad(id).clone();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((mv, vv), gv) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut().iter_mut())
                .zip(g.data())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            }
            let value = store.value_mut(id);
            for ((w, mv), vv) in value.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let m_hat = mv / bc1;
                let v_hat = vv / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        store.zero_grad();
    }

    pub(crate) fn snapshot(&self) -> (u64, &[Array], &[Array]) {
        (self.step_count, &self.m, &self.v)
    }

    pub(crate) fn restore(
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step_count: u64,
        m: Vec<Array>,
        v: Vec<Array>,
    ) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step_count,
            m,
            v,
        }
    }
}
