use rand::Rng;

use crate::array::Array;
use crate::error::TensorError;
use crate::params::{ParamId, ParamStore};
use crate::tape::{NodeId, Tape};

const INIT_RANGE: f64 = 0.08;

/// Gated recurrent unit with reset gate `r`, update gate `z`, and candidate
/// state `h̃`:
///
/// ```text
/// r = σ(x·W_xr + h·W_hr + b_r)
/// z = σ(x·W_xz + h·W_hz + b_z)
/// h̃ = tanh(x·W_xh + (r ⊙ h)·W_hh + b_h)
/// h' = z ⊙ h + (1 − z) ⊙ h̃
/// ```
///
/// With all weights and biases zero this gives `h' = 0.5 · h`.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    w_xr: ParamId,
    w_hr: ParamId,
    b_r: ParamId,
    w_xz: ParamId,
    w_hz: ParamId,
    b_z: ParamId,
    w_xh: ParamId,
    w_hh: ParamId,
    b_h: ParamId,
}

impl GruCell {
    /// Register cell parameters under `prefix`, initialized uniform(−0.08, 0.08).
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = |name: &str, r: usize, c: usize, rng: &mut R| {
            store.add(
                &format!("{prefix}.{name}"),
                Array::uniform(r, c, -INIT_RANGE, INIT_RANGE, rng),
            )
        };
        let w_xr = w("w_xr", input_dim, hidden_dim, rng);
        let w_hr = w("w_hr", hidden_dim, hidden_dim, rng);
        let w_xz = w("w_xz", input_dim, hidden_dim, rng);
        let w_hz = w("w_hz", hidden_dim, hidden_dim, rng);
        let w_xh = w("w_xh", input_dim, hidden_dim, rng);
        let w_hh = w("w_hh", hidden_dim, hidden_dim, rng);
        let b_r = store.add(&format!("{prefix}.b_r"), Array::zeros(1, hidden_dim));
        let b_z = store.add(&format!("{prefix}.b_z"), Array::zeros(1, hidden_dim));
        let b_h = store.add(&format!("{prefix}.b_h"), Array::zeros(1, hidden_dim));
        GruCell {
            input_dim,
            hidden_dim,
            w_xr,
            w_hr,
            b_r,
            w_xz,
            w_hz,
            b_z,
            w_xh,
            w_hh,
            b_h,
        }
    }

    /// Snapshot the cell's parameters onto a tape.
    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> GruNodes {
        GruNodes {
            hidden_dim: self.hidden_dim,
            w_xr: tape.param(store, self.w_xr),
            w_hr: tape.param(store, self.w_hr),
            b_r: tape.param(store, self.b_r),
            w_xz: tape.param(store, self.w_xz),
            w_hz: tape.param(store, self.w_hz),
            b_z: tape.param(store, self.b_z),
            w_xh: tape.param(store, self.w_xh),
            w_hh: tape.param(store, self.w_hh),
            b_h: tape.param(store, self.b_h),
        }
    }
}

/// Tape-bound GRU parameters.
pub struct GruNodes {
    hidden_dim: usize,
    w_xr: NodeId,
    w_hr: NodeId,
    b_r: NodeId,
    w_xz: NodeId,
    w_hz: NodeId,
    b_z: NodeId,
    w_xh: NodeId,
    w_hh: NodeId,
    b_h: NodeId,
}

impl GruNodes {
    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn zero_state(&self, tape: &mut Tape) -> NodeId {
        tape.constant(Array::zeros(1, self.hidden_dim))
    }

    /// One recurrence step: `(x 1×input, h 1×hidden) → h' 1×hidden`.
    pub fn step(&self, tape: &mut Tape, x: NodeId, h: NodeId) -> Result<NodeId, TensorError> {
        let gate = |tape: &mut Tape, wx, wh, b, hin| -> Result<NodeId, TensorError> {
            let xa = tape.matmul(x, wx)?;
            let ha = tape.matmul(hin, wh)?;
            let s = tape.add(xa, ha)?;
            tape.add(s, b)
        };
        let r_pre = gate(tape, self.w_xr, self.w_hr, self.b_r, h)?;
        let r = tape.sigmoid(r_pre);
        let z_pre = gate(tape, self.w_xz, self.w_hz, self.b_z, h)?;
        let z = tape.sigmoid(z_pre);
        let rh = tape.mul(r, h)?;
        let cand_pre = {
            let xa = tape.matmul(x, self.w_xh)?;
            let ha = tape.matmul(rh, self.w_hh)?;
            let s = tape.add(xa, ha)?;
            tape.add(s, self.b_h)?
        };
        let cand = tape.tanh(cand_pre);
        // h' = z ⊙ h + (1 − z) ⊙ h̃
        let zh = tape.mul(z, h)?;
        let one_minus_z = {
            let nz = tape.neg(z);
            tape.add_scalar(nz, 1.0)
        };
        let zc = tape.mul(one_minus_z, cand)?;
        tape.add(zh, zc)
    }
}

/// Bidirectional GRU encoder: per-step outputs are the concatenation of the
/// forward and backward states, dimension 2×hidden.
#[derive(Debug, Clone)]
pub struct BiGru {
    pub fwd: GruCell,
    pub bwd: GruCell,
}

impl BiGru {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        BiGru {
            fwd: GruCell::init(store, &format!("{prefix}.fwd"), input_dim, hidden_dim, rng),
            bwd: GruCell::init(store, &format!("{prefix}.bwd"), input_dim, hidden_dim, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BiGruNodes {
        BiGruNodes {
            fwd: self.fwd.bind(tape, store),
            bwd: self.bwd.bind(tape, store),
        }
    }
}

pub struct BiGruNodes {
    fwd: GruNodes,
    bwd: GruNodes,
}

impl BiGruNodes {
    /// Encode a sequence of 1×input rows. Returns the per-step 1×2H states
    /// and the final state `[fwd last ; bwd last]` (also 1×2H).
    pub fn encode(
        &self,
        tape: &mut Tape,
        xs: &[NodeId],
    ) -> Result<(Vec<NodeId>, NodeId), TensorError> {
        if xs.is_empty() {
            return Err(TensorError::EmptySequence { op: "bigru_encode" });
        }
        let n = xs.len();
        let mut fwd_states = Vec::with_capacity(n);
        let mut h = self.fwd.zero_state(tape);
        for &x in xs {
            h = self.fwd.step(tape, x, h)?;
            fwd_states.push(h);
        }
        let fwd_final = h;

        let mut bwd_states = Vec::with_capacity(n);
        let mut hb = self.bwd.zero_state(tape);
        for &x in xs.iter().rev() {
            hb = self.bwd.step(tape, x, hb)?;
            bwd_states.push(hb);
        }
        bwd_states.reverse();
        let bwd_final = hb;

        let mut per_step = Vec::with_capacity(n);
        for i in 0..n {
            per_step.push(tape.concat_cols(&[fwd_states[i], bwd_states[i]])?);
        }
        let final_state = tape.concat_cols(&[fwd_final, bwd_final])?;
        Ok((per_step, final_state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn zero_cell(store: &mut ParamStore, input: usize, hidden: usize) -> GruCell {
        let mut rng = StdRng::seed_from_u64(0);
        let cell = GruCell::init(store, "g", input, hidden, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).fill(0.0);
        }
        cell
    }

    #[test]
    fn zero_weights_halve_previous_state() {
        // z = σ(0) = 0.5, h̃ = tanh(0) = 0 → h' = 0.5·h
        let mut ps = ParamStore::new();
        let cell = zero_cell(&mut ps, 2, 3);
        let mut t = Tape::new();
        let g = cell.bind(&mut t, &ps);
        let x = t.constant(Array::row(vec![1.0, -1.0]));
        let h = t.constant(Array::row(vec![0.4, -0.8, 1.0]));
        let h2 = g.step(&mut t, x, h).unwrap();
        let got = t.value(h2).data().to_vec();
        for (a, b) in got.iter().zip([0.2, -0.4, 0.5]) {
            assert!((a - b).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn length_one_sequence_uses_same_token_both_directions() {
        let mut ps = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(3);
        let bi = BiGru::init(&mut ps, "enc", 2, 3, &mut rng);
        let mut t = Tape::new();
        let b = bi.bind(&mut t, &ps);
        let x = t.constant(Array::row(vec![0.3, -0.6]));
        let (steps, fin) = b.encode(&mut t, &[x]).unwrap();
        assert_eq!(steps.len(), 1);
        assert_eq!(t.value(steps[0]).shape(), [1, 6]);
        assert_eq!(t.value(fin).data(), t.value(steps[0]).data());
    }

    #[test]
    fn reversing_input_reverses_and_swaps_directional_halves() {
        let mut ps = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(11);
        let bi = BiGru::init(&mut ps, "enc", 2, 3, &mut rng);
        // Identical fwd/bwd weights so the halves are directly comparable.
        for name in ["w_xr", "w_hr", "b_r", "w_xz", "w_hz", "b_z", "w_xh", "w_hh", "b_h"] {
            let f = ps.by_name(&format!("enc.fwd.{name}")).unwrap();
            let b = ps.by_name(&format!("enc.bwd.{name}")).unwrap();
            let v = ps.value(f).clone();
            *ps.value_mut(b) = v;
        }
        let xs_data = [vec![0.1, 0.2], vec![-0.5, 0.4], vec![0.9, -0.3]];
        let encode = |order: Vec<usize>, ps: &ParamStore| {
            let mut t = Tape::new();
            let b = bi.bind(&mut t, ps);
            let xs: Vec<NodeId> = order
                .iter()
                .map(|&i| t.constant(Array::row(xs_data[i].clone())))
                .collect();
            let (steps, _) = b.encode(&mut t, &xs).unwrap();
            steps
                .iter()
                .map(|&s| t.value(s).data().to_vec())
                .collect::<Vec<_>>()
        };
        let fwd_order = encode(vec![0, 1, 2], &ps);
        let rev_order = encode(vec![2, 1, 0], &ps);
        let h = 3;
        for i in 0..3 {
            let orig = &fwd_order[i];
            let rev = &rev_order[2 - i];
            // Forward half of one run equals backward half of the reversed run.
            for d in 0..h {
                assert!((orig[d] - rev[h + d]).abs() < 1e-12);
                assert!((orig[h + d] - rev[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let mut ps = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(0);
        let bi = BiGru::init(&mut ps, "enc", 2, 2, &mut rng);
        let mut t = Tape::new();
        let b = bi.bind(&mut t, &ps);
        assert!(matches!(
            b.encode(&mut t, &[]),
            Err(TensorError::EmptySequence { .. })
        ));
    }
}
