use rand::Rng;

use super::{check_dim, uniform_tensor, PackedSeq, Result};
use crate::tensor::{GradTape, ParamId, ParamStore, Scalar, Tensor, Var};

/// Weights of one LSTM direction. Gate blocks are stacked in the order
/// input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmDirection {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

impl LstmDirection {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add(format!("{name}.w_ih"), uniform_tensor(rng, &[4 * hidden, input], bound));
        let w_hh = store.add(format!("{name}.w_hh"), uniform_tensor(rng, &[4 * hidden, hidden], bound));
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::from_f64(vec![4 * hidden], &bias).expect("finite"),
        );
        Self { w_ih, w_hh, bias }
    }
}

/// Single-layer bidirectional LSTM. The output row for frame `t` is the
/// forward state after frames `0..=t` followed by the backward state after
/// frames `t..len`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub input: usize,
    pub hidden: usize,
    pub fwd: LstmDirection,
    pub bwd: LstmDirection,
}

impl BiLstm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let fwd = LstmDirection::new(store, &format!("{name}.fwd"), input, hidden, rng);
        let bwd = LstmDirection::new(store, &format!("{name}.bwd"), input, hidden, rng);
        Self {
            input,
            hidden,
            fwd,
            bwd,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn forward<T: Scalar>(&self, tape: &mut GradTape<'_, T>, x: &PackedSeq) -> Result<PackedSeq> {
        check_dim("bilstm", self.input, x.dim(tape))?;
        let mut order: Vec<usize> = (0..x.lengths.len()).collect();
        order.sort_by(|&a, &b| x.lengths[b].cmp(&x.lengths[a]));
        let offsets = x.offsets();
        let f = self.direction(tape, &self.fwd, x, &order, &offsets, false)?;
        let b = self.direction(tape, &self.bwd, x, &order, &offsets, true)?;
        Ok(x.with_data(tape.concat(&[f, b], 1)?))
    }

    /// Runs one direction over all sequences at once. Sequences are visited
    /// longest first, so the ones still active at step `t` form a prefix of
    /// `order` and the previous state only needs narrowing.
    fn direction<T: Scalar>(
        &self,
        tape: &mut GradTape<'_, T>,
        dir: &LstmDirection,
        x: &PackedSeq,
        order: &[usize],
        offsets: &[usize],
        reverse: bool,
    ) -> Result<Var> {
        let h = self.hidden;
        let lengths = &x.lengths;
        let w_ih = tape.param(dir.w_ih);
        let w_hh = tape.param(dir.w_hh);
        let bias = tape.param(dir.bias);
        let proj = tape.matmul_nt(x.data, w_ih)?;
        let bias = tape.repeat_rows(bias, tape.shape(proj)[0])?;
        let proj = tape.add(proj, bias)?;

        let steps = lengths.iter().copied().max().unwrap_or(0);
        let mut outputs = Vec::with_capacity(steps);
        let mut visited = Vec::with_capacity(x.total());
        let mut state: Option<(Var, Var)> = None;
        for t in 0..steps {
            let active = order.iter().take_while(|&&b| lengths[b] > t).count();
            let rows: Vec<usize> = order[..active]
                .iter()
                .map(|&b| offsets[b] + if reverse { lengths[b] - 1 - t } else { t })
                .collect();
            let mut z = tape.gather_rows(proj, &rows)?;
            let prev = match state {
                Some((hp, cp)) if tape.shape(hp)[0] > active => {
                    Some((tape.narrow(hp, 0, 0, active)?, tape.narrow(cp, 0, 0, active)?))
                }
                other => other,
            };
            if let Some((hp, _)) = prev {
                let rec = tape.matmul_nt(hp, w_hh)?;
                z = tape.add(z, rec)?;
            }
            let zi = tape.narrow(z, 1, 0, h)?;
            let zg = tape.narrow(z, 1, 2 * h, h)?;
            let zo = tape.narrow(z, 1, 3 * h, h)?;
            let i = tape.sigmoid(zi)?;
            let g = tape.tanh(zg)?;
            let o = tape.sigmoid(zo)?;
            let mut c = tape.mul(i, g)?;
            if let Some((_, cp)) = prev {
                let zf = tape.narrow(z, 1, h, h)?;
                let f = tape.sigmoid(zf)?;
                let keep = tape.mul(f, cp)?;
                c = tape.add(keep, c)?;
            }
            let tc = tape.tanh(c)?;
            let hn = tape.mul(o, tc)?;
            outputs.push(hn);
            visited.extend(rows);
            state = Some((hn, c));
        }
        let stacked = tape.concat(&outputs, 0)?;
        let mut back = vec![0; visited.len()];
        for (pos, &row) in visited.iter().enumerate() {
            back[row] = pos;
        }
        Ok(tape.gather_rows(stacked, &back)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    /// Plain scalar-loop LSTM for one direction of one sequence.
    fn oracle(store: &ParamStore<f64>, dir: &LstmDirection, frames: &[Vec<f64>], hidden: usize) -> Vec<Vec<f64>> {
        let w_ih = store.tensor(dir.w_ih).data();
        let w_hh = store.tensor(dir.w_hh).data();
        let bias = store.tensor(dir.bias).data();
        let d = frames[0].len();
        let mut h = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        let mut out = Vec::new();
        for x in frames {
            let mut z = bias.to_vec();
            for (r, zr) in z.iter_mut().enumerate() {
                for k in 0..d {
                    *zr += w_ih[r * d + k] * x[k];
                }
                for k in 0..hidden {
                    *zr += w_hh[r * hidden + k] * h[k];
                }
            }
            for u in 0..hidden {
                let i = sigmoid(z[u]);
                let f = sigmoid(z[hidden + u]);
                let g = z[2 * hidden + u].tanh();
                let o = sigmoid(z[3 * hidden + u]);
                c[u] = f * c[u] + i * g;
                h[u] = o * c[u].tanh();
            }
            out.push(h.clone());
        }
        out
    }

    fn setup() -> (ParamStore<f64>, BiLstm, Vec<usize>, Vec<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lstm = BiLstm::new(&mut store, "lstm", 3, 4, &mut rng);
        let lengths = vec![3, 6, 1, 6];
        let data: Vec<f64> = (0..16 * 3).map(|_| rng.random_range(-1.5..1.5)).collect();
        (store, lstm, lengths, data)
    }

    #[test]
    fn matches_scalar_loop() {
        let (store, lstm, lengths, data) = setup();
        let mut tape = GradTape::new(&store);
        let x = tape.input(Tensor::new(vec![16, 3], data.clone()).unwrap());
        let y = lstm.forward(&mut tape, &PackedSeq::new(x, lengths.clone())).unwrap();
        assert_eq!(tape.shape(y.data), &[16, 8]);
        let got = tape.value(y.data);
        let mut offset = 0;
        for &len in &lengths {
            let frames: Vec<Vec<f64>> =
                (0..len).map(|t| data[(offset + t) * 3..(offset + t + 1) * 3].to_vec()).collect();
            let fwd = oracle(&store, &lstm.fwd, &frames, 4);
            let rev: Vec<Vec<f64>> = frames.iter().rev().cloned().collect();
            let mut bwd = oracle(&store, &lstm.bwd, &rev, 4);
            bwd.reverse();
            for t in 0..len {
                let row = &got[(offset + t) * 8..(offset + t + 1) * 8];
                for u in 0..4 {
                    assert!((row[u] - fwd[t][u]).abs() < 1e-10);
                    assert!((row[4 + u] - bwd[t][u]).abs() < 1e-10);
                }
            }
            offset += len;
        }
    }

    #[test]
    fn forward_half_is_causal() {
        let (store, lstm, lengths, data) = setup();
        let run = |data: Vec<f64>| {
            let mut tape = GradTape::new(&store);
            let x = tape.input(Tensor::new(vec![16, 3], data).unwrap());
            let y = lstm.forward(&mut tape, &PackedSeq::new(x, lengths.clone())).unwrap();
            tape.value(y.data).to_vec()
        };
        let base = run(data.clone());
        let mut bumped = data;
        // frame 4 of the second sequence (rows 3..9)
        bumped[7 * 3] += 0.5;
        let moved = run(bumped);
        for t in 0..6 {
            let r = 3 + t;
            let fwd_same = (0..4).all(|u| base[r * 8 + u] == moved[r * 8 + u]);
            let bwd_same = (4..8).all(|u| base[r * 8 + u] == moved[r * 8 + u]);
            assert_eq!(fwd_same, t < 4, "forward at t={t}");
            assert_eq!(bwd_same, t > 4, "backward at t={t}");
        }
        for r in (0..3).chain(9..16) {
            assert_eq!(&base[r * 8..r * 8 + 8], &moved[r * 8..r * 8 + 8]);
        }
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let (store, lstm, _, _) = setup();
        let b = store.tensor(lstm.fwd.bias).data();
        assert!(b[..4].iter().all(|&v| v == 0.0));
        assert!(b[4..8].iter().all(|&v| v == 1.0));
        assert!(b[8..].iter().all(|&v| v == 0.0));
    }
}
