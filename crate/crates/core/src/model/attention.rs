use rand::Rng;

use super::{ModelConfig, ModelError, Result};
use crate::layers::{LayerNorm, Linear, PackedSeq};
use crate::tensor::{GradTape, ParamStore, Scalar, Var};

/// Multi-head attention with queries from one stream and keys/values from
/// the other, followed by a position-wise feed-forward layer.
#[derive(Clone, Debug)]
pub struct CrossModalAttention {
    pub heads: usize,
    pub head_dim: usize,
    pub residual: bool,
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

/// Result of one attention block.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// Block output, one row per query frame.
    pub out: Var,
    /// Concatenated heads after the output projection, before any residual.
    pub context: Var,
    /// Post-softmax weights per sequence, then per head, each `[Tq x Tk]`.
    pub attn: Vec<Vec<Var>>,
}

impl CrossModalAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.model_dim;
        let inner = cfg.heads * cfg.head_dim;
        Self {
            heads: cfg.heads,
            head_dim: cfg.head_dim,
            residual: cfg.residual,
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), d),
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), d),
            query: Linear::new(store, &format!("{name}.query"), d, inner, rng),
            key: Linear::new(store, &format!("{name}.key"), d, inner, rng),
            value: Linear::new(store, &format!("{name}.value"), d, inner, rng),
            out: Linear::new(store, &format!("{name}.out"), inner, d, rng),
            ffn1: Linear::new(store, &format!("{name}.ffn1"), d, cfg.ffn_hidden, rng),
            ffn2: Linear::new(store, &format!("{name}.ffn2"), cfg.ffn_hidden, d, rng),
        }
    }

    fn project<T: Scalar>(
        &self,
        tape: &mut GradTape<'_, T>,
        query: Var,
        kv: Var,
    ) -> Result<(Var, Var, Var)> {
        let qn = self.ln_q.forward(tape, query)?;
        let kvn = self.ln_kv.forward(tape, kv)?;
        let q = self.query.forward(tape, qn)?;
        let k = self.key.forward(tape, kvn)?;
        let v = self.value.forward(tape, kvn)?;
        Ok((q, k, v))
    }

    /// `softmax(Q K^T / sqrt(d)) V` for every head of one sequence pair.
    fn heads_context<T: Scalar>(
        &self,
        tape: &mut GradTape<'_, T>,
        q: Var,
        k: Var,
        v: Var,
        kv_mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        let (tq, tk) = (tape.shape(q)[0], tape.shape(k)[0]);
        let mask = match kv_mask {
            Some(m) if m.len() != tk => {
                return Err(ModelError::Input(format!(
                    "key mask has {} entries for {tk} key frames",
                    m.len()
                )))
            }
            Some(m) => Some(m.repeat(tq)),
            None => None,
        };
        let scale = T::from_f64(1.0 / (self.head_dim as f64).sqrt());
        let mut contexts = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                let at = h * self.head_dim;
                (
                    tape.narrow(q, 1, at, self.head_dim)?,
                    tape.narrow(k, 1, at, self.head_dim)?,
                    tape.narrow(v, 1, at, self.head_dim)?,
                )
            };
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let a = tape.softmax_masked(scores, 1, mask.as_deref())?;
            contexts.push(tape.matmul(a, vh)?);
            weights.push(a);
        }
        let ctx = if contexts.len() == 1 {
            contexts[0]
        } else {
            tape.concat(&contexts, 1)?
        };
        Ok((ctx, weights))
    }

    fn finish<T: Scalar>(&self, tape: &mut GradTape<'_, T>, heads: Var, query: Var) -> Result<(Var, Var)> {
        let context = self.out.forward(tape, heads)?;
        let h = if self.residual {
            tape.add(context, query)?
        } else {
            context
        };
        let f = self.ffn1.forward(tape, h)?;
        let f = tape.relu(f)?;
        let f = self.ffn2.forward(tape, f)?;
        let out = if self.residual { tape.add(h, f)? } else { f };
        Ok((out, context))
    }

    /// One query sequence `[Tq x D]` against one key/value sequence
    /// `[Tk x D]`. Keys whose mask entry is false receive zero weight.
    pub fn attend<T: Scalar>(
        &self,
        tape: &mut GradTape<'_, T>,
        query: Var,
        kv: Var,
        kv_mask: Option<&[bool]>,
    ) -> Result<AttentionOutput> {
        let (q, k, v) = self.project(tape, query, kv)?;
        let (heads, attn) = self.heads_context(tape, q, k, v, kv_mask)?;
        let (out, context) = self.finish(tape, heads, query)?;
        Ok(AttentionOutput {
            out,
            context,
            attn: vec![attn],
        })
    }

    /// Batched form over packed sequences: sequence `b` of `query` attends
    /// to sequence `b` of `kv` only.
    pub fn attend_packed<T: Scalar>(
        &self,
        tape: &mut GradTape<'_, T>,
        query: &PackedSeq,
        kv: &PackedSeq,
    ) -> Result<AttentionOutput> {
        if query.lengths.len() != kv.lengths.len() {
            return Err(ModelError::Input(format!(
                "{} query sequences against {} key sequences",
                query.lengths.len(),
                kv.lengths.len()
            )));
        }
        let (q, k, v) = self.project(tape, query.data, kv.data)?;
        let (qo, ko) = (query.offsets(), kv.offsets());
        let single = query.lengths.len() == 1;
        let mut parts = Vec::with_capacity(query.lengths.len());
        let mut attn = Vec::with_capacity(query.lengths.len());
        for b in 0..query.lengths.len() {
            let (qb, kb, vb) = if single {
                (q, k, v)
            } else {
                (
                    tape.narrow(q, 0, qo[b], query.lengths[b])?,
                    tape.narrow(k, 0, ko[b], kv.lengths[b])?,
                    tape.narrow(v, 0, ko[b], kv.lengths[b])?,
                )
            };
            let (ctx, w) = self.heads_context(tape, qb, kb, vb, None)?;
            parts.push(ctx);
            attn.push(w);
        }
        let heads = if single { parts[0] } else { tape.concat(&parts, 0)? };
        let (out, context) = self.finish(tape, heads, query.data)?;
        Ok(AttentionOutput { out, context, attn })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block() -> (ParamStore<f64>, CrossModalAttention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = CrossModalAttention::new(&mut store, "cma", &ModelConfig::tiny(), &mut rng);
        (store, b)
    }

    fn random(rows: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![rows, 8], (0..rows * 8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_key_gets_all_weight() {
        let (store, b) = block();
        let mut tape = GradTape::new(&store);
        let q = tape.input(random(5, 1));
        let kv = tape.input(random(1, 2));
        let out = b.attend(&mut tape, q, kv, None).unwrap();
        for &a in &out.attn[0] {
            assert!(tape.value(a).iter().all(|&w| w == 1.0));
        }
        let ctx = tape.value(out.context);
        for row in ctx.chunks(8).skip(1) {
            assert_eq!(row, &ctx[..8]);
        }
    }

    #[test]
    fn identical_keys_give_uniform_rows() {
        let (store, b) = block();
        let mut tape = GradTape::new(&store);
        let q = tape.input(random(3, 1));
        let row = random(1, 5).into_data();
        let kv = tape.input(Tensor::new(vec![4, 8], row.repeat(4)).unwrap());
        let out = b.attend(&mut tape, q, kv, None).unwrap();
        for &a in &out.attn[0] {
            assert!(tape.value(a).iter().all(|&w| (w - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let (store, b) = block();
        let mut tape = GradTape::new(&store);
        let q = tape.input(random(3, 1));
        let kv = tape.input(random(4, 2));
        let mask = [true, false, true, false];
        let out = b.attend(&mut tape, q, kv, Some(&mask)).unwrap();
        for &a in &out.attn[0] {
            for row in tape.value(a).chunks(4) {
                assert_eq!(row[1], 0.0);
                assert_eq!(row[3], 0.0);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let none = [false; 4];
        assert!(b.attend(&mut tape, q, kv, Some(&none)).is_err());
    }

    #[test]
    fn packed_matches_per_sequence() {
        let (store, b) = block();
        let mut tape = GradTape::new(&store);
        let (q1, q2) = (random(3, 1), random(2, 2));
        let (k1, k2) = (random(4, 3), random(1, 4));
        let cat = |a: &Tensor<f64>, b: &Tensor<f64>| {
            let mut d = a.data().to_vec();
            d.extend_from_slice(b.data());
            Tensor::new(vec![a.shape()[0] + b.shape()[0], 8], d).unwrap()
        };
        let q = tape.input(cat(&q1, &q2));
        let k = tape.input(cat(&k1, &k2));
        let packed = b
            .attend_packed(&mut tape, &PackedSeq::new(q, vec![3, 2]), &PackedSeq::new(k, vec![4, 1]))
            .unwrap();
        let joint = tape.value(packed.out).to_vec();
        let mut separate = Vec::new();
        for (qs, ks) in [(q1, k1), (q2, k2)] {
            let (qv, kv) = (tape.input(qs), tape.input(ks));
            let o = b.attend(&mut tape, qv, kv, None).unwrap();
            separate.extend_from_slice(tape.value(o.out));
        }
        for (a, b) in joint.iter().zip(&separate) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
