use super::{ModelError, Result};
use crate::layers::PackedSeq;
use crate::tensor::{GradTape, Scalar, Var};

/// Added to the variance under the square root.
pub const POOL_EPS: f64 = 1e-8;

/// `[T x D] -> [1 x 2D]`: per-dimension mean followed by population
/// standard deviation over time.
pub fn stats_pool<T: Scalar>(tape: &mut GradTape<'_, T>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(ModelError::Input(format!("cannot pool a sequence of shape {shape:?}")));
    }
    let mean = tape.mean(x, 0, true)?;
    let mean_r = tape.repeat_rows(mean, shape[0])?;
    let centred = tape.sub(x, mean_r)?;
    let sq = tape.square(centred)?;
    let var = tape.mean(sq, 0, true)?;
    let var = tape.add_scalar(var, T::from_f64(POOL_EPS))?;
    let std = tape.sqrt(var)?;
    Ok(tape.concat(&[mean, std], 1)?)
}

/// Pools only the frames whose mask entry is true.
pub fn stats_pool_masked<T: Scalar>(tape: &mut GradTape<'_, T>, x: Var, mask: &[bool]) -> Result<Var> {
    let rows = tape.shape(x)[0];
    if mask.len() != rows {
        return Err(ModelError::Input(format!("mask has {} entries for {rows} frames", mask.len())));
    }
    let valid: Vec<usize> = (0..rows).filter(|&r| mask[r]).collect();
    if valid.is_empty() {
        return Err(ModelError::Input("no valid frames to pool".into()));
    }
    if valid.len() == rows {
        return stats_pool(tape, x);
    }
    let x = tape.gather_rows(x, &valid)?;
    stats_pool(tape, x)
}

/// One pooled row per packed sequence: `[B x 2D]`.
pub fn stats_pool_packed<T: Scalar>(tape: &mut GradTape<'_, T>, x: &PackedSeq) -> Result<Var> {
    let mut rows = Vec::with_capacity(x.lengths.len());
    for b in 0..x.lengths.len() {
        let s = x.sequence(tape, b)?;
        rows.push(stats_pool(tape, s)?);
    }
    if rows.len() == 1 {
        return Ok(rows[0]);
    }
    Ok(tape.concat(&rows, 0)?)
}
