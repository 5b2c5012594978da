//! Multi-resolution aggregation of a token's cross-attention response.

use super::tokens::{PAD, PROMPT_LEN};
use super::{AttentionRecord, IMAGE};
use crate::diffcore::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Column `k` of every layer map, bilinearly resized to 16×16 and summed,
/// then min-max normalised with the min and max treated as constants.
/// A flat sum (max = min) yields all zeros. Output is `[16, 16]`.
pub fn aggregate_on_tape<F: Float>(tape: &mut Tape<F>, maps: &[(Var, usize)], k: usize) -> Result<Var> {
    aggregate_with_range(tape, maps, k, None).map(|(v, _)| v)
}

/// [`aggregate_on_tape`] normalising with the supplied `(min, max)` instead
/// of the sum's own range. Returns the range that was used.
pub fn aggregate_with_range<F: Float>(
    tape: &mut Tape<F>,
    maps: &[(Var, usize)],
    k: usize,
    range: Option<(F, F)>,
) -> Result<(Var, (F, F))> {
    if k >= PROMPT_LEN {
        return Err(Error::invalid(format!("token position {k} outside prompt")));
    }
    if maps.is_empty() {
        return Err(Error::invalid("no cross-attention layers to aggregate"));
    }
    let mut total: Option<Var> = None;
    for &(map, side) in maps {
        let positions = side * side;
        if tape.shape(map) != [positions, PROMPT_LEN] {
            return Err(Error::shape("aggregate_cross_attention", format!("{:?} for side {side}", tape.shape(map))));
        }
        let cols = tape.transpose(map)?;
        let col = tape.slice(cols, k * positions, positions)?;
        let grid = tape.reshape(col, &[1, side, side])?;
        let grid = if side == IMAGE {
            grid
        } else {
            tape.resize_bilinear(grid, IMAGE, IMAGE)?
        };
        total = Some(match total {
            Some(acc) => tape.add(acc, grid)?,
            None => grid,
        });
    }
    let total = tape.reshape(total.expect("at least one layer"), &[IMAGE, IMAGE])?;
    let (lo, hi) = range.unwrap_or_else(|| {
        let v = tape.value(total);
        (v.min(), v.max())
    });
    let width = hi - lo;
    if width <= F::zero() {
        return Ok((tape.constant(Tensor::zeros(&[IMAGE, IMAGE])), (lo, hi)));
    }
    let shifted = tape.add_scalar(total, -lo)?;
    Ok((tape.scale(shifted, F::one() / width)?, (lo, hi)))
}

/// `A_{t,k}`: the normalised 16×16 response of the token at position `k`.
pub fn aggregate_cross_attention<F: Float>(record: &AttentionRecord<F>, k: usize) -> Result<Tensor<F>> {
    if k >= PROMPT_LEN {
        return Err(Error::invalid(format!("token position {k} outside prompt")));
    }
    if record.tokens.ids[k] == PAD {
        return Err(Error::invalid(format!("token position {k} is padding")));
    }
    let mut tape = Tape::<F>::new();
    let maps: Vec<(Var, usize)> = record
        .cross
        .iter()
        .map(|m| (tape.constant(m.map.detach()), m.side))
        .collect();
    let out = aggregate_on_tape(&mut tape, &maps, k)?;
    Ok(tape.value(out).detach())
}
