use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Gate convolutions of a convolutional LSTM cell. Each kernel is
/// `[hidden, in + hidden, 3, 3]` and sees the channel concatenation `[x; h]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmWeights {
    pub input_gate: (Var, Var),
    pub forget_gate: (Var, Var),
    pub output_gate: (Var, Var),
    pub candidate: (Var, Var),
}

/// One step of the cell:
///
/// ```text
/// i = σ(W_i * [x; h] + b_i)    f = σ(W_f * [x; h] + b_f)
/// o = σ(W_o * [x; h] + b_o)    g = tanh(W_g * [x; h] + b_g)
/// c' = f ⊙ c + i ⊙ g           h' = o ⊙ tanh(c')
/// ```
pub fn conv_lstm_step(tape: &mut Tape, x: Var, h: Var, c: Var, weights: &ConvLstmWeights) -> Result<(Var, Var)> {
    let (xs, hs, cs) = (tape.shape(x), tape.shape(h), tape.shape(c));
    if xs.len() != 4 || hs.len() != 4 || hs != cs || xs[0] != hs[0] || xs[2..] != hs[2..] {
        return Err(Error::shape(format!(
            "conv-LSTM step with x {xs:?}, h {hs:?}, c {cs:?}"
        )));
    }
    let xh = tape.concat_channels(x, h)?;
    let gate = |tape: &mut Tape, (k, b): (Var, Var)| tape.conv2d(xh, k, b, 1);

    let i = gate(tape, weights.input_gate)?;
    let i = tape.sigmoid(i);
    let f = gate(tape, weights.forget_gate)?;
    let f = tape.sigmoid(f);
    let o = gate(tape, weights.output_gate)?;
    let o = tape.sigmoid(o);
    let g = gate(tape, weights.candidate)?;
    let g = tape.tanh(g);

    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next);
    let h_next = tape.mul(o, squashed)?;
    if tape.shape(h_next) != tape.shape(h) {
        return Err(Error::shape(format!(
            "gate kernels produce {:?}, hidden state is {:?}",
            tape.shape(h_next),
            tape.shape(h)
        )));
    }
    Ok((h_next, c_next))
}
