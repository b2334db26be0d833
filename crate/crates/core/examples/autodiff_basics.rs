//! Building a small computation on the tape and reading back gradients.

use lrformer::{Result, Tape, Tensor};

fn main() -> Result<()> {
    let mut tape = Tape::new();
    // Only tensors flagged `requires_grad` are differentiated.
    let w = Tensor::from_rows(&[&[0.5, -1.0], &[2.0, 0.25]])?.with_requires_grad(true);
    let x = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[-0.5, 0.3], &[0.0, 1.0]])?, false)?;
    let w = tape.param("w", &w)?;

    // logits = gelu(x·w), loss = cross-entropy against labels
    let h = tape.matmul(x, w)?;
    let logits = tape.gelu(h)?;
    let loss = tape.softmax_cross_entropy(logits, &[0, 1, 1])?;
    println!("loss = {:.6}", tape.value(loss).item());

    let grads = tape.backward(loss)?;
    let g = grads.named("w").expect("w is a parameter");
    println!("dloss/dw = {:?}", g.data());

    // The tape is single-use: a second backward pass is an error.
    assert!(tape.backward(loss).is_err());
    Ok(())
}
