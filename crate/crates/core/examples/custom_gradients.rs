//! Forward quantization with a chosen backward rule, next to the exact
//! gradient of the unquantized function.
use nna_aat::activation_tables::ActivationTables;
use nna_aat::autodiff::{SteKind, Tape};
use nna_aat::fixed_point::{QFormat, RoundingMode};
use nna_aat::tensor::Tensor;

fn main() -> nna_aat::Result<()> {
    let q = QFormat::Q1_7;
    let xs: Vec<f64> = (0..9).map(|i| i as f64 / 512.0).collect();
    let n = xs.len();

    println!("x          q(x)       identity   cosine");
    let mut grads = Vec::new();
    for ste in [SteKind::Identity, SteKind::clipped_cosine()] {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(1, n, xs.clone())?);
        let y = tape.quantize(x, q, RoundingMode::TowardZero, None, ste)?;
        let loss = tape.sum(y);
        let g = tape.backward(loss)?;
        grads.push((tape.value(y).clone(), g.get(x)));
    }
    for i in 0..n {
        println!(
            "{:.6}   {:.6}   {:.3}      {:.3}",
            xs[i],
            grads[0].0.data()[i],
            grads[0].1.data()[i],
            grads[1].1.data()[i]
        );
    }

    // Table activations: forward uses the 8-bit codebook, backward the
    // derivative of the exact function.
    let tables = ActivationTables::standard();
    let pts = vec![-3.0, -1.0, 0.0, 0.5, 2.0];
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(1, pts.len(), pts.clone())?);
    let y = tape.activation(x, &tables.tanh);
    let loss = tape.sum(y);
    let g = tape.backward(loss)?;
    println!("\nx      table tanh   grad      1 - tanh^2");
    for (i, &p) in pts.iter().enumerate() {
        println!(
            "{p:+.1}   {:+.6}    {:.6}  {:.6}",
            tape.value(y).data()[i],
            g.get(x).data()[i],
            1.0 - p.tanh().powi(2)
        );
    }
    Ok(())
}
