//! Q formats, the two rounding modes, and per-row dynamic scaling.
use nna_aat::fixed_point::{decode, encode, quantize_dynamic, quantize_static, DynamicScaleSet, QFormat, RoundingMode};

fn main() -> nna_aat::Result<()> {
    for q in [QFormat::Q1_7, QFormat::new(4, 4)?, QFormat::new(2, 14)?] {
        let (lo, hi, res) = q.range();
        println!("Q{}.{}: [{lo}, {hi}] step {res}", q.int_bits(), q.frac_bits());
    }

    let q = QFormat::Q1_7;
    println!("\n   x      nearest   toward-zero   code");
    for x in [0.13, -0.13, 0.5 / 128.0, -1.5 / 128.0, 0.999, 1.7, -3.0] {
        println!(
            "{x:+.5}  {:+.6}  {:+.6}  {:>5}",
            quantize_static(x, q, RoundingMode::NearestTiesAwayFromZero)?,
            quantize_static(x, q, RoundingMode::TowardZero)?,
            encode(x, q, RoundingMode::NearestTiesAwayFromZero)?
        );
    }
    println!("code -128 decodes to {}", decode(-128, q)?);
    if let Err(e) = decode(200, q) {
        println!("code 200: {e}");
    }

    // A row whose largest magnitude is ~5 needs S = 8 to fit in [-1, 1).
    let scales = DynamicScaleSet::standard();
    for row in [vec![0.3, -0.7, 0.05], vec![5.1, -2.2, 0.4], vec![40.0, 1.0, -0.01]] {
        let (out, s) = quantize_dynamic(&row, q, &scales)?;
        println!("{row:?} -> S = {s}, {out:?}");
    }
    Ok(())
}
