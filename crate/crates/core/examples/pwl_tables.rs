//! Build the default tanh/sigmoid tables and print their accuracy reports.
use nna_aat::activation_tables::{build_tanh_table, ActivationTables};
use nna_aat::fixed_point::pow2;

fn main() {
    let tables = ActivationTables::standard();
    for table in [&tables.tanh, &tables.sigmoid] {
        let r = table.accuracy(8.0);
        println!(
            "{:<8} max |err| {:.5} at x = {:+.4}, mean {:.5}, codes used {}/256, monotone {}",
            r.function.name(),
            r.max_abs_error,
            r.argmax_error,
            r.mean_abs_error,
            r.codes_used,
            r.monotone
        );
    }
    println!("\nsegment count vs achieved tanh error:");
    for segments in [4, 8, 16, 32, 64] {
        match build_tanh_table(segments, pow2(-12)) {
            Ok(t) => println!("  {segments:>3}: {:.5}", t.accuracy(8.0).max_abs_error),
            Err(e) => println!("  {segments:>3}: {e}"),
        }
    }
    println!("\nx       tanh      approx    sigmoid   approx");
    for i in -8..=8 {
        let x = i as f64 * 0.75;
        println!(
            "{x:+.2}  {:+.5}  {:+.5}  {:.5}  {:.5}",
            x.tanh(),
            tables.tanh.eval(x),
            nna_aat::activation_tables::sigmoid(x),
            tables.sigmoid.eval(x)
        );
    }
}
