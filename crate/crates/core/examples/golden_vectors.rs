//! Run a random LSTM on the integer engine, record a golden trace,
//! replay it through the float emulator, then corrupt one value.
use std::sync::Arc;

use nna_aat::activation_tables::ActivationTables;
use nna_aat::fixed_point::DynamicScaleSet;
use nna_aat::golden::{golden_run, verify, GoldenTrace};
use nna_aat::nna_engine::{IntNetwork, SequenceInput};
use nna_aat::qnn::{InputSpec, Model, ModelSpec, QuantPolicy};
use nna_aat::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> nna_aat::Result<()> {
    let spec = ModelSpec {
        input: InputSpec::Features { dim: 3 },
        layers: 2,
        hidden: 8,
        outputs: 1,
    };
    let model = Model::init(spec, 7)?;
    let policy = QuantPolicy::nna(Arc::new(ActivationTables::standard()), DynamicScaleSet::standard());

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let steps = 12;
    let data = (0..steps * 3).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let input = SequenceInput::Features(Tensor::new(steps, 3, data)?);

    let run = IntNetwork::from_model(&model, &policy)?.run(&input)?;
    let last = run.steps.last().and_then(|s| s.last()).expect("non-empty");
    println!("final h codes of the top layer: {:?}", last.h);
    println!("cell saturations: {}", run.saturations());
    if let Some(head) = &run.head {
        println!("head output: {:?}", head.decode());
    }

    let trace = golden_run(&model, &policy, &input)?;
    let bytes = trace.to_bytes();
    println!("\ntrace: {} records, {} bytes", trace.records.len(), bytes.len());
    match verify(&GoldenTrace::from_bytes(&bytes)?, &model, &policy, &input)? {
        None => println!("emulator replay: bit exact"),
        Some(d) => println!("emulator replay diverged at {d}"),
    }

    let mut bad = trace.clone();
    let r = bad.records.len() / 2;
    bad.records[r].values[0] ^= 1;
    match verify(&bad, &model, &policy, &input)? {
        None => println!("corrupted trace unexpectedly matched"),
        Some(d) => println!("corrupted trace: {d}"),
    }
    Ok(())
}
