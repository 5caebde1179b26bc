//! Train on two moons and print the test accuracy after every batch.
//!
//! cargo run --release --example train_moons -- [l2|w12] [seed] [epochs]

use nodecg::datasets::{DatasetKind, DatasetSpec};
use nodecg::mesh::CostWeights;
use nodecg::ncg::{ncg_train, DescentSpace, EvalSets, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let descent: DescentSpace = args.get(1).map_or("l2", String::as_str).parse()?;
    let seed: u64 = args.get(2).map_or(Ok(0), |s| s.parse())?;
    let epochs: usize = args.get(3).map_or(Ok(5), |s| s.parse())?;

    let train = DatasetSpec::train(DatasetKind::Moons, seed).generate()?;
    let clean = DatasetSpec::clean_test(DatasetKind::Moons, seed + 1000).generate()?;
    let noisy = DatasetSpec::noisy_test(DatasetKind::Moons, seed + 2000).generate()?;
    let mut config = TrainConfig::new(descent, CostWeights::moons(), seed);
    config.epochs = epochs;
    let sets = EvalSets { clean: Some(&clean), noisy: Some(&noisy) };
    let state = ncg_train(&config, &train, &sets)?;
    for e in &state.evaluations {
        println!("{:.1}\t{:?}\t{:?}", e.epoch_count, e.clean_acc, e.noisy_acc);
    }
    let last = state.records.last().unwrap();
    println!("l2 norm {:.3}  w12 norm {:.3}", last.l2_norm, last.w12_norm);
    Ok(())
}
