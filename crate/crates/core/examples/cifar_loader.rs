//! Loads a class-balanced CIFAR-10 subset. Without an argument, writes a
//! small synthetic batch in the binary format first and loads that.
//!
//! `cargo run --example cifar_loader -- [path to cifar-10-batches-bin]`

use eos_core::data::{load_cifar10_subset, parse_cifar10_batch, CIFAR_RECORD_BYTES};
use eos_core::rng::RngState;

fn main() -> eos_core::Result<()> {
    let path = match std::env::args().nth(1) {
        Some(p) => std::path::PathBuf::from(p),
        None => {
            let dir = std::env::temp_dir().join("eos_cifar_example");
            std::fs::create_dir_all(&dir).map_err(|e| eos_core::Error::Config(e.to_string()))?;
            let mut rng = RngState::new(0);
            let mut bytes = Vec::with_capacity(200 * CIFAR_RECORD_BYTES);
            for k in 0..200 {
                bytes.push((k % 10) as u8);
                bytes.extend((0..CIFAR_RECORD_BYTES - 1).map(|_| rng.below(256) as u8));
            }
            let file = dir.join("data_batch_1.bin");
            std::fs::write(&file, &bytes).map_err(|e| eos_core::Error::Config(e.to_string()))?;
            println!("wrote synthetic batch {}", file.display());
            dir
        }
    };
    if path.is_file() {
        let bytes = std::fs::read(&path).map_err(|e| eos_core::Error::Config(e.to_string()))?;
        let records = parse_cifar10_batch(&bytes)?;
        println!("{} records ({} bytes / {CIFAR_RECORD_BYTES})", records.len(), bytes.len());
    }
    let data = load_cifar10_subset(&path, 10, 0)?;
    let x = data.inputs();
    let mean = x.mean();
    println!(
        "{} examples × {} features, {} classes, overall mean {mean:.2e}, meta {:?}",
        data.len(),
        data.num_features(),
        data.num_targets(),
        data.meta()
    );
    Ok(())
}
