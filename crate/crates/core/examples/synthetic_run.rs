//! Runs the synthetic end-to-end experiment and prints the report.
//!
//! `RUST_LOG=info cargo run --release -p ramehr --example synthetic_run`

fn main() -> ramehr::Result<()> {
    env_logger::init();
    let outcome = ramehr::experiment::run(&ramehr::experiment::ExperimentConfig::default())?;
    println!("{}", outcome.report.to_json());
    eprintln!("finished in {:.1}s", outcome.seconds);
    Ok(())
}
