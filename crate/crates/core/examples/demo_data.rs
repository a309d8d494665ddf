//! Writes the bundled demo files under `data/`.

use linkedcausal::sim::DgmSpec;
use linkedcausal::streams;

fn main() -> linkedcausal::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "data".into());
    std::fs::create_dir_all(&dir)?;
    DgmSpec::continuous(50)
        .generate(&mut streams::seeded(50))
        .save_csv(format!("{dir}/demo_continuous.csv"))?;
    DgmSpec::binary(400)
        .generate(&mut streams::seeded(400))
        .save_csv(format!("{dir}/demo_binary.csv"))?;
    let mut pilot = DgmSpec::continuous(2000);
    pilot.selection = [0.0, 0.0];
    pilot.generate(&mut streams::seeded(2000)).save_csv(format!("{dir}/pilot_demo.csv"))?;
    Ok(())
}
