//! Writes a synthetic price universe plus a matching config.
//!
//! cargo run -p lhmm-core --example synthetic_fixture -- demo

use std::path::PathBuf;

use lhmm_core::synthetic::demo_fixture;

fn main() -> lhmm_core::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "demo".into()));
    let files = demo_fixture(&dir, 4, 3, 20_111_001)?;
    let config = "\
n_sims = 500
replicates = 10

[paths]
prices = \"prices.csv\"
sectors = \"sectors.csv\"
index = \"index.csv\"
model = \"model.json\"
output_dir = \"out\"
";
    lhmm_core::backtest::write_file(&dir.join("config.toml"), config)?;
    println!("wrote {}, {}, {} and config.toml", files.prices.display(), files.sectors.display(), files.index.display());
    Ok(())
}
