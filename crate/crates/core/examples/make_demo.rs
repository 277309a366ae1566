//! Regenerates the bundled demo files under `data/`.

use std::fs::File;
use std::path::PathBuf;

use msrel::model::TransitionModel;
use msrel::ratetable::{RateTable, ValueKind};
use msrel::simulate::{censoring_rate, generate_dataset, ScenarioConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data");
    let table = RateTable::demo();
    table.write(File::create(dir.join("demo_ratetable.csv"))?, ValueKind::Qx)?;

    let model = TransitionModel::illness_death();
    serde_json::to_writer_pretty(File::create(dir.join("illness_death.json"))?, &model.to_config())?;

    let mut config = ScenarioConfig::builtin("exp.small")?;
    config.n = 500;
    let rate = censoring_rate(&config, &table)?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let data = generate_dataset(&config, &table, rate, &mut rng)?;
    data.write_csv(File::create(dir.join("demo_data.csv"))?)?;
    Ok(())
}
