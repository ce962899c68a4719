//! End-to-end steps shared by the command line and the test suites.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{self, Dataset, WindowSampler};
use crate::diffusion::{self, DiffusionModel, TrainReport};
use crate::error::Result;

/// Scripted corpus on the standard maps.
pub fn generate_corpus(cfg: &RunConfig, seed: u64) -> Result<Dataset> {
    data::generate_dataset(
        &data::standard_maps(),
        &data::default_scripts(),
        &cfg.data,
        cfg.dynamics.horizon,
        seed,
    )
}

/// Freshly initialized denoiser normalized with the corpus statistics.
pub fn init_model(cfg: &RunConfig, ds: &Dataset, seed: u64) -> Result<DiffusionModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DiffusionModel::new(
        cfg.denoiser()?,
        cfg.schedule()?,
        ds.stats.actions,
        ds.stats.states,
        &mut rng,
    )
}

/// Train on every agent window of the corpus.
pub fn train_model(cfg: &RunConfig, ds: &Dataset, seed: u64) -> Result<(DiffusionModel, TrainReport)> {
    let mut model = init_model(cfg, ds, seed)?;
    let sampler = WindowSampler::new(ds, None, cfg.diffusion.context, cfg.dynamics.horizon)?;
    let train_cfg = diffusion::TrainConfig {
        seed,
        ..cfg.diffusion.train.clone()
    };
    let report = diffusion::train(&mut model, &sampler, &train_cfg)?;
    Ok((model, report))
}
