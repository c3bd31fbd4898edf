//! Seeded glue shared by the command line and the end-to-end tests, so both
//! derive the same data splits and random streams from one `RunConfig`.

use std::collections::BTreeSet;

use crate::config::RunConfig;
use crate::datagen::{expected_pairs, make_dataset_range, DataOptions, Dataset};
use crate::error::{Error, Result};
use crate::model::{train, CorrVae, EpochRecord, ModelSpec};
use crate::numcore::Rng;
use crate::Scalar;

/// Stream ids under the run seed.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const GENERATE: u64 = 4;
    pub const TRAVERSE: u64 = 5;
}

pub const TRAIN_FILE: &str = "train.cvd";
pub const TEST_FILE: &str = "test.cvd";

pub fn data_options(cfg: &RunConfig) -> DataOptions {
    DataOptions {
        side: cfg.data.side,
        with_shape: cfg.data.with_shape,
    }
}

/// Training samples `0..n` and held-out samples `n..n + test_n` of the seed's stream.
pub fn make_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let opts = data_options(cfg);
    let train = make_dataset_range(&opts, cfg.seed, 0, cfg.data.n)?;
    let test = make_dataset_range(&opts, cfg.seed, cfg.data.n as u64, cfg.data.test_n)?;
    Ok((train, test))
}

/// Fresh model for `data`, trained as configured.
pub fn train_new<T: Scalar>(
    cfg: &RunConfig,
    data: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(CorrVae<T>, Vec<EpochRecord>)> {
    if data.side != cfg.data.side {
        return Err(Error::InvalidArgument(format!(
            "dataset side {} differs from data.side {}",
            data.side, cfg.data.side
        )));
    }
    let spec = ModelSpec::from_config(cfg, data.names.clone(), data.ranges.clone())?;
    let mut model = CorrVae::new(spec, &mut Rng::derive(cfg.seed, streams::INIT))?;
    let history = train(
        &mut model,
        data,
        cfg,
        &mut Rng::derive(cfg.seed, streams::TRAIN),
        on_epoch,
    )?;
    Ok((model, history))
}

/// Correlated pairs of the synthetic data, as indices into `names`.
pub fn expected_pairs_for(names: &[String]) -> BTreeSet<(usize, usize)> {
    let want = ["size", "x", "y", "xy"];
    if names.len() < 4 || names[..4] != want {
        return BTreeSet::new();
    }
    expected_pairs()
}
