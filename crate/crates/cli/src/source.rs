use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use svae_core::data::{load_mnist, load_mnist_test, synth_toy_dataset, Dataset, SplitSizes, Splits};

/// Where images come from: an MNIST directory or the synthetic toy set.
#[derive(Args, Debug, Serialize)]
pub struct DataArgs {
    /// Directory holding the four MNIST IDX files.
    #[arg(long, env = "SVAE_DATA_DIR")]
    pub data: Option<PathBuf>,
    /// Use the synthetic block-template dataset instead of MNIST.
    #[arg(long)]
    pub toy: bool,
    #[arg(long, default_value_t = 4)]
    pub toy_classes: usize,
    /// Training images per class; the validation and test splits get a quarter as many.
    #[arg(long, default_value_t = 400)]
    pub toy_per_class: usize,
    /// Side length of the square toy images.
    #[arg(long, default_value_t = 8)]
    pub toy_size: usize,
    #[arg(long, default_value_t = 1)]
    pub toy_seed: u64,
    /// MNIST training images, taken from the start of the training file.
    #[arg(long, default_value_t = 10_000)]
    pub train_size: usize,
    /// MNIST validation images, taken right after the training images.
    #[arg(long, default_value_t = 1_000)]
    pub valid_size: usize,
}

impl DataArgs {
    fn dir(&self) -> Result<&PathBuf> {
        match &self.data {
            Some(d) => Ok(d),
            None => bail!("no dataset: pass --data DIR, set SVAE_DATA_DIR, or use --toy"),
        }
    }

    fn toy_split(&self, seed: u64, per_class: usize) -> Result<Dataset> {
        let side = self.toy_size;
        Ok(synth_toy_dataset(seed, per_class, self.toy_classes, (side, side))?)
    }

    pub fn splits(&self) -> Result<Splits> {
        if self.toy {
            let held_out = (self.toy_per_class / 4).max(1);
            return Ok(Splits {
                train: self.toy_split(self.toy_seed, self.toy_per_class)?,
                valid: self.toy_split(self.toy_seed.wrapping_add(2), held_out)?,
                test: self.toy_split(self.toy_seed.wrapping_add(1), held_out)?,
            });
        }
        let dir = self.dir()?;
        let sizes = SplitSizes {
            train: self.train_size,
            valid: self.valid_size,
        };
        load_mnist(dir, sizes).with_context(|| format!("loading MNIST from {}", dir.display()))
    }

    pub fn test(&self) -> Result<Dataset> {
        if self.toy {
            return self.toy_split(self.toy_seed.wrapping_add(1), (self.toy_per_class / 4).max(1));
        }
        let dir = self.dir()?;
        load_mnist_test(dir).with_context(|| format!("loading MNIST test images from {}", dir.display()))
    }

    pub fn available(&self) -> bool {
        self.toy || self.data.is_some()
    }
}
