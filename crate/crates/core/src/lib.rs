//! KL-Mat: matrix factorization with a symmetrized KL popularity regularizer.
//!
//! The pipeline trains a cosine-normalized factorization baseline, ranks
//! items by how often they show up in users' top-K lists, fits non-negative
//! per-user weights that approximate those ranks from user-item dot
//! products, and then continues training with a penalty that pulls each
//! sample's popularity surrogate toward the uniform `1 / n`.
//!
//! Modules map onto the pipeline stages:
//!
//! * [`data`]: MovieLens ingestion and seeded train/test splits
//! * [`factor`]: the vanilla factorization model and its SGD trainer
//! * [`rank`]: popularity ranks and the non-negative Lasso fit of `alpha`
//! * [`klmat`]: the regularized per-sample loss, its gradient and trainer
//! * [`metrics`]: MAE, KL divergence and the Matthew-effect estimator
//! * [`experiment`]: β sweeps, CSV output and plot scripts

pub mod data;
pub mod error;
pub mod experiment;
pub mod factor;
pub mod klmat;
pub mod metrics;
pub mod rank;

pub use data::{load_movielens, split_dataset, DataFormat, Rating, RatingsDataset, Split};
pub use error::{Error, Result};
pub use experiment::{run_single, run_sweep, ExperimentConfig, ExperimentRow};
pub use factor::{train_vanilla, FactorModel, TrainConfig};
pub use klmat::{klmat_gradients, klmat_sample_loss, train_klmat, KlmatSampleContext};
pub use metrics::{
    degree_of_matthew, kl_divergence, symmetric_kl, PopularityDistribution, RankMode,
};
pub use rank::{fit_alpha, item_popularity_ranks, AlphaModel};
