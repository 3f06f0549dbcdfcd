//! Neural building blocks: dense networks, feature-wise modulation, Adam.

mod adam;
mod film;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use film::{Film, FilmCache, FilmGrad};
pub use mlp::{Dense, DenseGrad, Mlp, MlpCache};
