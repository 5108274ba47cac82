//! Discriminator ensemble over RGB, depth and normal maps.
//!
//! Each member is a two-scale patch discriminator with spectrally normalized
//! convolutions; the ensemble score is `D_total = Σ λ_i D_i` with the weights
//! on the probability simplex.

pub mod discriminator;
pub mod loss;
pub mod spectral;

pub use discriminator::{
    check_simplex, discriminate, DiscriminatorEnsemble, EnsembleInput, EnsembleOutput, EnsembleParts, EnsembleVars,
    Modality, Scores, SpectralState,
};
pub use loss::{gan_loss_discriminator, gan_loss_generator, GanLossKind};
pub use spectral::{power_step, spectral_normalize};
