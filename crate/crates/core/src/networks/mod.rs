//! Denoiser, encoders, discriminators and vocoders.

pub mod content;
pub mod denoiser;
pub mod discriminator;
pub mod speaker;
pub mod vocoder;

pub use content::{ContentEncoder, ContentEncoderConfig, ContentEncoding, InputNorm};
pub use denoiser::{Denoiser, DenoiserConfig, EpsilonPredictor};
pub use discriminator::{
    DiscDomain, DiscOutput, Discriminator, DiscriminatorConfig, MultiDiscriminator, Signal,
    SubDiscKind,
};
pub use speaker::{
    envelope_basis, ConvEmbedderConfig, ConvSpeakerEmbedder, EnvelopeEmbedder, SpeakerEmbedder,
    SpeakerEmbedding,
};
pub use vocoder::{BypassVocoder, SineBankVocoder, Vocoder, VocoderConfig};
