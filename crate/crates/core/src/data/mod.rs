//! Feature extraction, the synthetic corpus and dataset utilities.

pub mod corpus;
pub mod mel;
pub mod synthetic;

pub use corpus::{
    load_corpus, random_crop, read_manifest, save_corpus, split_unseen, write_manifest, Corpus,
    ManifestEntry, Normalizer, Split, UtteranceRecord,
};
pub use mel::{read_wav, wav_to_logmel, write_wav, MelConfig, MelExtractor, MelScale};
pub use synthetic::{generate_synthetic_corpus, SyntheticConfig, SyntheticRegistry, SyntheticSpeakerSpec};
