//! Deterministic synthetic accented corpus: character prototypes in
//! feature space, deformed per accent, concatenated into utterances and
//! partitioned into disjoint seen/validation/unseen accent splits.

mod accent;
mod generate;
pub mod manifest;
mod render;
pub mod vocab;

pub use accent::{spectral_norm_estimate, AccentProfile};
pub use generate::{
    accent_profiles_for, build_lexicon, generate_corpus, AccentData, CorpusConfig, CorpusSplit,
    Split, TEST_ACCENTS, TRAIN_ACCENTS, VAL_ACCENTS,
};
pub use render::{
    build_prototypes, frame_rms, max_pairwise_cosine, render_utterance, render_with_spans,
    CharSpan, Utterance, WORD_SEP_FRAMES,
};
pub use vocab::Vocab;
