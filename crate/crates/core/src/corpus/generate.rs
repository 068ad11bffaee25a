use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::corpus::accent::AccentProfile;
use crate::corpus::render::{build_prototypes, render_utterance, Utterance};
use crate::error::{Error, Result};
use crate::seed;

pub const TRAIN_ACCENTS: usize = 5;
pub const VAL_ACCENTS: usize = 3;
pub const TEST_ACCENTS: usize = 5;

/// Everything needed to generate the corpus deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub feature_dim: usize,
    pub lexicon_size: usize,
    pub word_len: (usize, usize),
    pub words_per_sentence: (usize, usize),
    pub train_sentences: usize,
    pub val_sentences: usize,
    pub test_sentences: usize,
    /// Accent strength gamma for train and validation accents.
    pub train_strength: f64,
    /// Deliberately larger gamma for test accents (unfamiliar speakers).
    pub test_strength: f64,
    /// Strength of the reserved synthetic voice used by augmentation.
    pub voice_strength: f64,
    pub bias_scale: f64,
    pub duration_range: (usize, usize),
    pub noise_sigma: f64,
    pub master_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            feature_dim: 20,
            lexicon_size: 50,
            word_len: (2, 7),
            words_per_sentence: (2, 4),
            train_sentences: 400,
            val_sentences: 100,
            test_sentences: 120,
            train_strength: 0.3,
            test_strength: 0.45,
            voice_strength: 0.35,
            bias_scale: 0.1,
            duration_range: (3, 5),
            noise_sigma: 0.05,
            master_seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 8 {
            return Err(Error::Config(format!(
                "corpus.feature_dim must be >= 8, got {}",
                self.feature_dim
            )));
        }
        if self.lexicon_size == 0 {
            return Err(Error::Config("corpus.lexicon_size must be positive".into()));
        }
        if self.word_len.0 < 1 || self.word_len.0 > self.word_len.1 {
            return Err(Error::Config(format!(
                "corpus.word_len range {:?} is invalid",
                self.word_len
            )));
        }
        if self.words_per_sentence.0 < 1 || self.words_per_sentence.0 > self.words_per_sentence.1 {
            return Err(Error::Config(format!(
                "corpus.words_per_sentence range {:?} is invalid",
                self.words_per_sentence
            )));
        }
        if self.duration_range.0 < 1 || self.duration_range.0 > self.duration_range.1 {
            return Err(Error::Config(format!(
                "corpus.duration_range {:?} is invalid",
                self.duration_range
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("corpus.noise_sigma must be >= 0".into()));
        }
        if self.train_sentences == 0 || self.val_sentences == 0 || self.test_sentences == 0 {
            return Err(Error::Config("corpus sentence counts must be positive".into()));
        }
        Ok(())
    }
}

/// Utterances of one accent.
#[derive(Debug, Clone)]
pub struct AccentData {
    pub profile: AccentProfile,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// The generated corpus: disjoint train/validation/test accents plus the
/// shared prototypes, lexicon and the reserved augmentation voice.
#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub config: CorpusConfig,
    pub lexicon: Vec<String>,
    pub prototypes: Vec<Vec<f64>>,
    pub voice: AccentProfile,
    pub train: Vec<AccentData>,
    pub validation: Vec<AccentData>,
    pub test: Vec<AccentData>,
}

impl CorpusSplit {
    pub fn accents(&self, split: Split) -> &[AccentData] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn utterances(&self, split: Split) -> Vec<&Utterance> {
        self.accents(split)
            .iter()
            .flat_map(|a| a.utterances.iter())
            .collect()
    }

    pub fn accent_ids(&self, split: Split) -> Vec<String> {
        self.accents(split)
            .iter()
            .map(|a| a.profile.id.clone())
            .collect()
    }
}

/// Seeded lexicon of distinct lowercase words.
pub fn build_lexicon(config: &CorpusConfig) -> Vec<String> {
    let mut rng = seed::rng(config.master_seed, &[seed::tag("lexicon")]);
    let mut words = Vec::with_capacity(config.lexicon_size);
    while words.len() < config.lexicon_size {
        let len = rng.gen_range(config.word_len.0..=config.word_len.1);
        let word: String = (0..len)
            .map(|_| (b'a' + rng.gen_range(0..26u8)) as char)
            .collect();
        if !words.contains(&word) {
            words.push(word);
        }
    }
    words
}

fn sentence(lexicon: &[String], config: &CorpusConfig, rng: &mut impl Rng) -> String {
    let (lo, hi) = config.words_per_sentence;
    let n = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let mut words = Vec::with_capacity(n);
    for _ in 0..n {
        words.push(lexicon.choose(rng).unwrap().as_str());
    }
    words.join(" ")
}

/// The train/validation/test accent profiles plus the reserved voice,
/// derived from the corpus config alone.
pub fn accent_profiles_for(
    config: &CorpusConfig,
) -> Result<(Vec<AccentProfile>, Vec<AccentProfile>, Vec<AccentProfile>, AccentProfile)> {
    let make = |prefix: &str, count: usize, strength: f64, base: u64| -> Result<Vec<AccentProfile>> {
        (0..count)
            .map(|i| {
                AccentProfile::generate(
                    &format!("{prefix}{i}"),
                    config.feature_dim,
                    strength,
                    config.bias_scale,
                    config.duration_range,
                    seed::derive(config.master_seed, &[seed::tag("accent"), base + i as u64]),
                )
            })
            .collect()
    };
    let train = make("tr", TRAIN_ACCENTS, config.train_strength, 0)?;
    let val = make("va", VAL_ACCENTS, config.train_strength, 100)?;
    let test = make("te", TEST_ACCENTS, config.test_strength, 200)?;
    let voice = AccentProfile::generate(
        "voice",
        config.feature_dim,
        config.voice_strength,
        config.bias_scale,
        config.duration_range,
        seed::derive(config.master_seed, &[seed::tag("accent"), 300]),
    )?;
    Ok((train, val, test, voice))
}

fn render_accent(
    profile: &AccentProfile,
    split: Split,
    count: usize,
    lexicon: &[String],
    prototypes: &[Vec<f64>],
    config: &CorpusConfig,
) -> Result<AccentData> {
    let accent_tag = seed::tag(&profile.id);
    let utterances: Result<Vec<Utterance>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut text_rng = seed::rng(
                config.master_seed,
                &[seed::tag("text"), accent_tag, i as u64],
            );
            let text = sentence(lexicon, config, &mut text_rng);
            let utt_seed = seed::derive(
                config.master_seed,
                &[seed::tag("utt"), accent_tag, i as u64],
            );
            let mut utt =
                render_utterance(&text, profile, prototypes, config.noise_sigma, utt_seed)?;
            utt.id = format!("{}-{}-{i:04}", split.name(), profile.id);
            Ok(utt)
        })
        .collect();
    Ok(AccentData {
        profile: profile.clone(),
        utterances: utterances?,
    })
}

/// Generate the full corpus. Pure function of the config (including its
/// master seed); parallel rendering does not change the output.
pub fn generate_corpus(config: &CorpusConfig) -> Result<CorpusSplit> {
    config.validate()?;
    let prototypes = build_prototypes(config.master_seed, config.feature_dim)?;
    let lexicon = build_lexicon(config);
    let (train_profiles, val_profiles, test_profiles, voice) = accent_profiles_for(config)?;

    let render_split = |profiles: &[AccentProfile], split: Split, count: usize| -> Result<Vec<AccentData>> {
        profiles
            .iter()
            .map(|p| render_accent(p, split, count, &lexicon, &prototypes, config))
            .collect()
    };

    let train = render_split(&train_profiles, Split::Train, config.train_sentences)?;
    let validation = render_split(&val_profiles, Split::Validation, config.val_sentences)?;
    let test = render_split(&test_profiles, Split::Test, config.test_sentences)?;
    Ok(CorpusSplit {
        config: config.clone(),
        lexicon,
        prototypes,
        voice,
        train,
        validation,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> CorpusConfig {
        CorpusConfig {
            lexicon_size: 10,
            train_sentences: 4,
            val_sentences: 2,
            test_sentences: 3,
            master_seed: 11,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn counts_follow_config() {
        let corpus = generate_corpus(&tiny_config()).unwrap();
        assert_eq!(corpus.train.len(), TRAIN_ACCENTS);
        assert_eq!(corpus.validation.len(), VAL_ACCENTS);
        assert_eq!(corpus.test.len(), TEST_ACCENTS);
        assert_eq!(corpus.utterances(Split::Train).len(), 5 * 4);
        assert_eq!(corpus.utterances(Split::Validation).len(), 3 * 2);
        assert_eq!(corpus.utterances(Split::Test).len(), 5 * 3);
    }

    #[test]
    fn accent_sets_are_disjoint() {
        let corpus = generate_corpus(&tiny_config()).unwrap();
        let mut ids: Vec<String> = corpus
            .accent_ids(Split::Train)
            .into_iter()
            .chain(corpus.accent_ids(Split::Validation))
            .chain(corpus.accent_ids(Split::Test))
            .collect();
        ids.push(corpus.voice.id.clone());
        let before = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), before);
    }

    #[test]
    fn lexicon_words_are_distinct_and_sized() {
        let config = tiny_config();
        let lex = build_lexicon(&config);
        assert_eq!(lex.len(), config.lexicon_size);
        let mut dedup = lex.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), lex.len());
        for w in &lex {
            assert!(w.len() >= 2 && w.len() <= 7);
        }
    }

    #[test]
    fn texts_drawn_from_lexicon() {
        let corpus = generate_corpus(&tiny_config()).unwrap();
        for utt in corpus.utterances(Split::Test) {
            for word in utt.text.split(' ') {
                assert!(corpus.lexicon.iter().any(|w| w == word), "word {word}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&tiny_config()).unwrap();
        let b = generate_corpus(&tiny_config()).unwrap();
        for (ua, ub) in a
            .utterances(Split::Train)
            .iter()
            .zip(b.utterances(Split::Train).iter())
        {
            assert_eq!(ua.id, ub.id);
            assert_eq!(ua.text, ub.text);
            assert_eq!(ua.frames, ub.frames);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let mut config = tiny_config();
        config.feature_dim = 4;
        assert!(matches!(generate_corpus(&config), Err(Error::Config(_))));
    }
}
