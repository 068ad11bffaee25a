use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::accent::AccentProfile;
use crate::corpus::vocab::{Vocab, RENDERABLE, SPACE};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seed;

/// Frames inserted between words (pure noise, no prototype content).
pub const WORD_SEP_FRAMES: usize = 2;
const MAX_PROTOTYPE_REDRAWS: usize = 100;
const MAX_PAIRWISE_COSINE: f64 = 0.9;

/// One synthetic utterance: the unit of training and evaluation.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    /// T x D feature frames.
    pub frames: Tensor,
    pub accent_id: String,
    /// Label indices wrapped in SOS/EOS.
    pub target: Vec<usize>,
}

/// Span of frames occupied by one character (used by diagnostics).
#[derive(Debug, Clone, Copy)]
pub struct CharSpan {
    pub label: usize,
    pub start: usize,
    pub len: usize,
}

/// Unit-norm feature prototypes for the 29 renderable labels, drawn from a
/// seeded Gaussian and redrawn as a set until no two are too similar.
pub fn build_prototypes(master_seed: u64, dim: usize) -> Result<Vec<Vec<f64>>> {
    if dim < 8 {
        return Err(Error::Contract(format!(
            "prototype dimension must be >= 8, got {dim}"
        )));
    }
    for attempt in 0..MAX_PROTOTYPE_REDRAWS as u64 {
        let mut rng = seed::rng(master_seed, &[seed::tag("prototypes"), attempt]);
        let mut protos = Vec::with_capacity(RENDERABLE);
        for _ in 0..RENDERABLE {
            let mut v: Vec<f64> = (0..dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            for x in v.iter_mut() {
                *x /= norm;
            }
            protos.push(v);
        }
        if protos.len() == RENDERABLE && max_pairwise_cosine(&protos) < MAX_PAIRWISE_COSINE {
            return Ok(protos);
        }
    }
    Err(Error::Generation(format!(
        "could not draw {RENDERABLE} prototypes with pairwise cosine < {MAX_PAIRWISE_COSINE} in {MAX_PROTOTYPE_REDRAWS} attempts"
    )))
}

pub fn max_pairwise_cosine(protos: &[Vec<f64>]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for i in 0..protos.len() {
        for j in i + 1..protos.len() {
            let dot: f64 = protos[i].iter().zip(&protos[j]).map(|(a, b)| a * b).sum();
            if dot > max {
                max = dot;
            }
        }
    }
    max
}

/// Render `text` through an accent profile. Each non-space character emits
/// a uniformly drawn number of frames of `A p_c + b + eps`; spaces emit
/// [`WORD_SEP_FRAMES`] frames of pure noise. Deterministic in `utt_seed`.
pub fn render_utterance(
    text: &str,
    accent: &AccentProfile,
    prototypes: &[Vec<f64>],
    noise_sigma: f64,
    utt_seed: u64,
) -> Result<Utterance> {
    let (utt, _) = render_with_spans(text, accent, prototypes, noise_sigma, utt_seed)?;
    Ok(utt)
}

/// As [`render_utterance`] but also reports which frames each character
/// occupies.
pub fn render_with_spans(
    text: &str,
    accent: &AccentProfile,
    prototypes: &[Vec<f64>],
    noise_sigma: f64,
    utt_seed: u64,
) -> Result<(Utterance, Vec<CharSpan>)> {
    if text.is_empty() {
        return Err(Error::Contract("cannot render empty text".into()));
    }
    let target = Vocab.encode(text)?;
    let dim = accent.dim;
    let mut rng = seed::rng(utt_seed, &[seed::tag("render")]);
    let mut frames: Vec<f64> = Vec::new();
    let mut spans = Vec::new();
    let (dmin, dmax) = accent.duration_range;

    for ch in text.chars() {
        let label = Vocab.index_of(ch)?;
        let start = frames.len() / dim;
        if label == SPACE {
            for _ in 0..WORD_SEP_FRAMES {
                push_noise_frame(&mut frames, dim, noise_sigma, &mut rng);
            }
            spans.push(CharSpan {
                label,
                start,
                len: WORD_SEP_FRAMES,
            });
        } else {
            let dur = if dmin == dmax {
                dmin
            } else {
                rng.gen_range(dmin..=dmax)
            };
            let base = accent.apply(&prototypes[label]);
            for _ in 0..dur {
                let row_start = frames.len();
                frames.extend_from_slice(&base);
                if noise_sigma > 0.0 {
                    for v in frames[row_start..].iter_mut() {
                        *v += noise_sigma * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            spans.push(CharSpan {
                label,
                start,
                len: dur,
            });
        }
    }

    let t = frames.len() / dim;
    let frames = Tensor::from_vec(&[t, dim], frames)?;
    Ok((
        Utterance {
            id: format!("{}-{utt_seed:016x}", accent.id),
            text: text.to_string(),
            frames,
            accent_id: accent.id.clone(),
            target,
        },
        spans,
    ))
}

fn push_noise_frame(frames: &mut Vec<f64>, dim: usize, sigma: f64, rng: &mut ChaCha8Rng) {
    for _ in 0..dim {
        let eps = if sigma > 0.0 {
            sigma * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        frames.push(eps);
    }
}

/// Root-mean-square over all frame elements; the reference level for
/// noise augmentation.
pub fn frame_rms(utterances: &[&Utterance]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for u in utterances {
        for v in u.frames.data() {
            sum += v * v;
        }
        count += u.frames.numel();
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(dim: usize, range: (usize, usize)) -> AccentProfile {
        AccentProfile::identity("id", dim, range)
    }

    #[test]
    fn prototypes_deterministic_and_unit_norm() {
        let a = build_prototypes(7, 20).unwrap();
        let b = build_prototypes(7, 20).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), RENDERABLE);
        for p in &a {
            let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn prototypes_pairwise_cosine_below_threshold() {
        let protos = build_prototypes(7, 20).unwrap();
        assert!(max_pairwise_cosine(&protos) < 0.9);
    }

    #[test]
    fn prototypes_reject_small_dim() {
        assert!(build_prototypes(7, 4).is_err());
    }

    #[test]
    fn zero_noise_fixed_duration_gives_identical_rows() {
        let accent =
            AccentProfile::generate("a", 12, 0.3, 0.1, (3, 3), 5).unwrap();
        let protos = build_prototypes(1, 12).unwrap();
        let utt = render_utterance("a", &accent, &protos, 0.0, 9).unwrap();
        assert_eq!(utt.frames.shape(), &[3, 12]);
        let expect = accent.apply(&protos[0]);
        for r in 0..3 {
            assert_eq!(utt.frames.row(r).data(), expect.as_slice());
        }
    }

    #[test]
    fn identity_accent_zero_noise_gives_raw_prototypes() {
        let protos = build_prototypes(1, 12).unwrap();
        let utt = render_utterance("b", &identity(12, (2, 2)), &protos, 0.0, 9).unwrap();
        for r in 0..2 {
            assert_eq!(utt.frames.row(r).data(), protos[1].as_slice());
        }
    }

    #[test]
    fn duration_arithmetic() {
        // "ab cd" with fixed duration 3: 4 chars * 3 + 2 separator frames.
        let protos = build_prototypes(1, 12).unwrap();
        let utt = render_utterance("ab cd", &identity(12, (3, 3)), &protos, 0.0, 1).unwrap();
        assert_eq!(utt.frames.shape()[0], 4 * 3 + 2);
    }

    #[test]
    fn render_is_deterministic_in_seed() {
        let accent = AccentProfile::generate("a", 12, 0.3, 0.1, (3, 5), 5).unwrap();
        let protos = build_prototypes(1, 12).unwrap();
        let a = render_utterance("hello world", &accent, &protos, 0.05, 42).unwrap();
        let b = render_utterance("hello world", &accent, &protos, 0.05, 42).unwrap();
        assert_eq!(a.frames, b.frames);
        let c = render_utterance("hello world", &accent, &protos, 0.05, 43).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn render_rejects_unknown_chars() {
        let protos = build_prototypes(1, 12).unwrap();
        assert!(render_utterance("ab!", &identity(12, (3, 3)), &protos, 0.0, 1).is_err());
        assert!(render_utterance("", &identity(12, (3, 3)), &protos, 0.0, 1).is_err());
    }

    #[test]
    fn target_has_no_pad_and_wraps_text() {
        let protos = build_prototypes(1, 12).unwrap();
        let utt = render_utterance("ab", &identity(12, (3, 3)), &protos, 0.0, 1).unwrap();
        assert_eq!(utt.target, vec![crate::corpus::vocab::SOS, 0, 1, crate::corpus::vocab::EOS]);
    }
}
