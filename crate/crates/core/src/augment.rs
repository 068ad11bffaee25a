//! View builders for contrastive learning: additive noise, spectrogram
//! style masking, and re-rendering the same sentence through a reserved
//! synthetic voice. Views never change the transcript.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::{render_utterance, AccentProfile, Utterance};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Probability of additive noise per emitted view.
    pub noise_prob: f64,
    /// Noise amplitude as a fraction of the corpus frame RMS.
    pub noise_scale: f64,
    /// Probability of masking per emitted view.
    pub specaug_prob: f64,
    /// Maximum width of the (single) feature-band mask.
    pub freq_mask_width: usize,
    /// Maximum width of the (single) time-span mask.
    pub time_mask_width: usize,
    /// Probability of emitting an alternate-voice re-render of the sentence.
    pub altvoice_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_prob: 0.5,
            noise_scale: 0.3,
            specaug_prob: 0.25,
            freq_mask_width: 4,
            time_mask_width: 4,
            altvoice_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Configuration with every augmentation disabled.
    pub fn disabled() -> Self {
        AugmentConfig {
            noise_prob: 0.0,
            noise_scale: 0.3,
            specaug_prob: 0.0,
            freq_mask_width: 4,
            time_mask_width: 4,
            altvoice_prob: 0.0,
        }
    }

    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        for (name, p) in [
            ("noise_prob", self.noise_prob),
            ("specaug_prob", self.specaug_prob),
            ("altvoice_prob", self.altvoice_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "augment.{name} must be in [0, 1], got {p}"
                )));
            }
        }
        if self.noise_scale < 0.0 {
            return Err(Error::Config("augment.noise_scale must be >= 0".into()));
        }
        if self.freq_mask_width >= feature_dim {
            return Err(Error::Config(format!(
                "augment.freq_mask_width {} must be smaller than the feature dimension {}",
                self.freq_mask_width, feature_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewTag {
    Original,
    Noise,
    SpecAug,
    AltVoice,
    Combined,
}

impl ViewTag {
    pub fn name(&self) -> &'static str {
        match self {
            ViewTag::Original => "original",
            ViewTag::Noise => "noise",
            ViewTag::SpecAug => "specaug",
            ViewTag::AltVoice => "altvoice",
            ViewTag::Combined => "combined",
        }
    }
}

/// An alternative rendering of an utterance. The transcript (and thus the
/// target sequence) is that of the source utterance, always.
#[derive(Debug, Clone)]
pub struct View {
    pub frames: Tensor,
    pub source_utterance_id: String,
    pub tag: ViewTag,
}

/// Add seeded Gaussian noise scaled to `scale * rms` per element.
pub fn inject_noise(frames: &Tensor, scale: f64, rms: f64, rng: &mut ChaCha8Rng) -> Tensor {
    if scale == 0.0 {
        return frames.clone();
    }
    let amp = scale * rms;
    let mut out = frames.clone();
    for v in out.data_mut() {
        *v += amp * rng.sample::<f64, _>(StandardNormal);
    }
    out
}

/// Zero one contiguous feature band and one contiguous time span, with
/// widths and offsets drawn uniformly. Cells outside the masks are
/// untouched; the shape never changes.
pub fn spec_augment(frames: &Tensor, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let t = frames.shape()[0];
    let d = frames.shape()[1];
    let mut out = frames.clone();

    let max_fw = cfg.freq_mask_width.min(d.saturating_sub(1));
    let fw = if max_fw == 0 { 0 } else { rng.gen_range(0..=max_fw) };
    let f0 = if fw < d { rng.gen_range(0..=(d - fw)) } else { 0 };

    let max_tw = cfg.time_mask_width.min(t.saturating_sub(1));
    let tw = if max_tw == 0 { 0 } else { rng.gen_range(0..=max_tw) };
    let t0 = if tw < t { rng.gen_range(0..=(t - tw)) } else { 0 };

    let data = out.data_mut();
    for row in 0..t {
        for col in f0..f0 + fw {
            data[row * d + col] = 0.0;
        }
    }
    for row in t0..t0 + tw {
        for col in 0..d {
            data[row * d + col] = 0.0;
        }
    }
    out
}

/// Re-render the same sentence through a reserved voice profile. The
/// target sequence is unchanged; the frame count generally differs.
pub fn altvoice_render(
    utterance: &Utterance,
    voice: &AccentProfile,
    prototypes: &[Vec<f64>],
    noise_sigma: f64,
    render_seed: u64,
) -> Result<View> {
    let rendered = render_utterance(&utterance.text, voice, prototypes, noise_sigma, render_seed)?;
    Ok(View {
        frames: rendered.frames,
        source_utterance_id: utterance.id.clone(),
        tag: ViewTag::AltVoice,
    })
}

/// View builder bound to a corpus: knows the frame RMS, the reserved
/// voice and the prototypes needed for alternate-voice rendering.
#[derive(Debug, Clone)]
pub struct Augmenter {
    pub cfg: AugmentConfig,
    pub rms: f64,
    pub voice: AccentProfile,
    pub prototypes: Vec<Vec<f64>>,
    pub noise_sigma: f64,
}

impl Augmenter {
    pub fn new(
        cfg: AugmentConfig,
        rms: f64,
        voice: AccentProfile,
        prototypes: Vec<Vec<f64>>,
        noise_sigma: f64,
    ) -> Self {
        Augmenter {
            cfg,
            rms,
            voice,
            prototypes,
            noise_sigma,
        }
    }

    /// Build the views of one utterance. Always emits the original view;
    /// emits an alternate-voice view with probability `altvoice_prob`;
    /// independently applies noise and masking to each emitted copy.
    /// Pure function of (utterance, config, seed).
    pub fn make_views(&self, utterance: &Utterance, view_seed: u64) -> Result<Vec<View>> {
        let mut rng = seed::rng(view_seed, &[seed::tag("views")]);
        let mut views = Vec::with_capacity(2);

        let emit_altvoice = rng.gen::<f64>() < self.cfg.altvoice_prob;

        let original = View {
            frames: utterance.frames.clone(),
            source_utterance_id: utterance.id.clone(),
            tag: ViewTag::Original,
        };
        views.push(self.corrupt(original, &mut rng));

        if emit_altvoice {
            let render_seed = rng.gen::<u64>();
            let alt = altvoice_render(
                utterance,
                &self.voice,
                &self.prototypes,
                self.noise_sigma,
                render_seed,
            )?;
            views.push(self.corrupt(alt, &mut rng));
        }
        Ok(views)
    }

    fn corrupt(&self, mut view: View, rng: &mut ChaCha8Rng) -> View {
        let apply_noise = rng.gen::<f64>() < self.cfg.noise_prob;
        let apply_mask = rng.gen::<f64>() < self.cfg.specaug_prob;
        let mut applied = 0;
        if apply_noise {
            view.frames = inject_noise(&view.frames, self.cfg.noise_scale, self.rms, rng);
            applied += 1;
        }
        if apply_mask {
            view.frames = spec_augment(&view.frames, &self.cfg, rng);
            applied += 1;
        }
        view.tag = match (view.tag, apply_noise, apply_mask) {
            (ViewTag::Original, false, false) => ViewTag::Original,
            (ViewTag::Original, true, false) => ViewTag::Noise,
            (ViewTag::Original, false, true) => ViewTag::SpecAug,
            (ViewTag::Original, true, true) => ViewTag::Combined,
            (ViewTag::AltVoice, false, false) => ViewTag::AltVoice,
            (ViewTag::AltVoice, _, _) if applied > 0 => ViewTag::Combined,
            (tag, _, _) => tag,
        };
        view
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_prototypes, AccentProfile};

    fn fixture() -> (Utterance, AccentProfile, Vec<Vec<f64>>) {
        let protos = build_prototypes(3, 12).unwrap();
        let accent = AccentProfile::generate("src", 12, 0.3, 0.1, (3, 5), 21).unwrap();
        let utt = render_utterance("abc ab", &accent, &protos, 0.05, 77).unwrap();
        (utt, accent, protos)
    }

    fn augmenter(cfg: AugmentConfig) -> Augmenter {
        let (_, _, protos) = fixture();
        let voice = AccentProfile::generate("voice", 12, 0.35, 0.1, (3, 5), 99).unwrap();
        Augmenter::new(cfg, 1.0, voice, protos, 0.05)
    }

    #[test]
    fn zero_scale_noise_is_identity() {
        let (utt, _, _) = fixture();
        let mut rng = seed::rng(1, &[]);
        let out = inject_noise(&utt.frames, 0.0, 1.0, &mut rng);
        assert_eq!(out, utt.frames);
    }

    #[test]
    fn noise_is_deterministic_in_seed() {
        let (utt, _, _) = fixture();
        let a = inject_noise(&utt.frames, 0.3, 1.0, &mut seed::rng(5, &[]));
        let b = inject_noise(&utt.frames, 0.3, 1.0, &mut seed::rng(5, &[]));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_width_masks_are_identity() {
        let (utt, _, _) = fixture();
        let cfg = AugmentConfig {
            freq_mask_width: 0,
            time_mask_width: 0,
            ..AugmentConfig::default()
        };
        let out = spec_augment(&utt.frames, &cfg, &mut seed::rng(5, &[]));
        assert_eq!(out, utt.frames);
    }

    #[test]
    fn cells_outside_masks_untouched() {
        let (utt, _, _) = fixture();
        let cfg = AugmentConfig::default();
        let out = spec_augment(&utt.frames, &cfg, &mut seed::rng(5, &[]));
        assert_eq!(out.shape(), utt.frames.shape());
        // every changed cell must be exactly zero
        for (a, b) in out.data().iter().zip(utt.frames.data()) {
            assert!(a == b || *a == 0.0);
        }
    }

    #[test]
    fn altvoice_preserves_text_changes_frames() {
        let (utt, _, protos) = fixture();
        let voice = AccentProfile::generate("voice", 12, 0.35, 0.1, (3, 5), 99).unwrap();
        let view = altvoice_render(&utt, &voice, &protos, 0.05, 123).unwrap();
        assert_eq!(view.source_utterance_id, utt.id);
        assert_eq!(view.tag, ViewTag::AltVoice);
        let diff: f64 = if view.frames.shape() == utt.frames.shape() {
            view.frames
                .data()
                .iter()
                .zip(utt.frames.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        } else {
            f64::INFINITY
        };
        assert!(diff > 0.0);
    }

    #[test]
    fn altvoice_through_source_accent_same_seed_is_identity() {
        let (_, accent, protos) = fixture();
        let utt = render_utterance("abc ab", &accent, &protos, 0.05, 555).unwrap();
        let view = altvoice_render(&utt, &accent, &protos, 0.05, 555).unwrap();
        assert_eq!(view.frames, utt.frames);
    }

    #[test]
    fn all_probs_zero_gives_single_original_view() {
        let (utt, _, _) = fixture();
        let aug = augmenter(AugmentConfig::disabled());
        let views = aug.make_views(&utt, 9).unwrap();
        assert_eq!(views.len(), 1);
        assert_eq!(views[0].tag, ViewTag::Original);
        assert_eq!(views[0].frames, utt.frames);
    }

    #[test]
    fn all_probs_one_gives_tagged_views() {
        let (utt, _, _) = fixture();
        let aug = augmenter(AugmentConfig {
            noise_prob: 1.0,
            specaug_prob: 1.0,
            altvoice_prob: 1.0,
            ..AugmentConfig::default()
        });
        let views = aug.make_views(&utt, 9).unwrap();
        assert_eq!(views.len(), 2);
        for v in &views {
            assert_eq!(v.tag, ViewTag::Combined);
        }
    }

    #[test]
    fn make_views_deterministic() {
        let (utt, _, _) = fixture();
        let aug = augmenter(AugmentConfig::default());
        let a = aug.make_views(&utt, 31).unwrap();
        let b = aug.make_views(&utt, 31).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.frames, y.frames);
            assert_eq!(x.tag, y.tag);
        }
    }

    #[test]
    fn probabilities_validated() {
        let cfg = AugmentConfig {
            noise_prob: 1.5,
            ..AugmentConfig::default()
        };
        assert!(cfg.validate(20).is_err());
        assert!(AugmentConfig::default().validate(20).is_ok());
        assert!(AugmentConfig::default().validate(3).is_err());
    }
}
