use crate::error::{Error, Result};

/// Total number of output labels: 26 letters plus 7 special labels.
pub const VOCAB_SIZE: usize = 33;
/// Number of labels that have an acoustic prototype (letters + space +
/// apostrophe + hyphen).
pub const RENDERABLE: usize = 29;

pub const SPACE: usize = 26;
pub const APOSTROPHE: usize = 27;
pub const HYPHEN: usize = 28;
pub const SOS: usize = 29;
pub const EOS: usize = 30;
pub const PAD: usize = 31;
pub const UNK: usize = 32;

/// Fixed character vocabulary: indices 0-25 are letters `a`-`z`, then
/// space, apostrophe, hyphen, SOS, EOS, PAD, UNK.
#[derive(Debug, Clone, Copy, Default)]
pub struct Vocab;

impl Vocab {
    pub fn size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn index_of(&self, ch: char) -> Result<usize> {
        match ch {
            'a'..='z' => Ok(ch as usize - 'a' as usize),
            ' ' => Ok(SPACE),
            '\'' => Ok(APOSTROPHE),
            '-' => Ok(HYPHEN),
            _ => Err(Error::UnknownChar { ch }),
        }
    }

    /// Character for a renderable index; specials have no character.
    pub fn char_of(&self, idx: usize) -> Option<char> {
        match idx {
            0..=25 => Some((b'a' + idx as u8) as char),
            SPACE => Some(' '),
            APOSTROPHE => Some('\''),
            HYPHEN => Some('-'),
            _ => None,
        }
    }

    pub fn is_letter(&self, idx: usize) -> bool {
        idx < 26
    }

    /// Encode text into SOS ... EOS label indices.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(text.len() + 2);
        out.push(SOS);
        for ch in text.chars() {
            out.push(self.index_of(ch)?);
        }
        out.push(EOS);
        Ok(out)
    }

    /// Decode label indices back into text, ignoring special labels.
    pub fn decode(&self, indices: &[usize]) -> String {
        indices.iter().filter_map(|&i| self.char_of(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_is_33() {
        assert_eq!(Vocab.size(), 33);
    }

    #[test]
    fn letter_mapping_is_a_bijection() {
        for idx in 0..26 {
            let ch = Vocab.char_of(idx).unwrap();
            assert_eq!(Vocab.index_of(ch).unwrap(), idx);
        }
        assert_eq!(Vocab.index_of('a').unwrap(), 0);
        assert_eq!(Vocab.index_of('z').unwrap(), 25);
    }

    #[test]
    fn specials_fixed() {
        assert_eq!(Vocab.index_of(' ').unwrap(), SPACE);
        assert_eq!(Vocab.index_of('\'').unwrap(), APOSTROPHE);
        assert_eq!(Vocab.index_of('-').unwrap(), HYPHEN);
        assert!(Vocab.char_of(SOS).is_none());
        assert!(Vocab.char_of(PAD).is_none());
    }

    #[test]
    fn unknown_char_rejected() {
        assert!(matches!(
            Vocab.index_of('!'),
            Err(Error::UnknownChar { ch: '!' })
        ));
    }

    #[test]
    fn encode_decode_round_trip() {
        let target = Vocab.encode("it's a-ok").unwrap();
        assert_eq!(target[0], SOS);
        assert_eq!(*target.last().unwrap(), EOS);
        assert_eq!(Vocab.decode(&target), "it's a-ok");
    }
}
