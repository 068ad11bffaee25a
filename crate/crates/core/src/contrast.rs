//! Positive-pair mining over character embeddings and the contrastive
//! objective: for an anchored positive pair, the temperature-scaled
//! cosine-similarity softmax over every other candidate in the batch.
//! Also assembles the per-character recognition loss and the combined
//! two-term training loss.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::augment::ViewTag;
use crate::corpus::vocab::{Vocab, PAD, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_PAIR_CAP: usize = 20;

/// One character's contrastive-space representation with its provenance.
#[derive(Debug, Clone)]
pub struct CharEmbedding {
    /// Raw projection-head output.
    pub y: Vec<f64>,
    /// Unit-norm copy used for similarities.
    pub y_norm: Vec<f64>,
    pub label: usize,
    pub utterance_id: String,
    pub view_tag: ViewTag,
    pub position: usize,
}

impl CharEmbedding {
    pub fn new(
        y: Vec<f64>,
        label: usize,
        utterance_id: impl Into<String>,
        view_tag: ViewTag,
        position: usize,
    ) -> Result<Self> {
        if label >= VOCAB_SIZE {
            return Err(Error::BadLabelIndex { idx: label });
        }
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            return Err(Error::DegenerateVector { norm });
        }
        let y_norm = y.iter().map(|v| v / norm).collect();
        Ok(CharEmbedding {
            y,
            y_norm,
            label,
            utterance_id: utterance_id.into(),
            view_tag,
            position,
        })
    }
}

/// Letter-labelled candidates of one batch and the mined positive pairs.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub candidates: Vec<CharEmbedding>,
    pub positive_pairs: Vec<(usize, usize)>,
}

/// All unordered same-label index pairs, downsampled per class to
/// `cap_per_class` with the given RNG. Shared by the value-level and the
/// training-graph paths so both mine identically.
pub fn mine_pairs_from_labels(
    labels: &[usize],
    cap_per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for letter in 0..26 {
        let members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == letter)
            .map(|(i, _)| i)
            .collect();
        if members.len() < 2 {
            continue;
        }
        let mut class_pairs = Vec::with_capacity(members.len() * (members.len() - 1) / 2);
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                class_pairs.push((members[i], members[j]));
            }
        }
        if class_pairs.len() > cap_per_class {
            class_pairs.shuffle(rng);
            class_pairs.truncate(cap_per_class);
            class_pairs.sort_unstable();
        }
        pairs.extend(class_pairs);
    }
    pairs
}

/// Keep letter-labelled embeddings and mine capped same-letter pairs.
/// An empty positive set is a valid outcome for small batches.
pub fn mine_pairs(
    embeddings: Vec<CharEmbedding>,
    cap_per_class: usize,
    rng: &mut ChaCha8Rng,
) -> PairBatch {
    let candidates: Vec<CharEmbedding> = embeddings
        .into_iter()
        .filter(|e| Vocab.is_letter(e.label))
        .collect();
    let labels: Vec<usize> = candidates.iter().map(|e| e.label).collect();
    let positive_pairs = mine_pairs_from_labels(&labels, cap_per_class, rng);
    PairBatch {
        candidates,
        positive_pairs,
    }
}

/// Stack normalized candidate vectors and compute the shared similarity
/// structure: the temperature-scaled cosine matrix `S` and each row's
/// log-sum-exp over all other candidates.
pub fn similarity_graph(g: &Graph, ys: &[Var], tau: f64) -> Result<(Var, Var)> {
    if ys.len() < 2 {
        return Err(Error::InsufficientBatch { m: ys.len() });
    }
    if tau <= 0.0 {
        return Err(Error::Contract(format!("temperature must be > 0, got {tau}")));
    }
    let normed: Result<Vec<Var>> = ys.iter().map(|y| y.l2_normalize()).collect();
    let y = g.stack_rows(&normed?)?;
    let s = y.matmul(&y.transpose()?)?.scale(1.0 / tau)?;
    let lse = s.off_diag_row_lse()?;
    Ok((s, lse))
}

/// One anchored pair term: `lse(anchor row) - S[anchor, pos]`.
pub fn pair_term(s: &Var, lse: &Var, m: usize, anchor: usize, pos: usize) -> Result<Var> {
    if anchor == pos {
        return Err(Error::Contract("a pair cannot anchor against itself".into()));
    }
    let sim = s.pick(anchor * m + pos)?;
    let denom = lse.pick(anchor)?;
    denom.sub(&sim)
}

/// Mean over all anchored pair terms, with both orderings of each
/// unordered positive pair used as anchors. `None` when no pairs exist.
pub fn contrastive_loss_graph(
    g: &Graph,
    ys: &[Var],
    pairs: &[(usize, usize)],
    tau: f64,
) -> Result<Option<Var>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let m = ys.len();
    let (s, lse) = similarity_graph(g, ys, tau)?;
    let mut total: Option<Var> = None;
    for &(a, b) in pairs {
        if a >= m || b >= m {
            return Err(Error::Contract(format!(
                "pair ({a}, {b}) out of range for {m} candidates"
            )));
        }
        for (anchor, pos) in [(a, b), (b, a)] {
            let term = pair_term(&s, &lse, m, anchor, pos)?;
            total = Some(match total {
                None => term,
                Some(acc) => acc.add(&term)?,
            });
        }
    }
    let count = (2 * pairs.len()) as f64;
    Ok(Some(total.unwrap().scale(1.0 / count)?))
}

fn candidate_leaves(g: &Graph, batch: &PairBatch) -> Result<Vec<Var>> {
    batch
        .candidates
        .iter()
        .map(|c| Ok(g.param(Tensor::from_vec(&[1, c.y.len()], c.y.clone())?)))
        .collect()
}

/// Loss of one anchored positive pair against the whole candidate set.
pub fn contrastive_pair_loss(
    anchor_idx: usize,
    pos_idx: usize,
    batch: &PairBatch,
    tau: f64,
) -> Result<f64> {
    let m = batch.candidates.len();
    if m < 2 {
        return Err(Error::InsufficientBatch { m });
    }
    if anchor_idx >= m || pos_idx >= m {
        return Err(Error::Contract(format!(
            "indices ({anchor_idx}, {pos_idx}) out of range for {m} candidates"
        )));
    }
    let g = Graph::new();
    let ys = candidate_leaves(&g, batch)?;
    let (s, lse) = similarity_graph(&g, &ys, tau)?;
    Ok(pair_term(&s, &lse, m, anchor_idx, pos_idx)?.item())
}

/// Batch contrastive loss: the mean over both anchorings of every mined
/// pair. Returns `(0.0, true)` when the batch has no positive pairs.
pub fn contrastive_loss(batch: &PairBatch, tau: f64) -> Result<(f64, bool)> {
    if batch.positive_pairs.is_empty() {
        return Ok((0.0, true));
    }
    let g = Graph::new();
    let ys = candidate_leaves(&g, batch)?;
    let loss = contrastive_loss_graph(&g, &ys, &batch.positive_pairs, tau)?
        .expect("pairs are non-empty");
    Ok((loss.item(), false))
}

/// Per-character recognition loss: mean negative log-probability of the
/// target tokens after SOS (PAD positions excluded).
pub fn asr_loss(asr_logprobs: &Tensor, target: &[usize]) -> Result<f64> {
    if asr_logprobs.rank() != 2 || asr_logprobs.shape()[1] != VOCAB_SIZE {
        return Err(Error::Contract(format!(
            "log-probability matrix has shape {:?}",
            asr_logprobs.shape()
        )));
    }
    let l = asr_logprobs.shape()[0];
    if target.len() != l + 1 {
        return Err(Error::Contract(format!(
            "target length {} does not match {} prediction rows",
            target.len(),
            l
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, &tok) in target[1..].iter().enumerate() {
        if tok >= VOCAB_SIZE {
            return Err(Error::BadLabelIndex { idx: tok });
        }
        if tok == PAD {
            continue;
        }
        sum += asr_logprobs.at2(i, tok);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Contract("target has no scorable positions".into()));
    }
    Ok(-sum / count as f64)
}

/// Graph version of [`asr_loss`] over per-step log-probability rows.
pub fn asr_loss_graph(logprob_rows: &[Var], target: &[usize]) -> Result<Var> {
    if target.len() != logprob_rows.len() + 1 {
        return Err(Error::Contract(format!(
            "target length {} does not match {} prediction rows",
            target.len(),
            logprob_rows.len()
        )));
    }
    let mut picks = Vec::new();
    for (row, &tok) in logprob_rows.iter().zip(&target[1..]) {
        if tok >= VOCAB_SIZE {
            return Err(Error::BadLabelIndex { idx: tok });
        }
        if tok == PAD {
            continue;
        }
        picks.push(row.pick(tok)?);
    }
    if picks.is_empty() {
        return Err(Error::Contract("target has no scorable positions".into()));
    }
    let mut total = picks[0].clone();
    for p in &picks[1..] {
        total = total.add(p)?;
    }
    total.scale(-1.0 / picks.len() as f64)
}

/// Combined objective value.
pub fn total_loss(asr: f64, con: f64, alpha: f64) -> f64 {
    asr + alpha * con
}

/// The loss components of one training step.
#[derive(Debug, Clone, Copy)]
pub struct LossValues {
    pub asr: f64,
    pub con: f64,
    pub total: f64,
    pub alpha: f64,
    pub pair_count: usize,
    /// Set when a contrastive term was requested but no positives existed.
    pub no_positives: bool,
}
