//! Export of character representations `h` with labels and accents, a
//! deterministic PCA-2D projection, and letter-cluster quality metrics
//! (silhouette under cosine distance, cross-accent same-letter agreement).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::corpus::vocab::Vocab;
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::model::{forward_teacher_forced, ModelParams};
use crate::seed;

/// One exported representation: the decoder state at a letter position.
#[derive(Debug, Clone)]
pub struct EmbeddingRow {
    pub utterance_id: String,
    pub accent_id: String,
    /// Index of the letter in the target sequence.
    pub position: usize,
    /// Letter index 0..26.
    pub letter: usize,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EmbeddingDump {
    pub hidden: usize,
    pub checkpoint_id: String,
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingDump {
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# hidden={} rows={} checkpoint={}\n",
            self.hidden,
            self.rows.len(),
            self.checkpoint_id
        );
        out.push_str("utterance_id,accent_id,position,letter");
        for i in 0..self.hidden {
            out.push_str(&format!(",h{i}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}",
                row.utterance_id,
                row.accent_id,
                row.position,
                Vocab.char_of(row.letter).unwrap_or('?')
            ));
            for v in &row.h {
                out.push_str(&format!(",{v:.12e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Teacher-forced forward over a seeded sample of utterances; one row per
/// letter position. Space and special positions are excluded.
pub fn export_embeddings(
    utterances: &[&Utterance],
    params: &ModelParams,
    limit: usize,
    sample_seed: u64,
    checkpoint_id: &str,
) -> Result<EmbeddingDump> {
    let mut order: Vec<usize> = (0..utterances.len()).collect();
    let mut rng = seed::rng(sample_seed, &[seed::tag("embed-sample")]);
    order.shuffle(&mut rng);
    order.truncate(limit);
    order.sort_unstable();

    let mut rows = Vec::new();
    for &idx in &order {
        let utt = utterances[idx];
        let fwd = forward_teacher_forced(&utt.frames, &utt.target, params)?;
        for (i, &tok) in utt.target[1..].iter().enumerate() {
            if Vocab.is_letter(tok) {
                rows.push(EmbeddingRow {
                    utterance_id: utt.id.clone(),
                    accent_id: utt.accent_id.clone(),
                    position: i + 1,
                    letter: tok,
                    h: fwd.h.row(i).data().to_vec(),
                });
            }
        }
    }
    Ok(EmbeddingDump {
        hidden: params.config.hidden,
        checkpoint_id: checkpoint_id.to_string(),
        rows,
    })
}

const PCA_ITERS: usize = 500;

fn power_iteration(cov: &[f64], dim: usize) -> (f64, Vec<f64>) {
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    for _ in 0..PCA_ITERS {
        let mut next = vec![0.0; dim];
        for i in 0..dim {
            let row = &cov[i * dim..(i + 1) * dim];
            next[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return (0.0, v);
        }
        for (a, b) in v.iter_mut().zip(&next) {
            *a = b / norm;
        }
    }
    // Rayleigh quotient
    let mut cv = vec![0.0; dim];
    for i in 0..dim {
        cv[i] = cov[i * dim..(i + 1) * dim]
            .iter()
            .zip(&v)
            .map(|(a, b)| a * b)
            .sum();
    }
    let lambda = v.iter().zip(&cv).map(|(a, b)| a * b).sum();
    (lambda, v)
}

fn fix_sign(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
    }
}

/// Top-2 principal components and their eigenvalues, via power iteration
/// with deflation. The sign convention makes the first nonzero component
/// of each direction positive.
pub fn principal_directions(dump: &EmbeddingDump) -> Result<([Vec<f64>; 2], [f64; 2])> {
    let n = dump.rows.len();
    if n < 3 {
        return Err(Error::Metric(format!(
            "PCA needs at least 3 rows, got {n}"
        )));
    }
    let d = dump.hidden;
    let mut mean = vec![0.0; d];
    for row in &dump.rows {
        for (m, v) in mean.iter_mut().zip(&row.h) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for row in &dump.rows {
        let centered: Vec<f64> = row.h.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..d {
            if centered[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                cov[i * d + j] += centered[i] * centered[j];
            }
        }
    }
    for v in cov.iter_mut() {
        *v /= (n - 1) as f64;
    }
    let (l1, mut v1) = power_iteration(&cov, d);
    if l1 <= 1e-12 {
        return Err(Error::Metric("embedding data has rank < 2".into()));
    }
    // deflate and repeat
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (l2, mut v2) = power_iteration(&deflated, d);
    if l2 <= 1e-12 * l1.max(1.0) {
        return Err(Error::Metric("embedding data has rank < 2".into()));
    }
    fix_sign(&mut v1);
    fix_sign(&mut v2);
    Ok(([v1, v2], [l1, l2]))
}

/// Project every row onto the top-2 principal directions.
pub fn pca2(dump: &EmbeddingDump) -> Result<Vec<[f64; 2]>> {
    let ([v1, v2], _) = principal_directions(dump)?;
    let n = dump.rows.len();
    let d = dump.hidden;
    let mut mean = vec![0.0; d];
    for row in &dump.rows {
        for (m, v) in mean.iter_mut().zip(&row.h) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    Ok(dump
        .rows
        .iter()
        .map(|row| {
            let mut x = 0.0;
            let mut y = 0.0;
            for i in 0..d {
                let c = row.h[i] - mean[i];
                x += c * v1[i];
                y += c * v2[i];
            }
            [x, y]
        })
        .collect())
}

/// CSV of the 2-D projection, directly plottable.
pub fn pca2_csv(dump: &EmbeddingDump, points: &[[f64; 2]]) -> String {
    let mut out = String::from("x,y,letter,accent\n");
    for (row, p) in dump.rows.iter().zip(points) {
        out.push_str(&format!(
            "{:.8e},{:.8e},{},{}\n",
            p[0],
            p[1],
            Vocab.char_of(row.letter).unwrap_or('?'),
            row.accent_id
        ));
    }
    out
}

/// Letter-cluster quality of an embedding dump.
#[derive(Debug, Clone)]
pub struct ClusterMetrics {
    /// Mean silhouette over all rows, cosine distance, letter classes.
    pub silhouette: f64,
    /// Mean within-class cosine similarity per letter.
    pub per_letter_intra: BTreeMap<usize, f64>,
    /// Mean cosine similarity of same-letter pairs from different accents.
    pub cross_accent_same_letter: f64,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

/// Silhouette with cosine distance over letter classes, plus similarity
/// summaries. Sample-level convention: singleton classes and
/// zero-denominator samples score 0.
pub fn cluster_metrics(dump: &EmbeddingDump) -> Result<ClusterMetrics> {
    let n = dump.rows.len();
    let mut class_members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, row) in dump.rows.iter().enumerate() {
        class_members.entry(row.letter).or_default().push(i);
    }
    let usable = class_members.values().filter(|m| m.len() >= 2).count();
    if class_members.len() < 2 || usable < 2 {
        return Err(Error::Metric(format!(
            "silhouette needs at least 2 letter classes with 2+ rows, got {} classes ({} usable)",
            class_members.len(),
            usable
        )));
    }

    let units: Vec<Vec<f64>> = dump.rows.iter().map(|r| unit(&r.h)).collect();
    let dist = |a: usize, b: usize| -> f64 {
        let dot: f64 = units[a].iter().zip(&units[b]).map(|(x, y)| x * y).sum();
        1.0 - dot
    };

    let mut sil_sum = 0.0;
    for i in 0..n {
        let own = &class_members[&dump.rows[i].letter];
        if own.len() < 2 {
            continue; // convention: singleton contributes 0
        }
        let a: f64 = own
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| dist(i, j))
            .sum::<f64>()
            / (own.len() - 1) as f64;
        let mut b = f64::INFINITY;
        for (letter, members) in &class_members {
            if *letter == dump.rows[i].letter {
                continue;
            }
            let mean =
                members.iter().map(|&j| dist(i, j)).sum::<f64>() / members.len() as f64;
            if mean < b {
                b = mean;
            }
        }
        let denom = a.max(b);
        if denom > 0.0 {
            sil_sum += (b - a) / denom;
        }
    }
    let silhouette = sil_sum / n as f64;

    let mut per_letter_intra = BTreeMap::new();
    for (letter, members) in &class_members {
        if members.len() < 2 {
            continue;
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for x in 0..members.len() {
            for y in x + 1..members.len() {
                total += 1.0 - dist(members[x], members[y]);
                count += 1;
            }
        }
        per_letter_intra.insert(*letter, total / count as f64);
    }

    let mut cross_total = 0.0;
    let mut cross_count = 0usize;
    for members in class_members.values() {
        for x in 0..members.len() {
            for y in x + 1..members.len() {
                let (i, j) = (members[x], members[y]);
                if dump.rows[i].accent_id != dump.rows[j].accent_id {
                    cross_total += 1.0 - dist(i, j);
                    cross_count += 1;
                }
            }
        }
    }
    let cross_accent_same_letter = if cross_count == 0 {
        0.0
    } else {
        cross_total / cross_count as f64
    };

    Ok(ClusterMetrics {
        silhouette,
        per_letter_intra,
        cross_accent_same_letter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dump_from(rows: Vec<(usize, &str, Vec<f64>)>) -> EmbeddingDump {
        let hidden = rows[0].2.len();
        EmbeddingDump {
            hidden,
            checkpoint_id: "test".into(),
            rows: rows
                .into_iter()
                .enumerate()
                .map(|(i, (letter, accent, h))| EmbeddingRow {
                    utterance_id: format!("u{i}"),
                    accent_id: accent.to_string(),
                    position: i,
                    letter,
                    h,
                })
                .collect(),
        }
    }

    #[test]
    fn perfectly_separated_identical_clusters_score_one() {
        let dump = dump_from(vec![
            (0, "a", vec![1.0, 0.0, 0.0]),
            (0, "b", vec![1.0, 0.0, 0.0]),
            (1, "a", vec![0.0, 1.0, 0.0]),
            (1, "b", vec![0.0, 1.0, 0.0]),
        ]);
        let metrics = cluster_metrics(&dump).unwrap();
        assert!((metrics.silhouette - 1.0).abs() < 1e-12);
        assert!((metrics.cross_accent_same_letter - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_vectors_across_classes_score_zero() {
        let dump = dump_from(vec![
            (0, "a", vec![1.0, 1.0]),
            (0, "a", vec![1.0, 1.0]),
            (1, "a", vec![1.0, 1.0]),
            (1, "a", vec![1.0, 1.0]),
        ]);
        let metrics = cluster_metrics(&dump).unwrap();
        assert_eq!(metrics.silhouette, 0.0);
    }

    #[test]
    fn silhouette_invariant_to_uniform_scaling() {
        let base = vec![
            (0, "a", vec![0.9, 0.1, 0.0]),
            (0, "b", vec![0.8, 0.2, 0.1]),
            (1, "a", vec![0.1, 0.9, 0.2]),
            (1, "b", vec![0.0, 1.0, 0.1]),
        ];
        let scaled: Vec<(usize, &str, Vec<f64>)> = base
            .iter()
            .map(|(l, a, h)| (*l, *a, h.iter().map(|v| v * 7.0).collect()))
            .collect();
        let m1 = cluster_metrics(&dump_from(base)).unwrap();
        let m2 = cluster_metrics(&dump_from(scaled)).unwrap();
        assert!((m1.silhouette - m2.silhouette).abs() < 1e-12);
    }

    #[test]
    fn insufficient_classes_rejected() {
        let dump = dump_from(vec![
            (0, "a", vec![1.0, 0.0]),
            (0, "a", vec![0.9, 0.1]),
        ]);
        assert!(matches!(cluster_metrics(&dump), Err(Error::Metric(_))));
    }

    #[test]
    fn pca_recovers_axis_aligned_components() {
        // uncorrelated grid: every x paired with both y values, so the
        // covariance is exactly diagonal; x variance dominates, z is zero
        let mut rows = Vec::new();
        for i in 0..10 {
            let x = (i as f64 - 4.5) * 2.0;
            for y in [0.5, -0.5] {
                rows.push((0, "a", vec![x, y, 0.0]));
            }
        }
        let dump = dump_from(rows);
        let ([v1, v2], [l1, l2]) = principal_directions(&dump).unwrap();
        assert!(l1 > l2);
        assert!((v1[0].abs() - 1.0).abs() < 1e-6, "v1 = {v1:?}");
        assert!((v2[1].abs() - 1.0).abs() < 1e-6, "v2 = {v2:?}");
        // sign convention: first nonzero component positive
        assert!(v1[0] > 0.0);
        assert!(v2.iter().find(|v| v.abs() > 1e-12).unwrap() > &0.0);
    }

    #[test]
    fn pca_rejects_rank_deficient_data() {
        let dump = dump_from(vec![
            (0, "a", vec![1.0, 2.0]),
            (0, "a", vec![2.0, 4.0]),
            (1, "a", vec![3.0, 6.0]),
        ]);
        assert!(matches!(pca2(&dump), Err(Error::Metric(_))));
    }

    #[test]
    fn pca_projection_variances_are_ordered() {
        let mut rows = Vec::new();
        let mut rng = crate::seed::rng(5, &[]);
        use rand::Rng;
        for _ in 0..50 {
            rows.push((
                0usize,
                "a",
                (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
            ));
        }
        let dump = dump_from(rows);
        let points = pca2(&dump).unwrap();
        let var = |sel: fn(&[f64; 2]) -> f64| {
            let mean: f64 = points.iter().map(|p| sel(p)).sum::<f64>() / points.len() as f64;
            points
                .iter()
                .map(|p| (sel(p) - mean).powi(2))
                .sum::<f64>()
                / (points.len() - 1) as f64
        };
        assert!(var(|p| p[0]) >= var(|p| p[1]));
    }
}
