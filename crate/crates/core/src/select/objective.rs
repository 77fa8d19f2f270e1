//! Set objectives and their closed-form increments.
//!
//! `G(S) = 1 - sum_k p_k^2` over label proportions, `D(S) = 1 - mean
//! pairwise similarity`, `R(S) = alpha G + (1 - alpha) D`. Pairwise
//! similarities are clamped at zero so `D` stays in `[0,1]`.
//! Small-set conventions: `G({i}) = 0`, `D({i}) = 1`, and the empty set
//! scores `G = D = R = 0`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::retrieval::cosine;

pub fn label_diversity<S: AsRef<str>>(labels: &[S]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("label diversity of an empty set".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l.as_ref()).or_default() += 1;
    }
    let m = labels.len() as f64;
    Ok(1.0 - counts.values().map(|&n| (n as f64 / m).powi(2)).sum::<f64>())
}

/// Similarity used inside `D`: cosine clamped from below at zero.
pub fn pair_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(cosine(a, b)?.max(0.0))
}

pub fn mean_pairwise_similarity<V: AsRef<[f64]>>(embeddings: &[V]) -> Result<f64> {
    let m = embeddings.len();
    if m < 2 {
        for e in embeddings {
            pair_similarity(e.as_ref(), e.as_ref())?;
        }
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            sum += pair_similarity(embeddings[i].as_ref(), embeddings[j].as_ref())?;
        }
    }
    Ok(sum / pairs(m))
}

pub fn text_diversity<V: AsRef<[f64]>>(embeddings: &[V]) -> Result<f64> {
    if embeddings.is_empty() {
        return Err(Error::InvalidInput("text diversity of an empty set".into()));
    }
    Ok(1.0 - mean_pairwise_similarity(embeddings)?)
}

pub fn r_score(g: f64, dtext: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(mix(g, dtext, alpha))
}

#[inline]
pub(crate) fn mix(g: f64, dtext: f64, alpha: f64) -> f64 {
    alpha * g + (1.0 - alpha) * dtext
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("alpha must be in [0,1], got {alpha}")))
    }
}

/// `C(m, 2)` as a float.
#[inline]
fn pairs(m: usize) -> f64 {
    (m * m.saturating_sub(1)) as f64 / 2.0
}

/// `G`, `D`, `R` of a set computed from scratch. Empty sets score zero.
pub fn set_scores<S: AsRef<str>, V: AsRef<[f64]>>(
    labels: &[S],
    embeddings: &[V],
    alpha: f64,
) -> Result<(f64, f64, f64)> {
    check_alpha(alpha)?;
    if labels.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let g = label_diversity(labels)?;
    let d = text_diversity(embeddings)?;
    Ok((g, d, mix(g, d, alpha)))
}

/// Running label counts and mean pairwise similarity of a growing set, so
/// that each increment costs O(1) given the candidate's similarity sum `A`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IncrementalSet {
    size: usize,
    label_counts: BTreeMap<String, usize>,
    sum_sq_counts: u64,
    mean_sim: f64,
}

impl IncrementalSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn label_count(&self, label: &str) -> usize {
        self.label_counts.get(label).copied().unwrap_or(0)
    }

    pub fn label_counts(&self) -> &BTreeMap<String, usize> {
        &self.label_counts
    }

    pub fn sum_sq_counts(&self) -> u64 {
        self.sum_sq_counts
    }

    pub fn mean_pairwise_sim(&self) -> f64 {
        self.mean_sim
    }

    pub fn g(&self) -> f64 {
        if self.size == 0 {
            return 0.0;
        }
        let m = self.size as f64;
        1.0 - self.sum_sq_counts as f64 / (m * m)
    }

    pub fn d(&self) -> f64 {
        if self.size == 0 {
            0.0
        } else {
            1.0 - self.mean_sim
        }
    }

    pub fn r(&self, alpha: f64) -> f64 {
        mix(self.g(), self.d(), alpha)
    }

    /// `G` after adding an item with `label`:
    /// `1 - (sum n_k^2 + 2 n_y + 1) / (m + 1)^2`.
    pub fn g_after(&self, label: &str) -> f64 {
        let m1 = (self.size + 1) as f64;
        let n = self.label_count(label) as u64;
        1.0 - (self.sum_sq_counts + 2 * n + 1) as f64 / (m1 * m1)
    }

    /// Mean pairwise similarity after adding an item whose clamped
    /// similarities to the current members sum to `incoming_a`:
    /// `(C(m,2) * mean + A) / C(m+1,2)`.
    pub fn mean_sim_after(&self, incoming_a: f64) -> f64 {
        if self.size == 0 {
            return 0.0;
        }
        (pairs(self.size) * self.mean_sim + incoming_a) / pairs(self.size + 1)
    }

    pub fn delta_label_diversity(&self, label: &str) -> f64 {
        self.g_after(label) - self.g()
    }

    pub fn delta_text_diversity(&self, incoming_a: f64) -> f64 {
        (1.0 - self.mean_sim_after(incoming_a)) - self.d()
    }

    pub fn push(&mut self, label: &str, incoming_a: f64) {
        self.mean_sim = self.mean_sim_after(incoming_a);
        let n = self.label_counts.entry(label.to_string()).or_default();
        self.sum_sq_counts += 2 * *n as u64 + 1;
        *n += 1;
        self.size += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn label_diversity_examples() {
        assert_eq!(label_diversity(&["a", "a", "a"]).unwrap(), 0.0);
        assert!((label_diversity(&["a", "a", "b", "c"]).unwrap() - 0.625).abs() < 1e-15);
        for k in 1..10 {
            let ls: Vec<String> = (0..k).map(|i| format!("l{i}")).collect();
            let expected = 1.0 - 1.0 / k as f64;
            assert!((label_diversity(&ls).unwrap() - expected).abs() < 1e-12);
        }
        assert!(label_diversity::<&str>(&[]).is_err());
    }

    #[test]
    fn text_diversity_examples() {
        assert_eq!(text_diversity(&[[1.0, 0.0], [1.0, 0.0]]).unwrap(), 0.0);
        assert_eq!(text_diversity(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(), 1.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let d = text_diversity(&[[1.0, 0.0], [0.0, 1.0], [h, h]]).unwrap();
        // 1 - (0 + 0.70710678 + 0.70710678) / 3
        assert!((d - (1.0 - 2.0 * h / 3.0)).abs() < 1e-12);
        assert!((d - 0.5286).abs() < 1e-4);
        assert_eq!(text_diversity(&[[0.3, 0.4]]).unwrap(), 1.0);
        assert!(text_diversity(&[[0.0, 0.0], [1.0, 0.0]]).is_err());
        // Opposed vectors clamp to zero similarity rather than going above 1.
        assert_eq!(text_diversity(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap(), 1.0);
    }

    #[test]
    fn r_score_examples() {
        assert!((r_score(0.625, 0.5, 0.5).unwrap() - 0.5625).abs() < 1e-15);
        assert_eq!(r_score(0.3, 0.9, 1.0).unwrap(), 0.3);
        assert_eq!(r_score(0.3, 0.9, 0.0).unwrap(), 0.9);
        assert!(r_score(0.3, 0.9, 1.1).is_err());
    }

    #[test]
    fn label_increment_examples() {
        let mut s = IncrementalSet::new();
        assert_eq!(s.delta_label_diversity("a"), 0.0);
        s.push("a", 0.0);
        s.push("b", 0.0);
        assert!((s.g() - 0.5).abs() < 1e-15);
        assert!((s.g_after("c") - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.delta_label_diversity("c") - 1.0 / 6.0).abs() < 1e-15);

        let mut same = IncrementalSet::new();
        for _ in 0..4 {
            same.push("x", 1.0);
        }
        assert_eq!(same.delta_label_diversity("x"), 0.0);
    }

    #[test]
    fn text_increment_examples() {
        let mut s = IncrementalSet::new();
        assert_eq!(s.delta_text_diversity(0.0), 1.0);
        s.push("a", 0.0);
        assert_eq!(s.delta_text_diversity(0.0), 0.0);
        assert_eq!(s.delta_text_diversity(1.0), -1.0);
    }

    proptest! {
        #[test]
        fn closed_forms_match_recomputation(
            labels in prop::collection::vec(0u8..4, 0..9),
            vecs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 9),
            incoming_label in 0u8..4,
        ) {
            prop_assume!(vecs.iter().all(|v| v.iter().map(|x| x * x).sum::<f64>() > 1e-4));
            let m = labels.len();
            let names: Vec<String> = labels.iter().map(|l| format!("l{l}")).collect();
            let mut set = IncrementalSet::new();
            for i in 0..m {
                let a: f64 = (0..i).map(|j| pair_similarity(&vecs[i], &vecs[j]).unwrap()).sum();
                set.push(&names[i], a);
            }
            let new_label = format!("l{incoming_label}");
            let a: f64 = (0..m).map(|j| pair_similarity(&vecs[m], &vecs[j]).unwrap()).sum();

            let mut after_labels = names.clone();
            after_labels.push(new_label.clone());
            let after_vecs = &vecs[..=m];
            let (g0, d0, _) = set_scores(&names, &vecs[..m], 0.5).unwrap();
            let (g1, d1, _) = set_scores(&after_labels, after_vecs, 0.5).unwrap();
            prop_assert!((set.delta_label_diversity(&new_label) - (g1 - g0)).abs() < 1e-12);
            prop_assert!((set.delta_text_diversity(a) - (d1 - d0)).abs() < 1e-12);
            prop_assert_eq!(set.label_counts().values().sum::<usize>(), m);
        }
    }
}
