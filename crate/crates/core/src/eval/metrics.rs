use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Gold value that marks a slot as inactive.
pub const NOT_MENTIONED: &str = "not_mentioned";

/// Stated in every report so readers know how inactive slots were scored.
pub const AGA_CONVENTION: &str = "a slot is active iff its gold value is not `not_mentioned`";

pub fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Canonical state string: `domain-slot=value` pairs sorted and joined by `;`.
pub fn canonical_state(slots: &BTreeMap<String, String>) -> String {
    let mut parts: Vec<String> = slots
        .iter()
        .map(|(k, v)| format!("{}={}", normalize(k), normalize(v)))
        .collect();
    parts.sort();
    parts.join(";")
}

/// Parses a canonical state string back into slots. A string without `=`
/// is a bare label and becomes the single slot `intent`.
pub fn parse_state(s: &str) -> BTreeMap<String, String> {
    let s = normalize(s);
    if !s.contains('=') {
        return BTreeMap::from([("intent".to_string(), s)]);
    }
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| match p.split_once('=') {
            Some((k, v)) => (k.trim().to_string(), v.trim().to_string()),
            None => (p.trim().to_string(), String::new()),
        })
        .collect()
}

/// Exact-match rate after normalization.
pub fn jga<P: AsRef<str>, G: AsRef<str>>(predictions: &[P], golds: &[G]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} gold states",
            predictions.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::InvalidInput("no turns to score".into()));
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| normalize(p.as_ref()) == normalize(g.as_ref()))
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

/// Mean over turns of the fraction of active gold slots predicted
/// correctly. Turns without active slots are skipped.
pub fn aga(predicted: &[BTreeMap<String, String>], gold: &[BTreeMap<String, String>]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::InvalidInput(format!(
            "{} predicted turns for {} gold turns",
            predicted.len(),
            gold.len()
        )));
    }
    let mut total = 0.0;
    let mut turns = 0usize;
    for (p, g) in predicted.iter().zip(gold) {
        let active: Vec<(&String, &String)> = g.iter().filter(|(_, v)| normalize(v) != NOT_MENTIONED).collect();
        if active.is_empty() {
            continue;
        }
        let correct = active
            .iter()
            .filter(|(k, v)| p.get(*k).is_some_and(|pv| normalize(pv) == normalize(v)))
            .count();
        total += correct as f64 / active.len() as f64;
        turns += 1;
    }
    if turns == 0 {
        return Err(Error::InvalidInput("no turn has an active gold slot".into()));
    }
    Ok(total / turns as f64)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slots(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn jga_examples() {
        assert!((jga(&["a", "b", "c"], &["a", "b", "x"]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(jga(&["a", "b"], &["a", "b"]).unwrap(), 1.0);
        assert_eq!(jga(&["hotel-area=north "], &["hotel-area=north"]).unwrap(), 1.0);
        assert!(jga(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn aga_examples() {
        let gold = slots(&[("a", "1"), ("b", "2"), ("c", "3"), ("d", "4")]);
        let half = slots(&[("a", "1"), ("b", "2"), ("c", "x")]);
        assert_eq!(aga(&[half.clone()], &[gold.clone()]).unwrap(), 0.5);
        assert_eq!(aga(&[gold.clone(), half.clone()], &[gold.clone(), gold.clone()]).unwrap(), 0.75);
        let empty = slots(&[("a", NOT_MENTIONED)]);
        assert_eq!(aga(&[half.clone(), gold.clone()], &[empty.clone(), gold.clone()]).unwrap(), 1.0);
        assert!(aga(&[half], &[empty]).is_err());
    }

    #[test]
    fn canonical_round_trip() {
        let s = slots(&[("taxi-leave", "17:15"), ("Hotel-Area", " North")]);
        let c = canonical_state(&s);
        assert_eq!(c, "hotel-area=north;taxi-leave=17:15");
        assert_eq!(canonical_state(&parse_state(&c)), c);
        assert_eq!(parse_state("Book_Taxi"), slots(&[("intent", "book_taxi")]));
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
