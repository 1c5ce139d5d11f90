//! Answer normalization, token F1 and exact-match accuracy.

use std::collections::HashMap;

use crate::adapters::TaskType;

/// Lowercase, drop punctuation and the articles a/an/the, split on
/// whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Token-level F1 over normalized bags of words. Two empty answers score 1.
pub fn f1_token(prediction: &str, gold: &str) -> f64 {
    let p = normalize(prediction);
    let g = normalize(gold);
    if p.is_empty() || g.is_empty() {
        return f64::from(u8::from(p == g));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// 1 when the normalized strings match exactly.
pub fn accuracy(prediction: &str, gold: &str) -> f64 {
    f64::from(u8::from(normalize(prediction) == normalize(gold)))
}

/// Metric name and scorer for a task: accuracy for fact checking, F1
/// otherwise.
pub fn task_metric(task: TaskType) -> (&'static str, fn(&str, &str) -> f64) {
    match task {
        TaskType::FactCheck => ("accuracy", accuracy),
        TaskType::Qa | TaskType::SlotFill => ("f1", f1_token),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn f1_examples() {
        assert_eq!(f1_token("zorvak belmin", "zorvak belmin"), 1.0);
        assert_eq!(f1_token("zorvak", "belmin"), 0.0);
        assert_eq!(f1_token("the Eiffel Tower", "eiffel tower"), 1.0);
        // one of two predicted tokens correct against a one-token gold
        assert!((f1_token("zorvak belmin", "zorvak") - 2.0 * 0.5 * 1.0 / 1.5).abs() < 1e-15);
        assert_eq!(f1_token("", ""), 1.0);
        assert_eq!(f1_token("x", ""), 0.0);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy("SUPPORTS", "supports"), 1.0);
        assert_eq!(accuracy("REFUTES", "SUPPORTS"), 0.0);
        assert_eq!(accuracy("  SUPPORTS \n", "SUPPORTS"), 1.0);
    }

    proptest! {
        #[test]
        fn metrics_are_bounded(p in "[a-zA-Z .,!]{0,30}", g in "[a-zA-Z .,!]{0,30}") {
            let f = f1_token(&p, &g);
            prop_assert!((0.0..=1.0).contains(&f));
            let a = accuracy(&p, &g);
            prop_assert!(a == 0.0 || a == 1.0);
            prop_assert_eq!(f1_token(&p, &p), 1.0);
        }
    }
}
