use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::records::{ItemRecord, TextField};
use crate::error::{Error, Result};

pub const FIELD_SEPARATOR: &str = " | ";

/// Joins an item's text fields as title, ocr, asr, nickname, tags.
///
/// Empty fields are skipped, exact duplicates keep their first occurrence,
/// and every field after the title is dropped independently with
/// probability `drop_prob`. One draw is made per droppable field slot, so
/// the outcome for a field does not depend on which other fields exist.
pub fn compose_text(rec: &ItemRecord, drop_prob: f64, rng_seed: u64) -> Result<String> {
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::invalid(format!("drop_prob {drop_prob} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let tags_joined = rec.tags.iter().cloned().collect::<Vec<_>>().join(", ");
    let mut kept: Vec<&str> = Vec::new();
    for field in TextField::ORDER {
        let dropped = field != TextField::Title && drop_prob > 0.0 && rng.random::<f64>() < drop_prob;
        let text = match (field, rec.text_fields.get(&field)) {
            (_, Some(t)) if !t.trim().is_empty() => t.trim(),
            (TextField::Tags, _) if !tags_joined.is_empty() => tags_joined.as_str(),
            _ => continue,
        };
        if dropped || kept.contains(&text) {
            continue;
        }
        kept.push(text);
    }
    Ok(kept.join(FIELD_SEPARATOR))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec() -> ItemRecord {
        let mut r = ItemRecord::new("a");
        r.text_fields.insert(TextField::Title, "sunset over the bay".into());
        r.text_fields.insert(TextField::Ocr, "golden hour".into());
        r.text_fields.insert(TextField::Asr, "listen to the waves".into());
        r.text_fields.insert(TextField::Nickname, "wanderer".into());
        r.tags.insert("travel".into());
        r.tags.insert("beach".into());
        r
    }

    #[test]
    fn no_dropping_keeps_every_field_in_order() {
        assert_eq!(
            compose_text(&rec(), 0.0, 3).unwrap(),
            "sunset over the bay | golden hour | listen to the waves | wanderer | beach, travel"
        );
    }

    #[test]
    fn duplicate_field_kept_once() {
        let mut r = rec();
        r.text_fields.insert(TextField::Ocr, "sunset over the bay".into());
        let s = compose_text(&r, 0.0, 0).unwrap();
        assert_eq!(s.matches("sunset over the bay").count(), 1);
        assert!(s.starts_with("sunset over the bay | listen"));
    }

    #[test]
    fn zero_drop_is_seed_independent() {
        let a = compose_text(&rec(), 0.0, 1).unwrap();
        for seed in 2..50 {
            assert_eq!(compose_text(&rec(), 0.0, seed).unwrap(), a);
        }
    }

    #[test]
    fn dropping_is_deterministic_per_seed() {
        assert_eq!(
            compose_text(&rec(), 0.5, 42).unwrap(),
            compose_text(&rec(), 0.5, 42).unwrap()
        );
    }

    #[test]
    fn each_field_survives_at_the_expected_rate() {
        let r = rec();
        let droppable = ["golden hour", "listen to the waves", "wanderer", "beach, travel"];
        let mut survived = [0usize; 4];
        let trials = 10_000;
        for seed in 0..trials {
            let s = compose_text(&r, 0.5, seed).unwrap();
            assert!(s.starts_with("sunset over the bay"));
            for (i, f) in droppable.iter().enumerate() {
                if s.contains(f) {
                    survived[i] += 1;
                }
            }
        }
        for c in survived {
            let frac = c as f64 / trials as f64;
            assert!((frac - 0.5).abs() <= 0.02, "survival {frac}");
        }
    }

    #[test]
    fn invalid_probability_rejected() {
        assert!(compose_text(&rec(), 1.0, 0).is_err());
        assert!(compose_text(&rec(), -0.1, 0).is_err());
    }
}
