use rand::Rng;

use super::forward::Token;

/// Draws a token from `softmax(logits / temperature)` using one uniform
/// variate from `rng`.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], rng: &mut R, temperature: f64) -> Token {
    debug_assert!(!logits.is_empty());
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    // rounding left `u` past the last bucket; take the last token with mass
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dominant_logit_always_wins() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = [0.0, 1e9, 0.0, 0.0];
        assert!((0..1000).all(|_| sample_token(&logits, &mut rng, 1.0) == 1));
    }

    #[test]
    fn uniform_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[sample_token(&[0.0; 4], &mut rng, 1.0)] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.25).abs() <= 0.03, "frequency {f}");
        }
    }

    #[test]
    fn seeded_sequences_repeat() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| sample_token(&[0.3, -1.0, 2.0], &mut rng, 1.0))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }
}
