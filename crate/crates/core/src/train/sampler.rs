use rand::Rng;

use crate::error::{invalid, Result};

/// Draws `(t_a, t_b)` with `1 ≤ t_a < t_b ≤ frames`: an adjacent pair with
/// probability `bias`, otherwise a uniformly random distinct pair.
pub fn sample_timestep_pair<R: Rng>(frames: usize, bias: f64, rng: &mut R) -> Result<(usize, usize)> {
    if frames < 2 {
        return Err(invalid("timestep pair sampling needs at least 2 frames"));
    }
    if !(0.0..=1.0).contains(&bias) {
        return Err(invalid("pair bias must lie in [0, 1]"));
    }
    if rng.gen_bool(bias) {
        let t = rng.gen_range(1..frames);
        return Ok((t, t + 1));
    }
    let a = rng.gen_range(1..=frames);
    let mut b = rng.gen_range(1..frames);
    if b >= a {
        b += 1;
    }
    Ok((a.min(b), a.max(b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bias_one_is_always_adjacent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let (a, b) = sample_timestep_pair(10, 1.0, &mut rng).unwrap();
            assert_eq!(b - a, 1);
        }
    }

    #[test]
    fn two_frames_always_give_the_only_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for bias in [0.0, 0.5, 1.0] {
            for _ in 0..100 {
                assert_eq!(sample_timestep_pair(2, bias, &mut rng).unwrap(), (1, 2));
            }
        }
        assert!(sample_timestep_pair(1, 0.5, &mut rng).is_err());
    }

    #[test]
    fn unbiased_pairs_are_uniform() {
        let n = 32;
        let pairs = n * (n - 1) / 2;
        let draws = 100_000;
        let mut counts = vec![0u64; (n + 1) * (n + 1)];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..draws {
            let (a, b) = sample_timestep_pair(n, 0.0, &mut rng).unwrap();
            assert!(a < b);
            counts[a * (n + 1) + b] += 1;
        }
        let expect = draws as f64 / pairs as f64;
        let chi2: f64 = (1..=n)
            .flat_map(|a| (a + 1..=n).map(move |b| (a, b)))
            .map(|(a, b)| {
                let d = counts[a * (n + 1) + b] as f64 - expect;
                d * d / expect
            })
            .sum();
        // 495 degrees of freedom: the 99.9% quantile is about 602
        assert!(chi2 < 602.0, "chi-square {chi2}");
    }
}
