//! Vocabulary, tokenization and autoregressive decoding.

pub mod decode;
pub mod vocab;

pub use decode::{
    argmax, beam_search, greedy_decode, greedy_decode_batch, sample_decode, Decoded, Hypothesis,
};
pub use vocab::{normalize, Vocabulary, BOS, EOS, PAD, UNK};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionConfig;
    use crate::model::{Swifter, SwifterConfig};
    use crate::tensor::{log_softmax, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(vocab: usize, seed: u64) -> Swifter {
        let fusion = FusionConfig {
            n_enc: 1,
            n_dec: 2,
            hidden: 8,
            ff_size: 16,
            heads: 2,
            vocab_size: vocab,
            max_len: 8,
            gamma: 0.9,
            theta_base: 10_000.0,
            d_m: 5,
            tie_embeddings: false,
        };
        let mut m = Swifter::new(
            SwifterConfig {
                backbone: None,
                fusion,
            },
            seed,
        )
        .unwrap();
        // sharpen the output distribution
        let cls = m.fusion.classifier.as_ref().unwrap().weight;
        let w = m.store.get(cls).scale(60.0);
        *m.store.get_mut(cls) = w;
        m
    }

    fn feats(seed: u64) -> Tensor {
        Tensor::randn(&[3, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn greedy_matches_stateless_rerun() {
        for seed in 0..5 {
            let m = model(9, seed);
            let x = feats(seed + 100);
            let g = greedy_decode(&m, &x, 7).unwrap();
            let mut prefix = vec![BOS];
            let mut want = Vec::new();
            for _ in 0..7 {
                let logits = m.forward(&x, &prefix).unwrap();
                let last = logits.row(prefix.len() - 1).to_vec();
                let t = argmax(&last);
                want.push(t);
                prefix.push(t);
                if t == EOS {
                    break;
                }
            }
            assert_eq!(g.tokens, want);
            assert_eq!(greedy_decode(&m, &x, 7).unwrap(), g);
            // summed step log-probs equal the teacher-forced log-prob
            let logits = m.forward(&x, &g.with_bos()).unwrap();
            let lp = log_softmax(&logits);
            let tf: f64 = g.tokens.iter().enumerate().map(|(t, &tok)| lp.at(t, tok)).sum();
            assert!((tf - g.total_logprob()).abs() <= 1e-9);
            assert!(g.step_flops.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn forced_eos_stops_after_one_token() {
        let mut m = model(9, 1);
        let b = m.fusion.classifier.as_ref().unwrap().bias.unwrap();
        m.store.get_mut(b).data_mut()[EOS] = 1e6;
        let g = greedy_decode(&m, &feats(2), 7).unwrap();
        assert_eq!(g.tokens, vec![EOS]);
    }

    #[test]
    fn beam_of_one_is_greedy() {
        for seed in 0..4 {
            let m = model(9, seed);
            let x = feats(seed + 50);
            let g = greedy_decode(&m, &x, 6).unwrap();
            let b = beam_search(&m, &x, 1, 6, 0.0).unwrap();
            assert_eq!(b.len(), 1);
            assert_eq!(b[0].tokens, g.tokens);
            assert!((b[0].logprob - g.total_logprob()).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_finds_exhaustive_optimum() {
        let mut m = model(4, 3);
        let cls = m.fusion.classifier.as_ref().unwrap().weight;
        let w = m.store.get(cls).scale(1.0 / 60.0);
        *m.store.get_mut(cls) = w;
        let x = feats(4);
        let max_len = 3;
        let hyps = beam_search(&m, &x, 4 * max_len, max_len, 0.0).unwrap();
        assert!(hyps.windows(2).all(|w| w[0].score >= w[1].score));
        // all sequences that end in EOS or stop at max_len
        let mut best = (f64::NEG_INFINITY, Vec::new());
        let mut stack = vec![vec![BOS]];
        while let Some(prefix) = stack.pop() {
            let logits = m.forward(&x, &prefix).unwrap();
            let lp = log_softmax(&logits);
            let base: f64 = prefix[1..]
                .iter()
                .enumerate()
                .map(|(t, &tok)| lp.at(t, tok))
                .sum();
            let last = prefix.len() - 1;
            for tok in 0..4 {
                let mut seq = prefix.clone();
                seq.push(tok);
                let total = base + lp.at(last, tok);
                if tok == EOS || seq.len() - 1 == max_len {
                    if total > best.0 {
                        best = (total, seq[1..].to_vec());
                    }
                } else {
                    stack.push(seq);
                }
            }
        }
        assert_eq!(hyps[0].tokens, best.1);
        assert!((hyps[0].logprob - best.0).abs() < 1e-9);
    }

    #[test]
    fn beam_rejects_oversized_beam() {
        let m = model(5, 1);
        assert!(matches!(
            beam_search(&m, &feats(1), 16, 3, 0.0),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn sampling_is_seeded() {
        let m = model(9, 2);
        let x = feats(3);
        let a = sample_decode(&m, &x, 6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_decode(&m, &x, 6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.tokens.len() <= 6);
    }

    #[test]
    fn batch_decode_matches_single() {
        let m = model(9, 5);
        let xs: Vec<Tensor> = (0..4).map(feats).collect();
        let batch = greedy_decode_batch(&m, &xs, 5).unwrap();
        for (x, d) in xs.iter().zip(&batch) {
            assert_eq!(&greedy_decode(&m, x, 5).unwrap(), d);
        }
    }
}
