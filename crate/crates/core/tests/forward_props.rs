use mdm_core::forward::{
    anti_mask_pair, corrupt, elbo_weight, MaskDraw, MaskSchedule, DEFAULT_T_EPSILON,
};
use mdm_core::vocab::{Modality, Sequence, TaskKind, UnifiedVocab};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn text_seq(len: usize) -> (UnifiedVocab, Sequence) {
    let v = UnifiedVocab::build([8, 4, 4]).unwrap();
    let start = v.range(Modality::Text).start;
    let mut tokens = vec![v.task_id(TaskKind::Text)];
    tokens.extend((0..len).map(|i| start + (i % 8) as u32));
    let s = Sequence::from_tokens(&v, tokens).unwrap();
    (v, s)
}

fn schedules() -> impl Strategy<Value = MaskSchedule> {
    prop_oneof![
        Just(MaskSchedule::Linear),
        Just(MaskSchedule::Cosine),
        Just(MaskSchedule::polynomial()),
        Just(MaskSchedule::geometric()),
    ]
}

proptest! {
    #[test]
    fn shared_uniforms_give_nested_masks(seed in any::<u64>(), a in 0.001f64..1.0, b in 0.001f64..1.0, sched in schedules()) {
        let (_, s) = text_seq(40);
        let draw = MaskDraw::sample(s.len(), &mut ChaCha8Rng::seed_from_u64(seed));
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let small = draw.masked_set(&s, lo, &sched);
        let big = draw.masked_set(&s, hi, &sched);
        prop_assert!(small.iter().all(|i| big.contains(i)));
    }

    #[test]
    fn complements_partition_the_maskable_set(seed in any::<u64>(), t in 0.001f64..1.0, sched in schedules()) {
        let (v, s) = text_seq(30);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = anti_mask_pair(&v, &s, t, &sched, &mut rng).unwrap();
        let mut all: Vec<usize> = a.masked.iter().chain(&b.masked).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, s.maskable_positions());
        let m = sched.mask_fraction(t);
        prop_assert!((sched.mask_fraction(b.t) - (1.0 - m)).abs() < 1e-9);
    }

    #[test]
    fn masked_positions_hold_their_modality_mask(seed in any::<u64>(), t in 0.01f64..1.0) {
        let (v, s) = text_seq(20);
        let c = corrupt(&v, &s, t, &MaskSchedule::Linear, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for i in 0..s.len() {
            if c.is_masked(i) {
                prop_assert_eq!(c.tokens[i], v.mask_id(s.modality[i]));
            } else {
                prop_assert_eq!(c.tokens[i], s.tokens[i]);
            }
        }
    }

    #[test]
    fn linear_weight_is_reciprocal_time(t in 0.0011f64..1.0) {
        let w = elbo_weight(t, &MaskSchedule::Linear, DEFAULT_T_EPSILON).unwrap();
        prop_assert!((w * t - 1.0).abs() < 1e-12);
    }
}

#[test]
fn empirical_mask_rate_within_three_sigma() {
    let (v, s) = text_seq(100);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for sched in [
        MaskSchedule::Linear,
        MaskSchedule::Cosine,
        MaskSchedule::polynomial(),
        MaskSchedule::geometric(),
    ] {
        for t in [0.05, 0.3, 0.5, 0.8, 1.0] {
            let draws = 200;
            let mut masked = 0usize;
            for _ in 0..draws {
                masked += corrupt(&v, &s, t, &sched, &mut rng).unwrap().masked.len();
            }
            let n = (draws * 100) as f64;
            let p = sched.mask_fraction(t);
            let sigma = (p * (1.0 - p) / n).sqrt();
            let emp = masked as f64 / n;
            assert!(
                (emp - p).abs() <= 3.0 * sigma + 1e-12,
                "{sched} t={t}: {emp} vs {p}"
            );
        }
    }
}
