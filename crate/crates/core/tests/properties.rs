use lss::concept_space::{build_category_space, EmbeddingSet, SourceTag};
use lss::encoder::{init_encoder, EncoderConfig};
use lss::numerics::{Rng, Tensor};
use lss::trainer::{
    checkpoint_bytes, checkpoint_from_bytes, ema_update, ConceptSpaces, TrainConfig, TrainerState,
};
use proptest::prelude::*;

fn small() -> EncoderConfig {
    EncoderConfig {
        frames: 2,
        tokens: 2,
        d_in: 3,
        d_embed: 4,
        d_out: 3,
        blocks: 1,
        heads: 1,
        mlp_hidden: 4,
    }
}

fn distance(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).powi(2)))
        .sum::<f64>()
        .sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ema_contracts_by_one_minus_rho(seed in 0u64..1000, rho in 0.001f64..1.0) {
        let t = init_encoder(&small(), &mut Rng::new(seed)).unwrap();
        let s = init_encoder(&small(), &mut Rng::new(seed + 1)).unwrap();
        let before = distance(t.tensors(), s.tensors());
        let tc = TrainConfig { ema_rho: rho, ..TrainConfig::default() };
        let t2 = ema_update(&t, &s, tc.pull_rate()).unwrap();
        let after = distance(t2.tensors(), s.tensors());
        prop_assert!((after - (1.0 - rho) * before).abs() <= 1e-12 * before.max(1.0));
    }

    #[test]
    fn fresh_state_checkpoint_round_trips(seed in 0u64..1000, classes in 2usize..8) {
        let enc = small();
        let params = init_encoder(&enc, &mut Rng::new(seed)).unwrap();
        let mut rng = Rng::new(seed ^ 7);
        let rows: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..enc.d_out).map(|_| rng.normal()).collect())
            .collect();
        let labels: Vec<String> = (0..classes).map(|k| format!("c{k}")).collect();
        let emb = EmbeddingSet::from_rows(labels, &rows, SourceTag::Synthetic).unwrap();
        let spaces = ConceptSpaces {
            category: build_category_space(&emb).unwrap(),
            description: None,
        };
        let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
        cfg.objective.use_description_space = false;
        cfg.objective.use_alignment = false;
        let st = TrainerState::new(params, &spaces, &cfg);
        let bytes = checkpoint_bytes(&st);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        prop_assert_eq!(checkpoint_bytes(&back), bytes);
    }
}
