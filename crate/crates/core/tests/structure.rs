use proptest::prelude::*;
use usegan_core::model::{ModelConfig, Variant};
use usegan_testkit::structure::row_set_violations;

#[test]
fn default_variants_differ_only_by_their_edits() {
    assert_eq!(row_set_violations(&ModelConfig::default()).unwrap(), Vec::<String>::new());
}

#[test]
fn exactly_four_variants_in_table_order() {
    let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
    assert_eq!(names, ["DCGAN", "USE-GAN", "CMHSA-GAN", "USE-CMHSA-GAN"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn edits_stay_isolated_for_any_stage(log_side in 4u32..7, use_pick in 0usize..8, attn_pick in 0usize..8, width in 1usize..5) {
        let side = 1usize << log_side;
        // Allowed stages: USE 4..=S/4, attention 4..=S/2.
        let use_stages: Vec<usize> = (2..log_side - 1).map(|k| 1 << k).collect();
        let attn_stages: Vec<usize> = (2..log_side).map(|k| 1 << k).collect();
        let cfg = ModelConfig {
            image_side: side,
            width: 2 * width,
            latent_dim: 5,
            num_heads: 2,
            use_stage: Some(use_stages[use_pick % use_stages.len()]),
            attention_stage: Some(attn_stages[attn_pick % attn_stages.len()]),
            ..ModelConfig::default()
        };
        prop_assert_eq!(row_set_violations(&cfg).unwrap(), Vec::<String>::new());
    }
}
