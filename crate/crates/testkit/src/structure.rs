//! Structural comparison of the four generator variants by parameter group.
//!
//! A group is one generator block: its kind and the `(suffix, shape)` list of
//! its tensors. Block indices are dropped so an inserted block does not shift
//! the comparison.

use usegan_core::model::{build_model, BlockKind, ModelConfig, Variant};
use usegan_core::{ParamStore, Result};

pub type Group = (BlockKind, Vec<(String, Vec<usize>)>);

fn groups(store: &ParamStore) -> Vec<Group> {
    let mut out: Vec<(String, Group)> = Vec::new();
    for p in store.params() {
        let mut parts = p.name.splitn(4, '.');
        let (_, idx, kind, rest) = (parts.next(), parts.next(), parts.next(), parts.next());
        let key = format!("{}.{}", idx.unwrap_or(""), kind.unwrap_or(""));
        let kind = BlockKind::of_param(&p.name).expect("generator parameter names carry their block kind");
        let entry = (rest.unwrap_or("").to_string(), p.value.shape().to_vec());
        match out.last_mut() {
            Some((k, (_, items))) if *k == key => items.push(entry),
            _ => out.push((key, (kind, vec![entry]))),
        }
    }
    out.into_iter().map(|(_, g)| g).collect()
}

fn params(store: &ParamStore) -> Vec<(String, Vec<usize>)> {
    store.params().iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect()
}

fn without(groups: &[Group], kind: BlockKind) -> Vec<Group> {
    groups.iter().filter(|g| g.0 != kind).cloned().collect()
}

fn shape_of<'a>(g: &'a Group, suffix: &str) -> Option<&'a Vec<usize>> {
    g.1.iter().find(|(s, _)| s == suffix).map(|(_, shape)| shape)
}

/// Problems with the variant family built from `base` (empty when the
/// four variants differ exactly by the USE substitution and the CMHSA insertion).
pub fn row_set_violations(base: &ModelConfig) -> Result<Vec<String>> {
    let mut problems = Vec::new();
    let mut gens = Vec::new();
    let mut discs = Vec::new();
    for v in Variant::ALL {
        let (g, d) = build_model(&ModelConfig { variant: v, ..base.clone() })?;
        gens.push(groups(g.params()));
        discs.push(params(d.params()));
    }
    if Variant::ALL.len() != 4 {
        problems.push(format!("expected 4 variants, found {}", Variant::ALL.len()));
    }
    let [dcgan, use_gan, cmhsa_gan, both] = [&gens[0], &gens[1], &gens[2], &gens[3]];
    let count = |gs: &[Group], k: BlockKind| gs.iter().filter(|g| g.0 == k).count();
    for (v, gs) in Variant::ALL.iter().zip(&gens) {
        let (u, a) = (count(gs, BlockKind::Use), count(gs, BlockKind::Attention));
        let want = (usize::from(v.has_use()), usize::from(v.has_attention()));
        if (u, a) != want {
            problems.push(format!("{v}: {u} USE and {a} CMHSA blocks, expected {want:?}"));
        }
    }

    // USE-GAN: DCGAN with one DeConv block swapped for a USE block whose
    // upsampler and BN have the replaced block's shapes.
    if use_gan.len() != dcgan.len() {
        problems.push("USE-GAN has a different number of blocks than DCGAN".into());
    } else {
        let diffs: Vec<usize> = (0..dcgan.len()).filter(|&i| dcgan[i] != use_gan[i]).collect();
        match diffs[..] {
            [i] if dcgan[i].0 == BlockKind::Deconv && use_gan[i].0 == BlockKind::Use => {
                let (old, new) = (&dcgan[i], &use_gan[i]);
                let same = |a: &str, b: &str| shape_of(old, a).is_some() && shape_of(old, a) == shape_of(new, b);
                if !same("weight", "upsample.weight") {
                    problems.push("USE upsampler shape differs from the replaced DeConv".into());
                }
                for bn in ["bn.gamma", "bn.beta", "bn.running_mean", "bn.running_var"] {
                    if !same(bn, bn) {
                        problems.push(format!("USE block {bn} differs from the replaced block"));
                    }
                }
                let extra: Vec<&str> = new
                    .1
                    .iter()
                    .map(|(s, _)| s.as_str())
                    .filter(|s| !s.starts_with("upsample.") && !s.starts_with("bn."))
                    .collect();
                if extra.iter().any(|s| !s.starts_with("excite_")) {
                    problems.push(format!("USE block carries unexpected tensors {extra:?}"));
                }
            }
            _ => problems.push(format!("USE-GAN differs from DCGAN in blocks {diffs:?}, expected one DeConv→USE swap")),
        }
    }

    // CMHSA-GAN: DCGAN plus exactly one inserted attention block.
    if without(cmhsa_gan, BlockKind::Attention) != *dcgan {
        problems.push("CMHSA-GAN without its attention block differs from DCGAN".into());
    }
    // USE-CMHSA-GAN: both edits, nothing else.
    if without(both, BlockKind::Attention) != *use_gan {
        problems.push("USE-CMHSA-GAN without attention differs from USE-GAN".into());
    }
    if both.iter().filter(|g| g.0 == BlockKind::Attention).collect::<Vec<_>>()
        != cmhsa_gan.iter().filter(|g| g.0 == BlockKind::Attention).collect::<Vec<_>>()
    {
        problems.push("USE-CMHSA-GAN attention block differs from CMHSA-GAN's".into());
    }
    if discs.iter().any(|d| *d != discs[0]) {
        problems.push("discriminators differ across variants".into());
    }
    Ok(problems)
}
