mod common;

use common::{random_tensor, rng};
use sapa_core::grad::{GradcheckCase, GradcheckOptions, ParamGroup};
use sapa_core::{gradcheck, sapa_backward, NormKind, SapaParams, SimilarityKind, UpsamplerConfig};

fn config(kind: SimilarityKind, k: usize, d: usize) -> UpsamplerConfig {
    UpsamplerConfig {
        similarity: kind,
        norm: NormKind::Exp,
        kernel_size: k,
        embed_dim: d,
        ratio: 2,
    }
}

#[test]
fn gated_5x5x3_instance() {
    let case = GradcheckCase::random(42, config(SimilarityKind::Gated, 5, 3), 5, 5, 3);
    let rep = gradcheck(&case, &GradcheckOptions::default()).unwrap();
    assert!(rep.passed(), "{rep:?}");
    let groups: Vec<_> = rep.groups.iter().map(|g| g.group).collect();
    assert!(groups.contains(&ParamGroup::GateW) && groups.contains(&ParamGroup::GateBias));
}

#[test]
fn windows_overhanging_every_edge() {
    // A 2x3 decoder with K=7 reads past all four borders from every centre.
    for kind in SimilarityKind::ALL {
        let case = GradcheckCase::random(9, config(kind, 7, 2), 2, 3, 3);
        let rep = gradcheck(&case, &GradcheckOptions::default()).unwrap();
        assert!(rep.passed(), "{kind}: {rep:?}");
    }
}

#[test]
fn ratio_three_and_expanded_gate() {
    let mut cfg = config(SimilarityKind::Gated, 3, 2);
    cfg.ratio = 3;
    let mut case = GradcheckCase::random(5, cfg, 3, 3, 3);
    case.params = case.params.clone().with_separate_self_projection(2);
    let rep = gradcheck(&case, &GradcheckOptions::default()).unwrap();
    assert!(rep.groups.iter().any(|g| g.group == ParamGroup::ProjSelf));
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn backward_is_linear_in_the_cotangent() {
    let mut r = rng(3);
    let dec = random_tensor(4, 4, 3, &mut r);
    let enc = random_tensor(8, 8, 3, &mut r);
    let g1 = random_tensor(8, 8, 3, &mut r);
    let g2 = random_tensor(8, 8, 3, &mut r);
    let (a, b) = (0.7, -1.9);
    let combo = sapa_core::Tensor::from_vec(
        8,
        8,
        3,
        g1.data()
            .iter()
            .zip(g2.data())
            .map(|(x, y)| a * x + b * y)
            .collect(),
    )
    .unwrap();
    let params = SapaParams::seeded(3, 3, 2, 8);
    for kind in SimilarityKind::ALL {
        let cfg = config(kind, 3, 2);
        let r1 = sapa_backward(&enc, &dec, &params, &cfg, &g1).unwrap();
        let r2 = sapa_backward(&enc, &dec, &params, &cfg, &g2).unwrap();
        let rc = sapa_backward(&enc, &dec, &params, &cfg, &combo).unwrap();
        for group in ParamGroup::active(kind, &params) {
            for ((x, y), z) in r1
                .group(group)
                .iter()
                .zip(r2.group(group))
                .zip(rc.group(group))
            {
                assert!((a * x + b * y - z).abs() < 1e-10, "{kind} {}", group.name());
            }
        }
    }
}
