use lfprobe_web::{kendall_demo_json, pca_demo_json, sae_demo_json, DemoError, SaeDemoParams};
use serde_json::Value;

fn params() -> SaeDemoParams {
    SaeDemoParams {
        n_features: 8,
        dim: 8,
        hidden_size: 16,
        alpha: 0.001,
        n_examples: 3_200,
        tied: true,
        seed: 5,
    }
}

#[test]
fn sae_demo_reports_trace_and_recovery() {
    let v: Value = serde_json::from_str(&sae_demo_json(params()).unwrap()).unwrap();
    let trace = v["trace"].as_array().unwrap();
    assert!(trace.len() > 2);
    assert_eq!(trace.last().unwrap()["examples_seen"], 3_200);
    let per_feature = v["per_feature"].as_array().unwrap();
    assert_eq!(per_feature.len(), 8);
    let mean = v["mean_mmcs"].as_f64().unwrap();
    assert!((0.0..=1.0 + 1e-12).contains(&mean));
}

#[test]
fn sae_demo_is_deterministic() {
    assert_eq!(
        sae_demo_json(params()).unwrap(),
        sae_demo_json(params()).unwrap()
    );
}

#[test]
fn sae_demo_rejects_oversized_requests() {
    let big = SaeDemoParams {
        n_examples: 10_000_000,
        ..params()
    };
    assert!(matches!(sae_demo_json(big), Err(DemoError::Input(_))));
    let wide = SaeDemoParams {
        n_features: 17,
        ..params()
    };
    assert!(matches!(sae_demo_json(wide), Err(DemoError::Input(_))));
}

#[test]
fn kendall_demo_matches_hand_count() {
    // pairs: (1,2) c, (1,3) c, (2,3) d
    let v: Value = serde_json::from_str(&kendall_demo_json("1 2 3", "1, 3, 2").unwrap()).unwrap();
    assert_eq!(v["concordant"], 2);
    assert_eq!(v["discordant"], 1);
    assert!((v["tau"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn kendall_demo_surfaces_core_errors() {
    assert!(matches!(
        kendall_demo_json("1 2", "1 2 3"),
        Err(DemoError::Core(_))
    ));
    assert!(matches!(
        kendall_demo_json("1 a", "1 2"),
        Err(DemoError::Input(_))
    ));
}

#[test]
fn pca_demo_separates_polarities() {
    let v: Value = serde_json::from_str(&pca_demo_json(400, 16, 2.0, 0.05, 9).unwrap()).unwrap();
    assert!(v["explained_variance_ratio"][0].as_f64().unwrap() > 0.8);
    let points = v["points"].as_array().unwrap();
    assert_eq!(points.len(), 400);
    // the sign of pc1 alone classifies every sample (up to a global flip)
    let agree = points
        .iter()
        .filter(|p| (p[0].as_f64().unwrap() > 0.0) == (p[2].as_f64().unwrap() > 0.0))
        .count();
    assert!(agree == 0 || agree == points.len(), "agree = {agree}");
}
