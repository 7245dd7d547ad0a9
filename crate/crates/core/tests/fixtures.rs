use std::fs;
use std::path::PathBuf;

use posthoc_core::adapter::{probe, AdapterError, ModelManifest, ResolutionMethod};
use posthoc_core::calibration::{BankMeta, RouterBank};
use posthoc_core::model::ModelConfig;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn rigged() -> RouterBank {
    let meta = BankMeta {
        hidden_dim: 64,
        bottleneck: 32,
        interval: 4,
        tau: 0.98,
        rmsnorm_eps: 1e-6,
        num_layers: 12,
    };
    RouterBank::rigged(meta, &[3, 7, 11], &[7]).unwrap()
}

/// Set `UPDATE_FIXTURES=1` to rewrite the checked-in file.
#[test]
fn rigged_bank_matches_checked_in_file() {
    let path = fixture("rigged.bank");
    let bytes = rigged().to_bytes();
    if std::env::var_os("UPDATE_FIXTURES").is_some() {
        fs::write(&path, &bytes).unwrap();
    }
    let on_disk = fs::read(&path).unwrap();
    assert_eq!(on_disk, bytes);
    let loaded = RouterBank::load(&path).unwrap();
    assert_eq!(loaded.layers(), [3, 7, 11]);
    assert_eq!(on_disk.len(), RouterBank::encoded_len(64, 32, 3));
}

#[test]
fn model_config_fixture_parses() {
    let text = fs::read_to_string(fixture("model.cfg")).unwrap();
    let cfg = ModelConfig::parse(&text).unwrap();
    assert_eq!((cfg.num_layers, cfg.hidden_dim), (12, 64));
}

fn manifest(name: &str) -> ModelManifest {
    let text = fs::read_to_string(fixture(&format!("manifests/{name}.manifest"))).unwrap();
    ModelManifest::parse(&text).unwrap()
}

#[test]
fn reference_manifests_resolve_by_name() {
    for name in ["llama", "gpt2", "gpt_neox", "opt", "falcon"] {
        let map = probe(&manifest(name)).unwrap();
        assert!(map.all_named(), "{name}: {map}");
    }
}

#[test]
fn pathless_manifest_uses_fallbacks() {
    let map = probe(&manifest("pathless")).unwrap();
    assert_eq!(map.layers.path, "backbone.blocks");
    assert_eq!(map.layers.method, ResolutionMethod::FallbackHeuristic);
    assert_eq!(map.num_layers, 24);
    assert_eq!(map.lm_head.path, "readout");
    assert_eq!(map.lm_head.method, ResolutionMethod::FallbackHeuristic);
    assert_eq!(map.embedding.path, "backbone.tokens");
}

#[test]
fn ambiguous_manifest_is_rejected() {
    match probe(&manifest("ambiguous")) {
        Err(AdapterError::Ambiguous {
            component,
            candidates,
        }) => {
            assert_eq!(component.as_str(), "layers");
            assert_eq!(candidates.len(), 2);
        }
        other => panic!("expected ambiguity, got {other:?}"),
    }
}
