//! Structural probing of a model manifest: which attribute paths hold the
//! decoder blocks, the final norm, the LM head and the token embedding.

mod manifest;

use std::fmt;
use std::sync::{Arc, RwLock};

pub use manifest::{ManifestConfig, ManifestNode, ModelManifest, NodeKind, MAX_DEPTH};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AdapterError {
    #[error("manifest line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("could not resolve {component}: {reason}")]
    Missing {
        component: Component,
        reason: String,
    },
    #[error("ambiguous {component}: {candidates:?} all match")]
    Ambiguous {
        component: Component,
        candidates: Vec<String>,
    },
    #[error("adapter `{0}` is already registered")]
    DuplicateAdapter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    Layers,
    FinalNorm,
    LmHead,
    Embedding,
    HiddenDim,
}

impl Component {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Layers => "layers",
            Self::FinalNorm => "final_norm",
            Self::LmHead => "lm_head",
            Self::Embedding => "embedding",
            Self::HiddenDim => "hidden_dim",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const LAYER_PATHS: [&str; 5] = [
    "model.layers",
    "transformer.h",
    "transformer.layers",
    "gpt_neox.layers",
    "model.decoder.layers",
];

pub const FINAL_NORM_PATHS: [&str; 5] = [
    "model.norm",
    "transformer.ln_f",
    "transformer.final_layernorm",
    "gpt_neox.final_layer_norm",
    "model.decoder.final_layer_norm",
];

pub const LM_HEAD_PATHS: [&str; 2] = ["lm_head", "embed_out"];

pub const EMBEDDING_PATHS: [&str; 5] = [
    "model.embed_tokens",
    "transformer.wte",
    "transformer.word_embeddings",
    "gpt_neox.embed_in",
    "model.decoder.embed_tokens",
];

/// Where the hidden width comes from.
pub const HIDDEN_DIM_PATH: &str = "config.hidden_size";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolutionMethod {
    NamedPath,
    FallbackHeuristic,
    Custom,
}

impl ResolutionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::NamedPath => "named-path",
            Self::FallbackHeuristic => "fallback-heuristic",
            Self::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolved {
    pub path: String,
    pub method: ResolutionMethod,
}

impl Resolved {
    fn named(path: &str) -> Self {
        Self {
            path: path.to_owned(),
            method: ResolutionMethod::NamedPath,
        }
    }

    fn fallback(path: String) -> Self {
        Self {
            path,
            method: ResolutionMethod::FallbackHeuristic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterMap {
    /// `builtin` or the name a custom resolver was registered under.
    pub adapter: String,
    pub layers: Resolved,
    pub num_layers: usize,
    pub final_norm: Resolved,
    pub lm_head: Resolved,
    pub embedding: Resolved,
    pub hidden_dim: usize,
    pub hidden_dim_method: ResolutionMethod,
}

impl AdapterMap {
    pub fn all_named(&self) -> bool {
        [
            self.layers.method,
            self.final_norm.method,
            self.lm_head.method,
            self.embedding.method,
            self.hidden_dim_method,
        ]
        .iter()
        .all(|m| *m == ResolutionMethod::NamedPath)
    }
}

impl fmt::Display for AdapterMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "adapter={}", self.adapter)?;
        for (key, r) in [
            ("layers", &self.layers),
            ("final_norm", &self.final_norm),
            ("lm_head", &self.lm_head),
            ("embedding", &self.embedding),
        ] {
            writeln!(f, "{key}={}", r.path)?;
            writeln!(f, "{key}.method={}", r.method.as_str())?;
        }
        writeln!(f, "num_layers={}", self.num_layers)?;
        writeln!(f, "hidden_dim={}", self.hidden_dim)?;
        writeln!(f, "hidden_dim.method={}", self.hidden_dim_method.as_str())
    }
}

fn first_named<'a>(manifest: &ModelManifest, paths: &[&'a str], kind: NodeKind) -> Option<&'a str> {
    paths
        .iter()
        .copied()
        .find(|p| manifest.get(p).is_some_and(|n| n.kind == kind))
}

fn under(path: &str, prefix: &str) -> bool {
    path.len() > prefix.len() && path.starts_with(prefix) && path.as_bytes()[prefix.len()] == b'.'
}

fn resolve_layers(m: &ModelManifest) -> Result<(Resolved, usize), AdapterError> {
    if let Some(p) = first_named(m, &LAYER_PATHS, NodeKind::ModuleList) {
        return Ok((
            Resolved::named(p),
            m.get(p).and_then(|n| n.len).unwrap_or(0),
        ));
    }
    let lists: Vec<(String, usize)> = m
        .walk()
        .into_iter()
        .filter(|(_, n)| n.kind == NodeKind::ModuleList)
        .map(|(p, n)| (p, n.len.unwrap_or(0)))
        .collect();
    let Some(max) = lists.iter().map(|(_, l)| *l).max() else {
        return Err(AdapterError::Missing {
            component: Component::Layers,
            reason: "no known layer path and no module_list in the manifest".into(),
        });
    };
    let mut best: Vec<(String, usize)> = lists.into_iter().filter(|(_, l)| *l == max).collect();
    if best.len() > 1 {
        return Err(AdapterError::Ambiguous {
            component: Component::Layers,
            candidates: best.into_iter().map(|(p, _)| p).collect(),
        });
    }
    let (path, len) = best.pop().expect("nonempty");
    Ok((Resolved::fallback(path), len))
}

/// Norm siblings of the layer list; those declared after it win over those
/// declared before it.
fn resolve_final_norm(m: &ModelManifest, layers: &str) -> Result<Resolved, AdapterError> {
    if let Some(p) = first_named(m, &FINAL_NORM_PATHS, NodeKind::Norm) {
        return Ok(Resolved::named(p));
    }
    let (parent, name) = match layers.rsplit_once('.') {
        Some((parent, name)) => (Some(parent), name),
        None => (None, layers),
    };
    let siblings: &[ManifestNode] = match parent {
        Some(p) => m.get(p).map_or(&[], |n| n.children.as_slice()),
        None => &m.roots,
    };
    let join = |n: &ManifestNode| match parent {
        Some(p) => format!("{p}.{}", n.name),
        None => n.name.clone(),
    };
    let idx = siblings.iter().position(|n| n.name == name).unwrap_or(0);
    let (before, after) = siblings.split_at(idx);
    for group in [after, before] {
        let norms: Vec<String> = group
            .iter()
            .filter(|n| n.kind == NodeKind::Norm)
            .map(join)
            .collect();
        match norms.len() {
            0 => continue,
            1 => return Ok(Resolved::fallback(norms.into_iter().next().expect("one"))),
            _ => {
                return Err(AdapterError::Ambiguous {
                    component: Component::FinalNorm,
                    candidates: norms,
                })
            }
        }
    }
    Err(AdapterError::Missing {
        component: Component::FinalNorm,
        reason: format!("no known norm path and no norm sibling of `{layers}`"),
    })
}

/// Nodes of `kind` whose row count equals the vocabulary size. Candidates
/// outside the layer stack are preferred; more than one → ambiguity.
fn resolve_by_vocab(
    m: &ModelManifest,
    component: Component,
    paths: &[&str],
    kind: NodeKind,
    layers: &str,
) -> Result<Resolved, AdapterError> {
    if let Some(p) = first_named(m, paths, kind) {
        return Ok(Resolved::named(p));
    }
    let Some(vocab) = m.config.vocab_size else {
        return Err(AdapterError::Missing {
            component,
            reason: "no known path and config has no vocab_size for shape matching".into(),
        });
    };
    let all: Vec<String> = m
        .walk()
        .into_iter()
        .filter(|(_, n)| n.kind == kind && n.rows() == Some(vocab))
        .map(|(p, _)| p)
        .collect();
    let outside: Vec<String> = all.iter().filter(|p| !under(p, layers)).cloned().collect();
    let mut pick = if outside.is_empty() { all } else { outside };
    match pick.len() {
        0 => Err(AdapterError::Missing {
            component,
            reason: format!("no known path and no {kind} with {vocab} rows"),
        }),
        1 => Ok(Resolved::fallback(pick.pop().expect("one"))),
        _ => Err(AdapterError::Ambiguous {
            component,
            candidates: pick,
        }),
    }
}

/// Built-in prioritized path search with fallbacks.
pub fn probe_builtin(m: &ModelManifest) -> Result<AdapterMap, AdapterError> {
    let (layers, num_layers) = resolve_layers(m)?;
    let final_norm = resolve_final_norm(m, &layers.path)?;
    let lm_head = resolve_by_vocab(
        m,
        Component::LmHead,
        &LM_HEAD_PATHS,
        NodeKind::Linear,
        &layers.path,
    )?;
    let embedding = resolve_by_vocab(
        m,
        Component::Embedding,
        &EMBEDDING_PATHS,
        NodeKind::Embedding,
        &layers.path,
    )?;
    let hidden_dim =
        m.config
            .hidden_size
            .filter(|&h| h > 0)
            .ok_or_else(|| AdapterError::Missing {
                component: Component::HiddenDim,
                reason: format!("{HIDDEN_DIM_PATH} is absent"),
            })?;
    Ok(AdapterMap {
        adapter: "builtin".into(),
        layers,
        num_layers,
        final_norm,
        lm_head,
        embedding,
        hidden_dim,
        hidden_dim_method: ResolutionMethod::NamedPath,
    })
}

/// A custom resolver returns `None` for manifests it does not recognise.
pub type Resolver = Arc<dyn Fn(&ModelManifest) -> Option<AdapterMap> + Send + Sync>;

/// Custom resolvers, consulted in registration order before the built-in
/// search.
#[derive(Default)]
pub struct AdapterRegistry {
    custom: RwLock<Vec<(String, Resolver)>>,
}

impl fmt::Debug for AdapterRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.names();
        f.debug_struct("AdapterRegistry")
            .field("custom", &names)
            .finish()
    }
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> Vec<String> {
        let guard = self.custom.read().unwrap_or_else(|e| e.into_inner());
        guard.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn register_adapter<F>(&self, name: &str, resolver: F) -> Result<(), AdapterError>
    where
        F: Fn(&ModelManifest) -> Option<AdapterMap> + Send + Sync + 'static,
    {
        let mut guard = self.custom.write().unwrap_or_else(|e| e.into_inner());
        if guard.iter().any(|(n, _)| n == name) {
            return Err(AdapterError::DuplicateAdapter(name.to_owned()));
        }
        guard.push((name.to_owned(), Arc::new(resolver)));
        Ok(())
    }

    pub fn probe(&self, manifest: &ModelManifest) -> Result<AdapterMap, AdapterError> {
        let resolvers: Vec<(String, Resolver)> = {
            let guard = self.custom.read().unwrap_or_else(|e| e.into_inner());
            guard.clone()
        };
        for (name, resolver) in resolvers {
            if let Some(mut map) = resolver(manifest) {
                map.adapter = name;
                return Ok(map);
            }
        }
        probe_builtin(manifest)
    }
}

/// Probe with no custom adapters.
pub fn probe(manifest: &ModelManifest) -> Result<AdapterMap, AdapterError> {
    probe_builtin(manifest)
}
