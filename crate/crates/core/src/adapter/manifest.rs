//! Text format describing a model's module tree.
//!
//! ```text
//! # comment
//! config hidden_size=4096 vocab_size=32000
//! model: module
//!   embed_tokens: embedding shape=32000x4096
//!   layers: module_list len=32
//!   norm: norm shape=4096
//! lm_head: linear shape=32000x4096
//! ```
//!
//! Grammar, one item per line:
//!
//! ```text
//! line   := indent (config | node)
//! indent := ("  ")*                    two spaces per nesting level
//! config := "config" (" " key "=" uint)*   key in {hidden_size, vocab_size}; top level, once
//! node   := name ":" " " kind (" " attr)*
//! name   := [A-Za-z0-9_]+
//! kind   := module | module_list | linear | embedding | norm
//! attr   := "len=" uint | "shape=" uint ("x" uint)?
//! ```
//!
//! A node's children are the following lines indented one level deeper.
//! `module_list` requires `len=`; it may list up to `len` children (one
//! representative block is common). `linear` and `embedding` shapes are `rows x cols`
//! (rows = output features / vocabulary entries); `norm` shapes are a
//! single width. Blank lines and `#` comment lines are ignored.

use std::fmt;

use super::AdapterError;

/// Maximum nesting depth accepted by the parser.
pub const MAX_DEPTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Module,
    ModuleList,
    Linear,
    Embedding,
    Norm,
}

impl NodeKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "module" => Self::Module,
            "module_list" => Self::ModuleList,
            "linear" => Self::Linear,
            "embedding" => Self::Embedding,
            "norm" => Self::Norm,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Module => "module",
            Self::ModuleList => "module_list",
            Self::Linear => "linear",
            Self::Embedding => "embedding",
            Self::Norm => "norm",
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestNode {
    pub name: String,
    pub kind: NodeKind,
    /// `[rows, cols]` for linear/embedding, `[width]` for norm.
    pub shape: Option<Vec<usize>>,
    /// Block count of a module list.
    pub len: Option<usize>,
    pub children: Vec<ManifestNode>,
}

impl ManifestNode {
    pub fn rows(&self) -> Option<usize> {
        self.shape.as_ref().and_then(|s| s.first().copied())
    }

    pub fn child(&self, name: &str) -> Option<&ManifestNode> {
        self.children.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ManifestConfig {
    pub hidden_size: Option<usize>,
    pub vocab_size: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModelManifest {
    pub config: ManifestConfig,
    /// Top-level attributes of the model object.
    pub roots: Vec<ManifestNode>,
}

impl ModelManifest {
    /// Resolve a dot-separated attribute path.
    pub fn get(&self, path: &str) -> Option<&ManifestNode> {
        let mut parts = path.split('.');
        let first = parts.next()?;
        let mut node = self.roots.iter().find(|n| n.name == first)?;
        for p in parts {
            node = node.child(p)?;
        }
        Some(node)
    }

    /// Every node with its dot-separated path, in declaration (pre-)order.
    pub fn walk(&self) -> Vec<(String, &ManifestNode)> {
        fn visit<'a>(prefix: &str, n: &'a ManifestNode, out: &mut Vec<(String, &'a ManifestNode)>) {
            let path = if prefix.is_empty() {
                n.name.clone()
            } else {
                format!("{prefix}.{}", n.name)
            };
            out.push((path.clone(), n));
            for c in &n.children {
                visit(&path, c, out);
            }
        }
        let mut out = Vec::new();
        for r in &self.roots {
            visit("", r, &mut out);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, AdapterError> {
        let mut config: Option<ManifestConfig> = None;
        let mut flat: Vec<(usize, usize, ManifestNode)> = Vec::new();
        let mut prev_depth: Option<usize> = None;

        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let err = |msg: String| AdapterError::Parse { line: lineno, msg };
            let trimmed = raw.trim_end();
            let body = trimmed.trim_start_matches(' ');
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            if body.starts_with('\t') {
                return Err(err("tabs are not allowed in indentation".into()));
            }
            let indent = trimmed.len() - body.len();
            if indent % 2 != 0 {
                return Err(err(format!(
                    "indentation of {indent} spaces is not a multiple of 2"
                )));
            }
            let depth = indent / 2;

            if let Some(rest) = body
                .strip_prefix("config")
                .filter(|r| r.is_empty() || r.starts_with(' '))
            {
                if depth != 0 {
                    return Err(err("config must be at top level".into()));
                }
                if config.is_some() {
                    return Err(err("duplicate config line".into()));
                }
                config = Some(parse_config(rest, lineno)?);
                continue;
            }

            let max_depth = prev_depth.map_or(0, |d| d + 1);
            if depth > max_depth {
                return Err(err(format!(
                    "indentation jumps to depth {depth}, expected at most {max_depth}"
                )));
            }
            if depth >= MAX_DEPTH {
                return Err(err(format!("nesting deeper than {MAX_DEPTH}")));
            }
            flat.push((depth, lineno, parse_node(body, lineno)?));
            prev_depth = Some(depth);
        }

        let mut pos = 0;
        let roots = build(&mut flat, &mut pos, 0)?;
        Ok(Self {
            config: config.unwrap_or_default(),
            roots,
        })
    }
}

fn parse_uint(s: &str, line: usize, what: &str) -> Result<usize, AdapterError> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(AdapterError::Parse {
            line,
            msg: format!("{what} expects an unsigned integer, got `{s}`"),
        });
    }
    s.parse().map_err(|_| AdapterError::Parse {
        line,
        msg: format!("{what} value `{s}` is too large"),
    })
}

fn parse_config(rest: &str, line: usize) -> Result<ManifestConfig, AdapterError> {
    let mut cfg = ManifestConfig::default();
    for tok in rest.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| AdapterError::Parse {
            line,
            msg: format!("expected key=value, got `{tok}`"),
        })?;
        let slot = match k {
            "hidden_size" => &mut cfg.hidden_size,
            "vocab_size" => &mut cfg.vocab_size,
            _ => {
                return Err(AdapterError::Parse {
                    line,
                    msg: format!("unknown config key `{k}`"),
                })
            }
        };
        if slot.replace(parse_uint(v, line, k)?).is_some() {
            return Err(AdapterError::Parse {
                line,
                msg: format!("duplicate config key `{k}`"),
            });
        }
    }
    Ok(cfg)
}

fn parse_node(body: &str, line: usize) -> Result<ManifestNode, AdapterError> {
    let err = |msg: String| AdapterError::Parse { line, msg };
    let (name, rest) = body
        .split_once(':')
        .ok_or_else(|| err(format!("expected `name: kind`, got `{body}`")))?;
    if name.is_empty() || !name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_') {
        return Err(err(format!("invalid attribute name `{name}`")));
    }
    if !rest.starts_with(' ') {
        return Err(err("expected a space after `:`".into()));
    }
    let mut toks = rest.split_whitespace();
    let kind_str = toks.next().ok_or_else(|| err("missing node kind".into()))?;
    let kind =
        NodeKind::parse(kind_str).ok_or_else(|| err(format!("unknown node kind `{kind_str}`")))?;
    let mut node = ManifestNode {
        name: name.to_owned(),
        kind,
        shape: None,
        len: None,
        children: Vec::new(),
    };
    for tok in toks {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| err(format!("expected attribute `key=value`, got `{tok}`")))?;
        match k {
            "len" if node.len.is_none() => node.len = Some(parse_uint(v, line, "len")?),
            "shape" if node.shape.is_none() => {
                let dims = v
                    .split('x')
                    .map(|p| parse_uint(p, line, "shape"))
                    .collect::<Result<Vec<_>, _>>()?;
                node.shape = Some(dims);
            }
            "len" | "shape" => return Err(err(format!("duplicate attribute `{k}`"))),
            _ => return Err(err(format!("unknown attribute `{k}`"))),
        }
    }
    match (kind, node.shape.as_ref().map(Vec::len), node.len) {
        (NodeKind::ModuleList, _, None) => Err(err("module_list requires len=".into())),
        (NodeKind::ModuleList, Some(_), _) => Err(err("module_list takes no shape".into())),
        (k, _, Some(_)) if k != NodeKind::ModuleList => Err(err(format!("{k} takes no len"))),
        (NodeKind::Linear | NodeKind::Embedding, Some(n), _) if n != 2 => {
            Err(err(format!("{kind} shape must be ROWSxCOLS")))
        }
        (NodeKind::Norm, Some(n), _) if n != 1 => {
            Err(err("norm shape must be a single width".into()))
        }
        (NodeKind::Module, Some(_), _) => Err(err("module takes no shape".into())),
        _ => Ok(node),
    }
}

/// Assemble consecutive entries at `depth` (and their deeper followers)
/// into sibling nodes.
fn build(
    flat: &mut [(usize, usize, ManifestNode)],
    pos: &mut usize,
    depth: usize,
) -> Result<Vec<ManifestNode>, AdapterError> {
    let mut out: Vec<ManifestNode> = Vec::new();
    while *pos < flat.len() && flat[*pos].0 == depth {
        let line = flat[*pos].1;
        let mut node = std::mem::replace(
            &mut flat[*pos].2,
            ManifestNode {
                name: String::new(),
                kind: NodeKind::Module,
                shape: None,
                len: None,
                children: Vec::new(),
            },
        );
        *pos += 1;
        node.children = build(flat, pos, depth + 1)?;
        if let (NodeKind::ModuleList, Some(len)) = (node.kind, node.len) {
            if node.children.len() > len {
                return Err(AdapterError::Parse {
                    line,
                    msg: format!(
                        "module_list `{}` has len={len} but lists {} children",
                        node.name,
                        node.children.len()
                    ),
                });
            }
        }
        if out.iter().any(|o| o.name == node.name) {
            return Err(AdapterError::Parse {
                line,
                msg: format!("duplicate attribute `{}`", node.name),
            });
        }
        out.push(node);
    }
    Ok(out)
}
