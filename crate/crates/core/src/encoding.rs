//! Text embeddings, task queries and the extensible role registry.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::kernel::Array;

pub const DEFAULT_RAW_DIM: usize = 384;

#[derive(Debug, thiserror::Error)]
pub enum EncodingError {
    #[error("input error: {0}")]
    Input(String),
    #[error("no embedding stored for text {0:?}")]
    Lookup(String),
    #[error("role `{0}` is already registered")]
    Conflict(String),
    #[error("embedding has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

/// Maps text to a unit-length vector of fixed width.
#[derive(Debug, Clone)]
pub enum EmbeddingProvider {
    /// Signed feature hashing of lowercase word tokens.
    Hashed { dim: usize },
    /// Externally computed vectors looked up by exact text.
    FileBacked {
        dim: usize,
        table: HashMap<String, Vec<f32>>,
    },
}

impl Default for EmbeddingProvider {
    fn default() -> Self {
        Self::Hashed { dim: DEFAULT_RAW_DIM }
    }
}

#[derive(Deserialize)]
struct EmbeddingLine {
    text: String,
    embedding: Vec<f32>,
}

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl EmbeddingProvider {
    pub fn hashed(dim: usize) -> Self {
        Self::Hashed { dim }
    }

    /// Reads a JSON Lines file of `{"text", "embedding"}` records.
    pub fn from_jsonl(path: &Path, dim: usize) -> Result<Self, EncodingError> {
        let file_err = |message: String| EncodingError::File {
            path: path.display().to_string(),
            message,
        };
        let file = std::fs::File::open(path).map_err(|e| file_err(e.to_string()))?;
        let mut table = HashMap::new();
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| file_err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingLine =
                serde_json::from_str(&line).map_err(|e| file_err(format!("line {}: {e}", n + 1)))?;
            if rec.embedding.len() != dim {
                return Err(file_err(format!(
                    "line {}: embedding has {} values, expected {dim}",
                    n + 1,
                    rec.embedding.len()
                )));
            }
            table.insert(rec.text, rec.embedding);
        }
        Ok(Self::FileBacked { dim, table })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Hashed { dim } | Self::FileBacked { dim, .. } => *dim,
        }
    }

    pub fn embed(&self, text: &str) -> Result<Array, EncodingError> {
        if text.trim().is_empty() {
            return Err(EncodingError::Input("text is empty".into()));
        }
        let raw = match self {
            Self::Hashed { dim } => hashed_counts(text, *dim),
            Self::FileBacked { table, .. } => table
                .get(text)
                .cloned()
                .ok_or_else(|| EncodingError::Lookup(text.to_string()))?,
        };
        Ok(Array::vector(l2_normalize(raw)))
    }
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn hashed_counts(text: &str, dim: usize) -> Vec<f32> {
    let mut v = vec![0.0f32; dim];
    let mut any = false;
    for tok in tokens(text) {
        any = true;
        add_token(&mut v, &tok);
    }
    if !any {
        // punctuation-only text still gets a stable vector
        add_token(&mut v, text.trim());
    }
    v
}

/// Signed hash features per token.
const HASHES_PER_TOKEN: u64 = 4;

fn add_token(v: &mut [f32], tok: &str) {
    for k in 0..HASHES_PER_TOKEN {
        let h = mix(fnv1a(tok.as_bytes(), k.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        let bucket = ((h >> 1) % v.len() as u64) as usize;
        let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn l2_normalize(mut v: Vec<f32>) -> Vec<f32> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x as f64 / norm) as f32);
    }
    v
}

/// Natural-language task description, optionally carrying its own raw embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskQuery {
    text: String,
    precomputed: Option<Array>,
}

impl TaskQuery {
    pub fn new(text: impl Into<String>) -> Result<Self, EncodingError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(EncodingError::Input("query text is empty".into()));
        }
        Ok(Self { text, precomputed: None })
    }

    pub fn with_embedding(text: impl Into<String>, embedding: Array) -> Result<Self, EncodingError> {
        let mut q = Self::new(text)?;
        q.precomputed = Some(embedding);
        Ok(q)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn precomputed(&self) -> Option<&Array> {
        self.precomputed.as_ref()
    }

    /// Raw (pre-projection) embedding: the precomputed one if present.
    pub fn base_embedding(&self, provider: &EmbeddingProvider) -> Result<Array, EncodingError> {
        match &self.precomputed {
            Some(e) if e.len() != provider.dim() => Err(EncodingError::Dimension {
                expected: provider.dim(),
                got: e.len(),
            }),
            Some(e) => Ok(e.clone()),
            None => provider.embed(&self.text),
        }
    }
}

/// Entry of a role-pool file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
}

impl RoleSpec {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            embedding: None,
        }
    }
}

pub fn read_role_pool(path: &Path) -> Result<Vec<RoleSpec>, EncodingError> {
    let text = std::fs::read_to_string(path).map_err(|e| EncodingError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| EncodingError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Role {
    pub name: String,
    pub description: String,
    pub embedding: Array,
}

/// Ordered pool of agent roles with frozen base embeddings.
///
/// Extension appends rows; existing rows never change. The trainable END
/// embedding belongs to the model parameters, not the registry.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleRegistry {
    roles: Vec<Role>,
    dim: usize,
}

impl RoleRegistry {
    pub fn register(provider: &EmbeddingProvider, specs: &[RoleSpec]) -> Result<Self, EncodingError> {
        let empty = Self {
            roles: Vec::new(),
            dim: provider.dim(),
        };
        empty.extend(provider, specs)
    }

    /// Returns a new registry with `specs` appended.
    pub fn extend(&self, provider: &EmbeddingProvider, specs: &[RoleSpec]) -> Result<Self, EncodingError> {
        if provider.dim() != self.dim {
            return Err(EncodingError::Dimension {
                expected: self.dim,
                got: provider.dim(),
            });
        }
        let mut names: HashSet<&str> = self.roles.iter().map(|r| r.name.as_str()).collect();
        for s in specs {
            if s.name.trim().is_empty() {
                return Err(EncodingError::Input("role name is empty".into()));
            }
            if !names.insert(s.name.as_str()) {
                return Err(EncodingError::Conflict(s.name.clone()));
            }
        }
        let mut roles = self.roles.clone();
        for s in specs {
            let embedding = match &s.embedding {
                Some(e) if e.len() != self.dim => {
                    return Err(EncodingError::Dimension {
                        expected: self.dim,
                        got: e.len(),
                    })
                }
                Some(e) => Array::vector(e.clone()),
                None => provider.embed(&role_text(&s.name, &s.description))?,
            };
            roles.push(Role {
                name: s.name.clone(),
                description: s.description.clone(),
                embedding,
            });
        }
        Ok(Self { roles, dim: self.dim })
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn get(&self, index: usize) -> Option<&Role> {
        self.roles.get(index)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.roles.iter().position(|r| r.name == name)
    }

    pub fn description(&self, name: &str) -> Option<&str> {
        self.roles.iter().find(|r| r.name == name).map(|r| r.description.as_str())
    }

    pub fn names(&self) -> Vec<String> {
        self.roles.iter().map(|r| r.name.clone()).collect()
    }

    pub fn to_specs(&self) -> Vec<RoleSpec> {
        self.roles
            .iter()
            .map(|r| RoleSpec {
                name: r.name.clone(),
                description: r.description.clone(),
                embedding: Some(r.embedding.data().to_vec()),
            })
            .collect()
    }

    /// SHA-256 over names, descriptions and embedding bytes, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.roles {
            h.update(r.name.as_bytes());
            h.update([0]);
            h.update(r.description.as_bytes());
            h.update([0]);
            for v in r.embedding.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Text fed to the provider for a role.
pub fn role_text(name: &str, description: &str) -> String {
    format!("{name}: {description}")
}
