//! Text embeddings: backends, a persistent cache and cosine distance.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::provider::{HttpSettings, ProviderError, RetryPolicy};

/// Dimension of [`MockEmbedding`] vectors.
pub const MOCK_DIMENSION: usize = 64;

const CACHE_FORMAT: &str = "qualcode-embedding-cache";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot embed an empty string")]
    EmptyInput,
    #[error("zero vector returned for input {0:?}")]
    ZeroVector(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("backend returned {got} vectors for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("embedding cache: {0}")]
    Cache(String),
}

/// A non-zero vector with its Euclidean norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    values: Vec<f64>,
    norm: f64,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Option<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        (!values.is_empty() && norm > 0.0 && norm.is_finite()).then_some(Self { values, norm })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn scaled(&self, alpha: f64) -> Option<Self> {
        Self::new(self.values.iter().map(|v| v * alpha).collect())
    }

    pub fn normalized(&self) -> Vec<f64> {
        self.values.iter().map(|v| v / self.norm).collect()
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = String;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values).ok_or_else(|| "zero or empty embedding vector".to_string())
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

/// `1 - cos(u, v)`, clamped to `[0, 2]`. Identical vectors give exactly 0.
pub fn cosine_distance(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if u.dim() != v.dim() {
        return Err(EmbeddingError::DimensionMismatch {
            left: u.dim(),
            right: v.dim(),
        });
    }
    // the rounded cosine of a vector with itself can fall just short of 1
    if u.values == v.values {
        return Ok(0.0);
    }
    let dot: f64 = u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum();
    Ok((1.0 - dot / (u.norm * v.norm)).clamp(0.0, 2.0))
}

pub trait EmbeddingBackend: Send + Sync {
    /// Cache namespace, e.g. `openai/text-embedding-3-large`.
    fn id(&self) -> String;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;
}

/// Offline embedding: a unit Gaussian direction seeded by SHA-256 of the input.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockEmbedding;

impl MockEmbedding {
    pub fn vector(text: &str) -> Vec<f64> {
        let seed: [u8; 32] = Sha256::digest(text.as_bytes()).into();
        let mut rng = ChaCha20Rng::from_seed(seed);
        let raw: Vec<f64> = (0..MOCK_DIMENSION).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        raw.into_iter().map(|v| v / norm).collect()
    }
}

impl EmbeddingBackend for MockEmbedding {
    fn id(&self) -> String {
        format!("mock:sha256-gauss-{MOCK_DIMENSION}")
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Ok(texts.iter().map(|t| Self::vector(t)).collect())
    }
}

/// Fixed lookup table, falling back to [`MockEmbedding`] for unknown inputs.
/// Useful for constructing point clouds with known geometry.
#[derive(Debug, Clone, Default)]
pub struct TableEmbedding {
    table: HashMap<String, Vec<f64>>,
}

impl TableEmbedding {
    pub fn new(table: HashMap<String, Vec<f64>>) -> Self {
        Self { table }
    }

    pub fn insert(&mut self, text: impl Into<String>, vector: Vec<f64>) {
        self.table.insert(text.into(), vector);
    }
}

impl EmbeddingBackend for TableEmbedding {
    fn id(&self) -> String {
        "mock:table".into()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Ok(texts
            .iter()
            .map(|t| self.table.get(t).cloned().unwrap_or_else(|| MockEmbedding::vector(t)))
            .collect())
    }
}

/// OpenAI-compatible `/embeddings` adapter.
pub struct HttpEmbedding {
    settings: HttpSettings,
    client: reqwest::blocking::Client,
}

impl HttpEmbedding {
    pub fn new(settings: HttpSettings) -> Result<Self, ProviderError> {
        let client = settings.client()?;
        Ok(Self { settings, client })
    }
}

impl EmbeddingBackend for HttpEmbedding {
    fn id(&self) -> String {
        format!("http:{}", self.settings.model)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let body = json!({ "model": self.settings.model, "input": texts });
        let value = self.settings.post_json(&self.client, "/embeddings", &body)?;
        let data = value["data"]
            .as_array()
            .ok_or_else(|| ProviderError::Rejected("response has no `data` array".into()))?;
        data.iter()
            .map(|item| {
                item["embedding"]
                    .as_array()
                    .and_then(|arr| arr.iter().map(|x| x.as_f64()).collect::<Option<Vec<f64>>>())
                    .ok_or_else(|| ProviderError::Rejected("malformed embedding entry".into()))
            })
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    provider: String,
    input: String,
    vector: Vec<f64>,
}

fn cache_key(provider: &str, input: &str) -> String {
    let mut h = Sha256::new();
    h.update(provider.as_bytes());
    h.update([0u8]);
    h.update(input.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Default)]
struct CacheInner {
    entries: HashMap<String, EmbeddingVector>,
    file: Option<File>,
}

/// Map from `(provider, input)` to vector. When backed by a file, new entries
/// are appended as JSON lines after a version header; a truncated trailing
/// line is ignored on load.
#[derive(Default)]
pub struct EmbeddingCache {
    inner: Mutex<CacheInner>,
    path: Option<PathBuf>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self, EmbeddingError> {
        let cache_err = |e: std::io::Error| EmbeddingError::Cache(format!("{}: {e}", path.display()));
        let mut entries = HashMap::new();
        let content = match std::fs::read_to_string(path) {
            Ok(c) => c,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(cache_err(e)),
        };
        let exists = !content.is_empty();
        if exists {
            let mut lines = content.lines();
            let header: CacheHeader = lines
                .next()
                .and_then(|l| serde_json::from_str(l).ok())
                .ok_or_else(|| EmbeddingError::Cache("missing cache header".into()))?;
            if header.format != CACHE_FORMAT || header.version != CACHE_VERSION {
                return Err(EmbeddingError::Cache(format!(
                    "unsupported cache {} v{}",
                    header.format, header.version
                )));
            }
            for line in lines {
                let Ok(record) = serde_json::from_str::<CacheRecord>(line) else {
                    log::warn!("skipping unreadable embedding cache record");
                    continue;
                };
                if record.key != cache_key(&record.provider, &record.input) {
                    log::warn!("skipping embedding cache record with mismatched key");
                    continue;
                }
                if let Some(v) = EmbeddingVector::new(record.vector) {
                    entries.insert(record.key, v);
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(cache_err)?;
        if !exists {
            let header = CacheHeader {
                format: CACHE_FORMAT.into(),
                version: CACHE_VERSION,
            };
            writeln!(file, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(cache_err)?;
        } else if !content.ends_with('\n') {
            // terminate a torn record so the next append starts on its own line
            writeln!(file).map_err(cache_err)?;
        }
        Ok(Self {
            inner: Mutex::new(CacheInner {
                entries,
                file: Some(file),
            }),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, provider: &str, input: &str) -> Option<EmbeddingVector> {
        let inner = self.inner.lock().expect("cache lock poisoned");
        inner.entries.get(&cache_key(provider, input)).cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock poisoned").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, provider: &str, input: &str, vector: EmbeddingVector) -> Result<(), EmbeddingError> {
        let key = cache_key(provider, input);
        let mut inner = self.inner.lock().expect("cache lock poisoned");
        if inner.entries.contains_key(&key) {
            return Ok(());
        }
        if let Some(file) = inner.file.as_mut() {
            let record = CacheRecord {
                key: key.clone(),
                provider: provider.to_string(),
                input: input.to_string(),
                vector: vector.values().to_vec(),
            };
            let line = serde_json::to_string(&record).map_err(|e| EmbeddingError::Cache(e.to_string()))?;
            writeln!(file, "{line}").map_err(|e| EmbeddingError::Cache(e.to_string()))?;
        }
        inner.entries.insert(key, vector);
        Ok(())
    }
}

/// Backend plus cache plus retry policy. The entry point every metric uses.
pub struct Embedder {
    backend: Box<dyn EmbeddingBackend>,
    cache: EmbeddingCache,
    retry: RetryPolicy,
    batch_size: usize,
}

impl Embedder {
    pub fn new(backend: impl EmbeddingBackend + 'static, cache: EmbeddingCache) -> Self {
        Self {
            backend: Box::new(backend),
            cache,
            retry: RetryPolicy::default(),
            batch_size: 64,
        }
    }

    /// Mock backend with an in-memory cache.
    pub fn mock() -> Self {
        Self::new(MockEmbedding, EmbeddingCache::in_memory())
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn provider_id(&self) -> String {
        self.backend.id()
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    /// One vector per input, in order. Misses are fetched in batches of
    /// distinct strings and cached.
    pub fn embed<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        if texts.iter().any(|t| t.as_ref().is_empty()) {
            return Err(EmbeddingError::EmptyInput);
        }
        let provider = self.backend.id();
        let mut missing: Vec<String> = Vec::new();
        for t in texts {
            let t = t.as_ref();
            if self.cache.get(&provider, t).is_none() && !missing.iter().any(|m| m == t) {
                missing.push(t.to_string());
            }
        }
        for chunk in missing.chunks(self.batch_size) {
            let vectors = self.retry.run(|| self.backend.embed_batch(chunk))?;
            if vectors.len() != chunk.len() {
                return Err(EmbeddingError::CountMismatch {
                    expected: chunk.len(),
                    got: vectors.len(),
                });
            }
            for (input, values) in chunk.iter().zip(vectors) {
                let v = EmbeddingVector::new(values).ok_or_else(|| EmbeddingError::ZeroVector(input.clone()))?;
                self.cache.insert(&provider, input, v)?;
            }
        }
        let out: Vec<EmbeddingVector> = texts
            .iter()
            .map(|t| self.cache.get(&provider, t.as_ref()).expect("cached above"))
            .collect();
        if let Some(first) = out.first() {
            if let Some(bad) = out.iter().find(|v| v.dim() != first.dim()) {
                return Err(EmbeddingError::DimensionMismatch {
                    left: first.dim(),
                    right: bad.dim(),
                });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn self_distance_is_exactly_zero() {
        // without the identity check this gives 2.2e-16
        let a = v(&[0.1, 0.7, -0.3, 0.9, 0.2, -0.6, 0.45, 0.33]);
        assert_eq!(cosine_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn cosine_examples() {
        let a = v(&[1.0, 0.0]);
        assert_eq!(cosine_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(cosine_distance(&a, &v(&[-1.0, 0.0])).unwrap(), 2.0);
        assert!((cosine_distance(&a, &v(&[0.0, 1.0])).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            cosine_distance(&a, &v(&[1.0, 0.0, 0.0])),
            Err(EmbeddingError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_vectors_rejected() {
        assert!(EmbeddingVector::new(vec![0.0, 0.0]).is_none());
        assert!(EmbeddingVector::new(vec![]).is_none());
    }

    #[test]
    fn mock_is_unit_norm_and_deterministic() {
        let a = MockEmbedding::vector("travel frequency");
        let b = MockEmbedding::vector("travel frequency");
        assert_eq!(a, b);
        assert_eq!(a.len(), MOCK_DIMENSION);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_ne!(a, MockEmbedding::vector("travel frequency "));
    }

    #[test]
    fn embed_rejects_empty_input() {
        assert!(matches!(Embedder::mock().embed(&[""]), Err(EmbeddingError::EmptyInput)));
    }

    struct Counting(Arc<AtomicUsize>);

    impl EmbeddingBackend for Counting {
        fn id(&self) -> String {
            "counting".into()
        }
        fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
            self.0.fetch_add(texts.len(), Ordering::SeqCst);
            MockEmbedding.embed_batch(texts)
        }
    }

    #[test]
    fn identical_strings_hit_the_cache() {
        let calls = Arc::new(AtomicUsize::new(0));
        let embedder = Embedder::new(Counting(calls.clone()), EmbeddingCache::in_memory());
        let out = embedder.embed(&["a", "a", "b"]).unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(calls.load(Ordering::SeqCst), 2);
        embedder.embed(&["b", "a"]).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }

    struct Flaky {
        failures_left: AtomicUsize,
    }

    impl EmbeddingBackend for Flaky {
        fn id(&self) -> String {
            "flaky".into()
        }
        fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
            if self.failures_left.load(Ordering::SeqCst) > 0 {
                self.failures_left.fetch_sub(1, Ordering::SeqCst);
                return Err(ProviderError::Unavailable("timeout".into()));
            }
            MockEmbedding.embed_batch(texts)
        }
    }

    #[test]
    fn transient_failures_are_retried_then_surfaced() {
        let ok = Embedder::new(
            Flaky {
                failures_left: AtomicUsize::new(5),
            },
            EmbeddingCache::in_memory(),
        )
        .with_retry(RetryPolicy::immediate(5));
        assert!(ok.embed(&["x"]).is_ok());

        let failing = Embedder::new(
            Flaky {
                failures_left: AtomicUsize::new(6),
            },
            EmbeddingCache::in_memory(),
        )
        .with_retry(RetryPolicy::immediate(5));
        assert!(matches!(
            failing.embed(&["x"]),
            Err(EmbeddingError::Provider(ProviderError::Unavailable(_)))
        ));
    }

    #[test]
    fn disk_cache_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let first = {
            let embedder = Embedder::new(MockEmbedding, EmbeddingCache::open(&path).unwrap());
            embedder.embed(&["x", "y"]).unwrap()
        };
        let calls = Arc::new(AtomicUsize::new(0));
        let cache = EmbeddingCache::open(&path).unwrap();
        assert_eq!(cache.len(), 2);
        // Same provider id as the mock so the records are hits.
        struct Renamed(Arc<AtomicUsize>);
        impl EmbeddingBackend for Renamed {
            fn id(&self) -> String {
                MockEmbedding.id()
            }
            fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
                self.0.fetch_add(1, Ordering::SeqCst);
                Ok(texts.iter().map(|_| vec![1.0; MOCK_DIMENSION]).collect())
            }
        }
        let embedder = Embedder::new(Renamed(calls.clone()), cache);
        let second = embedder.embed(&["x", "y"]).unwrap();
        assert_eq!(first, second);
        assert_eq!(calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn truncated_cache_tail_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        {
            let embedder = Embedder::new(MockEmbedding, EmbeddingCache::open(&path).unwrap());
            embedder.embed(&["x"]).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        write!(f, "{{\"key\":\"abc\",\"provid").unwrap();
        drop(f);
        assert_eq!(EmbeddingCache::open(&path).unwrap().len(), 1);
    }

    #[test]
    fn scale_invariance() {
        let a = v(&[0.3, -0.2, 0.9]);
        let b = v(&[-0.5, 0.1, 0.4]);
        let d = cosine_distance(&a, &b).unwrap();
        let d_scaled = cosine_distance(&a.scaled(7.5).unwrap(), &b).unwrap();
        assert!((d - d_scaled).abs() < 1e-12);
        assert_eq!(d, cosine_distance(&b, &a).unwrap());
    }
}
