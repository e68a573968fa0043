use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use recoverr_core::modelio::{ClientError, ClientErrorKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{image_digest, ChatBackend, ClientReply, ClientRequest};

/// Everything that determines a reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheKey {
    pub backend: String,
    pub model: String,
    pub role: String,
    pub prompt_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_sha256: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub want_logprobs: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl CacheKey {
    pub fn new(backend: &dyn ChatBackend, request: &ClientRequest) -> Self {
        Self {
            backend: backend.id().to_string(),
            model: backend.model().to_string(),
            role: request.role.clone(),
            prompt_sha256: hex::encode(Sha256::digest(request.prompt.as_bytes())),
            image_sha256: request.image.as_deref().map(image_digest),
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            want_logprobs: request.want_logprobs,
            seed: request.seed,
        }
    }

    /// Hex SHA-256 of the key's canonical JSON.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("serializable");
        hex::encode(Sha256::digest(&canonical))
    }
}

/// One stored exchange, sufficient for offline replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: CacheKey,
    pub request: ClientRequest,
    pub reply: ClientReply,
}

type Outcome = Result<ClientReply, ClientError>;

#[derive(Default)]
struct Inflight {
    done: Mutex<Option<Outcome>>,
    ready: Condvar,
}

struct Semaphore {
    free: Mutex<usize>,
    released: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            released: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore poisoned");
        while *free == 0 {
            free = self.released.wait(free).expect("semaphore poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore poisoned") += 1;
        self.0.released.notify_one();
    }
}

/// Serves replies from `{dir}/{backend}/{key[..2]}/{key}.rec` and calls the
/// inner backend only on a miss. Concurrent identical requests share one call.
pub struct CachedBackend {
    inner: Arc<dyn ChatBackend>,
    dir: Option<PathBuf>,
    inflight: Mutex<HashMap<String, Arc<Inflight>>>,
    limit: Semaphore,
    misses: AtomicUsize,
}

impl CachedBackend {
    /// `dir` of `None` keeps only in-flight de-duplication.
    pub fn new(inner: Arc<dyn ChatBackend>, dir: Option<PathBuf>, parallelism: usize) -> Self {
        Self {
            inner,
            dir,
            inflight: Mutex::new(HashMap::new()),
            limit: Semaphore::new(parallelism),
            misses: AtomicUsize::new(0),
        }
    }

    /// Calls that reached the inner backend.
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    fn record_path(&self, digest: &str) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(self.inner.id()).join(&digest[..2]).join(format!("{digest}.rec")))
    }

    fn load(path: &Path, key: &CacheKey) -> Option<ClientReply> {
        let bytes = fs::read(path).ok()?;
        match serde_json::from_slice::<CacheRecord>(&bytes) {
            Ok(rec) if rec.key == *key => Some(rec.reply),
            Ok(_) => {
                log::warn!("{}: key mismatch, ignoring cached record", path.display());
                None
            }
            Err(e) => {
                log::warn!("{}: unreadable cached record: {e}", path.display());
                None
            }
        }
    }

    fn store(path: &Path, record: &CacheRecord) -> std::io::Result<()> {
        let dir = path.parent().expect("record path has a parent");
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.{}.tmp",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("rec"),
            std::process::id()
        ));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&serde_json::to_vec(record).expect("serializable"))?;
        f.sync_data()?;
        fs::rename(&tmp, path)
    }

    pub fn call(&self, request: &ClientRequest) -> Outcome {
        let key = CacheKey::new(self.inner.as_ref(), request);
        let digest = key.digest();
        let path = self.record_path(&digest);
        if let Some(reply) = path.as_deref().and_then(|p| Self::load(p, &key)) {
            return Ok(reply);
        }

        let (slot, leader) = {
            let mut map = self.inflight.lock().expect("in-flight map poisoned");
            match map.get(&digest) {
                Some(slot) => (Arc::clone(slot), false),
                None => {
                    let slot = Arc::new(Inflight::default());
                    map.insert(digest.clone(), Arc::clone(&slot));
                    (slot, true)
                }
            }
        };
        if !leader {
            let mut done = slot.done.lock().expect("in-flight slot poisoned");
            while done.is_none() {
                done = slot.ready.wait(done).expect("in-flight slot poisoned");
            }
            return done.clone().expect("checked above");
        }

        // a finished leader may have stored the record between our miss and now
        let outcome = match path.as_deref().and_then(|p| Self::load(p, &key)) {
            Some(reply) => Ok(reply),
            None => {
                let _permit = self.limit.acquire();
                self.misses.fetch_add(1, Ordering::Relaxed);
                self.inner.complete(request)
            }
        };
        if let (Ok(reply), Some(path)) = (&outcome, &path) {
            let record = CacheRecord {
                key,
                request: request.clone(),
                reply: reply.clone(),
            };
            if let Err(e) = Self::store(path, &record) {
                log::warn!("{}: cannot store cached record: {e}", path.display());
            }
        }
        *slot.done.lock().expect("in-flight slot poisoned") = Some(outcome.clone());
        slot.ready.notify_all();
        self.inflight.lock().expect("in-flight map poisoned").remove(&digest);
        outcome
    }

    pub fn multimodal(&self) -> bool {
        self.inner.multimodal()
    }

    pub fn id(&self) -> &str {
        self.inner.id()
    }
}

/// Replays stored records only; a miss is a capability error.
pub struct OfflineBackend {
    pub id: String,
    pub model: String,
}

impl ChatBackend for OfflineBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn multimodal(&self) -> bool {
        true
    }

    fn complete(&self, request: &ClientRequest) -> Outcome {
        Err(ClientError::new(
            ClientErrorKind::Capability,
            format!("offline backend {} has no cached {} reply", self.id, request.role),
        ))
    }
}
