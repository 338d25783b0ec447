use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    build_prompts, extract_noun_phrases, postprocess_candidates, Chunker, ContextCandidate,
    GenerationConfig, Result, RetrievalError,
};
use crate::text::StopwordList;
use crate::util::write_atomic;

pub trait GenerationBackend: Send + Sync {
    fn name(&self) -> &str;
    fn timeout(&self) -> Duration;
    fn generate(&self, prompt: &str, max_words: usize) -> Result<String>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReplayLine {
    prompt: String,
    text: String,
}

fn first_words(text: &str, max_words: usize) -> String {
    text.split_whitespace()
        .take(max_words)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Answers from a recorded `{prompt, text}` JSON Lines file. Unknown prompts
/// are an error.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    table: HashMap<String, String>,
}

impl ReplayBackend {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        Self {
            table: pairs.into_iter().collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| RetrievalError::io(path, e))?;
        let mut table = HashMap::new();
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let rec: ReplayLine =
                serde_json::from_str(line).map_err(|e| RetrievalError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            table.insert(rec.prompt, rec.text);
        }
        Ok(Self { table })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl GenerationBackend for ReplayBackend {
    fn name(&self) -> &str {
        "replay"
    }

    fn timeout(&self) -> Duration {
        Duration::ZERO
    }

    fn generate(&self, prompt: &str, max_words: usize) -> Result<String> {
        self.table
            .get(prompt)
            .map(|t| first_words(t, max_words))
            .ok_or_else(|| RetrievalError::ReplayMiss(prompt.to_string()))
    }
}

/// POSTs `{"prompt", "max_words"}` and reads `{"text"}`. Failed requests are
/// retried with exponential backoff.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    endpoint: String,
    agent: ureq::Agent,
    timeout: Duration,
    retries: u32,
    backoff: Duration,
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    prompt: &'a str,
    max_words: usize,
}

#[derive(Deserialize)]
struct HttpResponse {
    text: String,
}

impl HttpBackend {
    pub fn new(
        endpoint: impl Into<String>,
        timeout: Duration,
        retries: u32,
        backoff: Duration,
    ) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            agent,
            timeout,
            retries,
            backoff,
        }
    }

    fn attempt(&self, prompt: &str, max_words: usize) -> std::result::Result<String, ureq::Error> {
        let resp: HttpResponse = self
            .agent
            .post(&self.endpoint)
            .send_json(HttpRequest { prompt, max_words })?
            .body_mut()
            .read_json()?;
        Ok(resp.text)
    }
}

impl GenerationBackend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn timeout(&self) -> Duration {
        self.timeout
    }

    fn generate(&self, prompt: &str, max_words: usize) -> Result<String> {
        let mut delay = self.backoff;
        let mut attempt = 0;
        loop {
            match self.attempt(prompt, max_words) {
                Ok(text) => return Ok(first_words(&text, max_words)),
                Err(e) if attempt < self.retries => {
                    log::debug!(
                        "generation attempt {} for {prompt:?} failed: {e}",
                        attempt + 1
                    );
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                Err(e) => {
                    return Err(RetrievalError::Generation {
                        backend: self.name().into(),
                        message: format!("{e} after {} attempts", attempt + 1),
                    })
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheLine {
    backend: String,
    prompt: String,
    text: String,
}

/// Generated texts keyed by (backend, prompt). The file is JSON Lines with
/// `backend`, `prompt` and `text`, so it also loads as a replay file.
#[derive(Debug, Default)]
pub struct GenerationCache {
    entries: Mutex<HashMap<(String, String), String>>,
}

impl GenerationCache {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cache = Self::default();
        if !path.exists() {
            return Ok(cache);
        }
        let text = std::fs::read_to_string(path).map_err(|e| RetrievalError::io(path, e))?;
        let mut entries = cache.entries.lock().expect("cache lock");
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let rec: CacheLine = serde_json::from_str(line).map_err(|e| RetrievalError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            entries.insert((rec.backend, rec.prompt), rec.text);
        }
        drop(entries);
        Ok(cache)
    }

    pub fn get(&self, backend: &str, prompt: &str) -> Option<String> {
        self.entries
            .lock()
            .expect("cache lock")
            .get(&(backend.to_string(), prompt.to_string()))
            .cloned()
    }

    pub fn insert(&self, backend: &str, prompt: &str, text: &str) {
        self.entries
            .lock()
            .expect("cache lock")
            .insert((backend.to_string(), prompt.to_string()), text.to_string());
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sorted by backend and prompt so the file is stable across runs.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let entries = self.entries.lock().expect("cache lock");
        let mut keys: Vec<_> = entries.keys().collect();
        keys.sort();
        let mut out = Vec::new();
        for k in keys {
            let line = CacheLine {
                backend: k.0.clone(),
                prompt: k.1.clone(),
                text: entries[k].clone(),
            };
            serde_json::to_writer(&mut out, &line)
                .map_err(|e| RetrievalError::Contract(e.to_string()))?;
            out.push(b'\n');
        }
        write_atomic(path, &out).map_err(|e| RetrievalError::io(path, e))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PromptFailure {
    pub prompt: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    pub candidates: Vec<ContextCandidate>,
    pub prompts: usize,
    pub failures: Vec<PromptFailure>,
}

/// Prompt the backend for one instance and post-process the answers. A
/// failing prompt is recorded and skipped. Candidate order does not depend
/// on the order in which concurrent calls complete.
pub fn generate_context(
    text: &str,
    target: &str,
    config: &GenerationConfig,
    backend: &dyn GenerationBackend,
    stopwords: &StopwordList,
    chunker: &dyn Chunker,
    cache: Option<&GenerationCache>,
) -> GenerationOutcome {
    let phrases = extract_noun_phrases(text, target, stopwords, chunker);
    let prompts: Vec<String> = build_prompts(&phrases, target, config)
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    let results: Vec<Mutex<Option<Result<String>>>> =
        prompts.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let call = |prompt: &str| -> Result<String> {
        if let Some(hit) = cache.and_then(|c| c.get(backend.name(), prompt)) {
            return Ok(first_words(&hit, config.max_words));
        }
        let out = first_words(
            &backend.generate(prompt, config.max_words)?,
            config.max_words,
        );
        if let Some(c) = cache {
            c.insert(backend.name(), prompt, &out);
        }
        Ok(out)
    };
    let workers = config.max_in_flight.max(1).min(prompts.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= prompts.len() {
                    break;
                }
                *results[i].lock().expect("result slot") = Some(call(&prompts[i]));
            });
        }
    });

    let mut raw = Vec::new();
    let mut failures = Vec::new();
    for (prompt, slot) in prompts.iter().zip(results) {
        match slot
            .into_inner()
            .expect("result slot")
            .expect("every prompt ran")
        {
            Ok(text) => raw.push((prompt.clone(), text)),
            Err(e) => failures.push(PromptFailure {
                prompt: prompt.clone(),
                error: e.to_string(),
            }),
        }
    }
    if !prompts.is_empty() && failures.len() == prompts.len() {
        log::warn!("all {} prompts failed for target {target:?}", prompts.len());
    }
    GenerationOutcome {
        candidates: postprocess_candidates(&raw, config),
        prompts: prompts.len(),
        failures,
    }
}
