//! Cache wrappers: each backend call is keyed by
//! `cache_key(model_id, params, prompt_bytes)` and answered from the blob
//! store when possible, so a warm rerun touches no backend at all.

use std::sync::Arc;

use super::{BackendError, Captioner, ChatBackend, CompletionBackend, QaPairGenerator};
use crate::prompts::RenderedPrompt;
use crate::store::{cache_key, CacheStore};
use crate::types::{Caption, DecodeParams, QAPair};

pub struct CachedCompletion {
    inner: Arc<dyn CompletionBackend>,
    store: CacheStore,
}

impl CachedCompletion {
    pub fn new(inner: Arc<dyn CompletionBackend>, store: CacheStore) -> Self {
        CachedCompletion { inner, store }
    }
}

impl CompletionBackend for CachedCompletion {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn complete(
        &self,
        prompt: &RenderedPrompt,
        params: &DecodeParams,
    ) -> Result<String, BackendError> {
        let key = cache_key(
            self.inner.model_id(),
            params,
            prompt.canonical_text().as_bytes(),
        );
        if let Some(hit) = self.store.get::<String>(&key)? {
            return Ok(hit);
        }
        let reply = self.inner.complete(prompt, params)?;
        self.store.put(&key, &reply)?;
        Ok(reply)
    }
}

pub struct CachedChat {
    inner: Arc<dyn ChatBackend>,
    store: CacheStore,
}

impl CachedChat {
    pub fn new(inner: Arc<dyn ChatBackend>, store: CacheStore) -> Self {
        CachedChat { inner, store }
    }
}

impl ChatBackend for CachedChat {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn chat(
        &self,
        prompt: &RenderedPrompt,
        params: &DecodeParams,
    ) -> Result<String, BackendError> {
        let key = cache_key(
            self.inner.model_id(),
            params,
            prompt.canonical_text().as_bytes(),
        );
        if let Some(hit) = self.store.get::<String>(&key)? {
            return Ok(hit);
        }
        let reply = self.inner.chat(prompt, params)?;
        self.store.put(&key, &reply)?;
        Ok(reply)
    }
}

pub struct CachedCaptioner {
    inner: Arc<dyn Captioner>,
    store: CacheStore,
    params: DecodeParams,
}

impl CachedCaptioner {
    pub fn new(inner: Arc<dyn Captioner>, store: CacheStore) -> Self {
        CachedCaptioner {
            inner,
            store,
            params: DecodeParams::greedy(0),
        }
    }
}

impl Captioner for CachedCaptioner {
    fn caption(
        &self,
        image_ref: &str,
        question: &str,
        n: usize,
    ) -> Result<Vec<Caption>, BackendError> {
        let payload = format!("caption\x1f{image_ref}\x1f{question}\x1f{n}");
        let key = cache_key("captioner", &self.params, payload.as_bytes());
        if let Some(hit) = self.store.get::<Vec<Caption>>(&key)? {
            return Ok(hit);
        }
        let captions = self.inner.caption(image_ref, question, n)?;
        self.store.put(&key, &captions)?;
        Ok(captions)
    }
}

pub struct CachedQaGen {
    inner: Arc<dyn QaPairGenerator>,
    store: CacheStore,
    params: DecodeParams,
}

impl CachedQaGen {
    pub fn new(inner: Arc<dyn QaPairGenerator>, store: CacheStore) -> Self {
        CachedQaGen {
            inner,
            store,
            params: DecodeParams::greedy(0),
        }
    }
}

impl QaPairGenerator for CachedQaGen {
    fn generate_qa_pairs(
        &self,
        captions: &[Caption],
        n: usize,
    ) -> Result<Vec<QAPair>, BackendError> {
        let joined: Vec<&str> = captions.iter().map(|c| c.text.as_str()).collect();
        let payload = format!("qa_pairs\x1f{}\x1f{n}", joined.join("\x1e"));
        let key = cache_key("qa_gen", &self.params, payload.as_bytes());
        if let Some(hit) = self.store.get::<Vec<QAPair>>(&key)? {
            return Ok(hit);
        }
        let pairs = self.inner.generate_qa_pairs(captions, n)?;
        self.store.put(&key, &pairs)?;
        Ok(pairs)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::backends::fakes::ScriptedLm;

    #[test]
    fn warm_cache_skips_backend() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::open(dir.path()).unwrap();
        let mut lm = ScriptedLm::new("fake", HashMap::new());
        let p = RenderedPrompt::Completion {
            text: "prompt".into(),
        };
        lm.script(&p, "reply");
        let calls = lm.calls.clone();
        let cached = CachedCompletion::new(Arc::new(lm), store);
        let params = DecodeParams::greedy(8);
        assert_eq!(cached.complete(&p, &params).unwrap(), "reply");
        assert_eq!(cached.complete(&p, &params).unwrap(), "reply");
        assert_eq!(calls.get(), 1);
    }

    #[test]
    fn different_params_are_different_entries() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::open(dir.path()).unwrap();
        let mut lm = ScriptedLm::new("fake", HashMap::new());
        let p = RenderedPrompt::Completion {
            text: "prompt".into(),
        };
        lm.script(&p, "reply");
        let calls = lm.calls.clone();
        let cached = CachedCompletion::new(Arc::new(lm), store);
        cached.complete(&p, &DecodeParams::greedy(8)).unwrap();
        cached.complete(&p, &DecodeParams::greedy(9)).unwrap();
        assert_eq!(calls.get(), 2);
    }
}
