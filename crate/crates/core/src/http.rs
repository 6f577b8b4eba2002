//! Blocking JSON-over-HTTP client shared by the remote scorer and chat backends.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub url: String,
    /// Environment variable holding a bearer token. Unset or empty means no auth header.
    pub token_env: Option<String>,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            url: String::new(),
            token_env: None,
            max_retries: 3,
            initial_backoff_ms: 250,
            max_backoff_ms: 4000,
            timeout_secs: 120,
            max_in_flight: 4,
        }
    }
}

/// Counting gate capping concurrent requests across threads.
#[derive(Debug)]
pub struct InFlightLimiter {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

pub struct InFlightPermit<'a> {
    limiter: &'a InFlightLimiter,
}

impl InFlightLimiter {
    pub fn new(max: usize) -> Self {
        InFlightLimiter {
            max: max.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightPermit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.max {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        InFlightPermit { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.active.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        let mut active = self
            .limiter
            .active
            .lock()
            .unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.limiter.freed.notify_one();
    }
}

pub struct JsonClient {
    agent: ureq::Agent,
    cfg: HttpConfig,
    token: Option<String>,
    limiter: InFlightLimiter,
}

fn retryable_status(status: u16) -> bool {
    status == 408 || status == 429 || status >= 500
}

impl JsonClient {
    pub fn new(cfg: HttpConfig) -> Result<Self> {
        if cfg.url.is_empty() {
            return Err(Error::Config("backend url is empty".into()));
        }
        let token = cfg
            .token_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok())
            .filter(|t| !t.is_empty());
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        let limiter = InFlightLimiter::new(cfg.max_in_flight);
        Ok(JsonClient {
            agent,
            cfg,
            token,
            limiter,
        })
    }

    pub fn url(&self) -> &str {
        &self.cfg.url
    }

    pub fn limiter(&self) -> &InFlightLimiter {
        &self.limiter
    }

    /// POSTs `body` and decodes the JSON reply, retrying transport errors,
    /// 408, 429 and 5xx with exponential backoff.
    pub fn post<B, R>(&self, body: &B) -> Result<R>
    where
        B: Serialize,
        R: DeserializeOwned,
    {
        let mut backoff = Duration::from_millis(self.cfg.initial_backoff_ms);
        let mut attempt = 0;
        loop {
            let err = match self.post_once(body) {
                Ok(r) => return Ok(r),
                Err(e) => e,
            };
            if !err.is_retryable() || attempt >= self.cfg.max_retries {
                if attempt > 0 {
                    log::warn!("{}: giving up after {} attempts: {err}", self.cfg.url, attempt + 1);
                }
                return Err(err);
            }
            log::debug!("{}: attempt {} failed: {err}; retrying", self.cfg.url, attempt + 1);
            thread::sleep(backoff);
            backoff = (backoff * 2).min(Duration::from_millis(self.cfg.max_backoff_ms));
            attempt += 1;
        }
    }

    fn post_once<B, R>(&self, body: &B) -> Result<R>
    where
        B: Serialize,
        R: DeserializeOwned,
    {
        let _permit = self.limiter.acquire();
        let mut req = self
            .agent
            .post(&self.cfg.url)
            .header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Error::Backend {
            status: None,
            message: e.to_string(),
            retryable: true,
        })?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Error::Backend {
                status: Some(status),
                message: truncate(&text, 200),
                retryable: retryable_status(status),
            });
        }
        resp.body_mut().read_json::<R>().map_err(|e| Error::Backend {
            status: Some(status),
            message: format!("undecodable response: {e}"),
            retryable: false,
        })
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}
