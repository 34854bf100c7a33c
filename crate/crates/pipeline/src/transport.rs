//! JSON-over-HTTP transport shared by every remote backend, with an
//! instrumentable seam so tests can assert that no request was made.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct TransportError {
    pub status: Option<u16>,
    pub message: String,
    pub retryable: bool,
}

impl TransportError {
    pub fn fatal(message: impl Into<String>) -> Self {
        Self {
            status: None,
            message: message.into(),
            retryable: false,
        }
    }
}

pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> Result<Value, TransportError>;
}

/// Blocking HTTP client.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("http client");
        Self { client }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(120))
    }
}

impl Transport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> Result<Value, TransportError> {
        let mut req = self.client.post(url).json(body);
        for (k, v) in headers {
            req = req.header(k, v);
        }
        let resp = req.send().map_err(|e| TransportError {
            status: None,
            message: e.to_string(),
            retryable: e.is_connect() || e.is_timeout() || e.is_request(),
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| TransportError {
            status: Some(status.as_u16()),
            message: e.to_string(),
            retryable: true,
        })?;
        if !status.is_success() {
            let code = status.as_u16();
            return Err(TransportError {
                status: Some(code),
                message: format!("HTTP {code}: {}", text.chars().take(500).collect::<String>()),
                retryable: code == 429 || code >= 500,
            });
        }
        serde_json::from_str(&text).map_err(|e| TransportError {
            status: Some(status.as_u16()),
            message: format!("response is not JSON: {e}"),
            retryable: false,
        })
    }
}

/// Refuses every request. Used for offline (fixture/replay) runs.
#[derive(Debug, Default, Clone, Copy)]
pub struct OfflineTransport;

impl Transport for OfflineTransport {
    fn post_json(&self, url: &str, _: &[(String, String)], _: &Value) -> Result<Value, TransportError> {
        Err(TransportError::fatal(format!("network disabled; refused request to {url}")))
    }
}

/// Counts requests passed to the wrapped transport.
pub struct CountingTransport {
    inner: Arc<dyn Transport>,
    count: AtomicUsize,
}

impl CountingTransport {
    pub fn new(inner: Arc<dyn Transport>) -> Self {
        Self {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn requests(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }
}

impl Transport for CountingTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> Result<Value, TransportError> {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.inner.post_json(url, headers, body)
    }
}

/// Exponential backoff: attempt `n` (0-based) waits
/// `min(base_delay_ms * 2^n, max_delay_ms)` before retrying.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }

    /// Runs `f` until it succeeds, fails fatally, or attempts run out.
    /// Returns the value with the number of attempts used.
    pub fn run<T>(
        &self,
        mut f: impl FnMut() -> Result<T, TransportError>,
    ) -> Result<(T, u32), (TransportError, u32)> {
        let max = self.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match f() {
                Ok(v) => return Ok((v, attempt)),
                Err(e) if e.retryable && attempt < max => {
                    let d = self.delay(attempt - 1);
                    log::warn!("attempt {attempt}/{max} failed ({e}); retrying in {d:?}");
                    std::thread::sleep(d);
                }
                Err(e) => return Err((e, attempt)),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 100,
            max_delay_ms: 350,
        };
        let ms: Vec<u128> = (0..4).map(|a| p.delay(a).as_millis()).collect();
        assert_eq!(ms, vec![100, 200, 350, 350]);
    }

    #[test]
    fn retries_only_retryable_errors() {
        let p = RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 0,
            max_delay_ms: 0,
        };
        let mut calls = 0;
        let r: Result<(u8, u32), _> = p.run(|| {
            calls += 1;
            Err(TransportError {
                status: Some(503),
                message: "busy".into(),
                retryable: true,
            })
        });
        assert_eq!(r.unwrap_err().1, 3);
        assert_eq!(calls, 3);

        let mut calls = 0;
        let r: Result<(u8, u32), _> = p.run(|| {
            calls += 1;
            Err(TransportError::fatal("bad request"))
        });
        assert_eq!(r.unwrap_err().1, 1);
        assert_eq!(calls, 1);
    }

    #[test]
    fn counting_wraps_offline() {
        let t = CountingTransport::new(Arc::new(OfflineTransport));
        assert!(t.post_json("http://x", &[], &Value::Null).is_err());
        assert_eq!(t.requests(), 1);
    }
}
