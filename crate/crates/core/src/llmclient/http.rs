//! OpenAI-compatible chat-completions transport.

use std::time::{Duration, Instant};

use base64::Engine as _;
use serde_json::{json, Value};

use super::{Backend, BackendError, GenRequest, GenResponse, LlmError, Usage};

pub struct HttpBackend {
    endpoint: String,
    api_key: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    /// `endpoint` is the API base (e.g. `https://host/v1`); the credential is
    /// read from `credential_env` before any network use.
    pub fn from_env(endpoint: &str, credential_env: &str, timeout: Duration) -> Result<Self, LlmError> {
        let api_key = std::env::var(credential_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| LlmError::CredentialMissing(credential_env.to_string()))?;
        Ok(Self::with_key(endpoint, api_key, timeout))
    }

    pub fn with_key(endpoint: &str, api_key: String, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            api_key,
            agent,
        }
    }

    fn url(&self) -> String {
        if self.endpoint.ends_with("/chat/completions") {
            self.endpoint.clone()
        } else {
            format!("{}/chat/completions", self.endpoint)
        }
    }
}

fn mime_for(path: &str) -> &'static str {
    let lower = path.to_ascii_lowercase();
    if lower.ends_with(".png") {
        "image/png"
    } else if lower.ends_with(".webp") {
        "image/webp"
    } else {
        "image/jpeg"
    }
}

/// The chat-completions request body; attachments become inline data URLs.
pub(crate) fn request_body(request: &GenRequest) -> Result<Value, BackendError> {
    let content = if request.attachments.is_empty() {
        Value::String(request.prompt.clone())
    } else {
        let mut parts = vec![json!({"type": "text", "text": request.prompt})];
        for path in &request.attachments {
            let bytes = std::fs::read(path).map_err(|e| BackendError::Invalid(format!("attachment {path}: {e}")))?;
            let data = base64::engine::general_purpose::STANDARD.encode(bytes);
            parts.push(json!({
                "type": "image_url",
                "image_url": {"url": format!("data:{};base64,{data}", mime_for(path))}
            }));
        }
        Value::Array(parts)
    };
    Ok(json!({
        "model": request.model_id,
        "messages": [{"role": "user", "content": content}],
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    }))
}

pub(crate) fn parse_completion(body: &str, model_id: &str) -> Result<GenResponse, BackendError> {
    let v: Value =
        serde_json::from_str(body).map_err(|e| BackendError::Transient(format!("malformed response body: {e}")))?;
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Transient("response has no choices[0].message.content".into()))?;
    let tokens = |key: &str| v.pointer(&format!("/usage/{key}")).and_then(Value::as_u64).unwrap_or(0);
    Ok(GenResponse {
        text: text.to_string(),
        usage: Usage {
            prompt_tokens: tokens("prompt_tokens"),
            completion_tokens: tokens("completion_tokens"),
        },
        model_id: v.get("model").and_then(Value::as_str).unwrap_or(model_id).to_string(),
        cached: false,
        latency_ms: 0,
    })
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http_openai_compatible"
    }

    fn complete(&self, request: &GenRequest) -> Result<GenResponse, BackendError> {
        let body = request_body(request)?;
        let started = Instant::now();
        let mut resp = self
            .agent
            .post(&self.url())
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        match status {
            200..=299 => {
                let mut out = parse_completion(&text, &request.model_id)?;
                out.latency_ms = started.elapsed().as_millis() as u64;
                Ok(out)
            }
            408 | 429 | 500..=599 => Err(BackendError::Transient(format!("HTTP {status}: {text}"))),
            _ => Err(BackendError::Rejected { status, body: text }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llmclient::{Client, RetryPolicy};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves canned `(status, body)` replies in order, one per connection,
    /// and records request bodies.
    fn serve(replies: Vec<(u16, String)>) -> (String, Arc<std::sync::Mutex<Vec<String>>>, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
        let hits = Arc::new(AtomicUsize::new(0));
        let (seen2, hits2) = (seen.clone(), hits.clone());
        std::thread::spawn(move || {
            for (status, body) in replies {
                let Ok((stream, _)) = listener.accept() else { return };
                hits2.fetch_add(1, Ordering::SeqCst);
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                seen2.lock().unwrap().push(String::from_utf8(buf).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}/v1"), seen, hits)
    }

    fn ok_body(text: &str) -> String {
        json!({"model": "gpt-x", "choices": [{"message": {"role": "assistant", "content": text}}],
               "usage": {"prompt_tokens": 5, "completion_tokens": 2}})
        .to_string()
    }

    fn retry() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(5),
        }
    }

    #[test]
    fn retries_transient_status_then_succeeds() {
        let (url, seen, hits) = serve(vec![(503, "busy".into()), (200, ok_body("hello"))]);
        let backend = HttpBackend::with_key(&url, "k".into(), Duration::from_secs(5));
        let client = Client::new(Arc::new(backend)).with_retry(retry());
        let r = client.generate(&GenRequest::text("prompt text", "gpt-x")).unwrap();
        assert_eq!(r.text, "hello");
        assert_eq!(r.usage.prompt_tokens, 5);
        assert_eq!(hits.load(Ordering::SeqCst), 2);
        let body: Value = serde_json::from_str(&seen.lock().unwrap()[1]).unwrap();
        assert_eq!(body["messages"][0]["content"], "prompt text");
        assert_eq!(body["temperature"], 0.0);
    }

    #[test]
    fn client_error_is_rejected_without_retry() {
        let (url, _, hits) = serve(vec![(400, "{\"error\":\"bad\"}".into()), (200, ok_body("x"))]);
        let backend = HttpBackend::with_key(&url, "k".into(), Duration::from_secs(5));
        let client = Client::new(Arc::new(backend)).with_retry(retry());
        match client.generate(&GenRequest::text("p", "m")) {
            Err(LlmError::RequestRejected { status: 400, body }) => assert!(body.contains("bad")),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn endpoint_down_is_unavailable() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let backend = HttpBackend::with_key(
            &format!("http://127.0.0.1:{port}/v1"),
            "k".into(),
            Duration::from_secs(2),
        );
        let client = Client::new(Arc::new(backend)).with_retry(retry());
        match client.generate(&GenRequest::text("p", "m")) {
            Err(LlmError::BackendUnavailable { attempts: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_credential_fails_before_network() {
        let var = "TIMEWARP_TEST_SURELY_UNSET_KEY";
        std::env::remove_var(var);
        assert!(matches!(
            HttpBackend::from_env("http://127.0.0.1:9", var, Duration::from_secs(1)),
            Err(LlmError::CredentialMissing(v)) if v == var
        ));
    }

    #[test]
    fn attachments_become_data_urls() {
        let dir = tempfile::tempdir().unwrap();
        let frame = dir.path().join("frame_00.jpg");
        std::fs::write(&frame, [0xff, 0xd8, 0xff]).unwrap();
        let req = GenRequest::new("describe", vec![frame.display().to_string()], "m", 0.0, 8);
        let body = request_body(&req).unwrap();
        let parts = body["messages"][0]["content"].as_array().unwrap();
        assert_eq!(parts[0]["text"], "describe");
        assert_eq!(parts[1]["image_url"]["url"], "data:image/jpeg;base64,/9j/");
        let missing = GenRequest::new("d", vec!["/nope.jpg".into()], "m", 0.0, 8);
        assert!(matches!(request_body(&missing), Err(BackendError::Invalid(_))));
    }
}
