//! Pluggable caption generation. The pipeline never hard-depends on a
//! specific vision-language model: anything that answers the prompt
//! behind [`CaptionerClient`] works. The repo ships a deterministic
//! offline stub and an HTTP client for a real endpoint.

use sha2::{Digest, Sha256};

use crate::config::CaptionerConfig;
use crate::error::{Error, Result};

/// The exact prompt sent for every content description request.
pub const CAPTION_PROMPT: &str = "<image>, describe the content of this picture briefly.";

pub trait CaptionerClient: Send + Sync {
    /// One caption request. Implementations should treat errors as
    /// transport-level; retry policy lives in the pipeline.
    fn caption(&self, image_bytes: &[u8], prompt: &str) -> Result<String>;
}

/// Offline stand-in: a deterministic caption derived from the image
/// bytes. Useful for fixtures and reproducible builds; obviously not a
/// description of the depicted content.
pub struct EchoCaptioner;

impl CaptionerClient for EchoCaptioner {
    fn caption(&self, image_bytes: &[u8], _prompt: &str) -> Result<String> {
        let digest = Sha256::digest(image_bytes);
        let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        Ok(format!("an artwork (signature {hex})"))
    }
}

/// HTTP client for a captioning endpoint. Request body is JSON
/// `{"prompt": ..., "image_base64": ...}`; the response must be JSON with
/// a `caption` string field.
pub struct HttpCaptioner {
    cfg: CaptionerConfig,
    agent: ureq::Agent,
}

impl HttpCaptioner {
    pub fn new(cfg: CaptionerConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(std::time::Duration::from_millis(cfg.timeout_ms))
            .build();
        Self { cfg, agent }
    }

    pub fn url(&self) -> &str {
        &self.cfg.url
    }
}

impl CaptionerClient for HttpCaptioner {
    fn caption(&self, image_bytes: &[u8], prompt: &str) -> Result<String> {
        use base64::Engine;
        let body = serde_json::json!({
            "prompt": prompt,
            "image_base64": base64::engine::general_purpose::STANDARD.encode(image_bytes),
        });
        let response = self
            .agent
            .post(&self.cfg.url)
            .set("content-type", "application/json")
            .send_string(&body.to_string())
            .map_err(|e| Error::Dataset(format!("captioner request failed: {e}")))?;
        let parsed: serde_json::Value = response
            .into_json()
            .map_err(|e| Error::Dataset(format!("captioner response is not JSON: {e}")))?;
        parsed
            .get("caption")
            .and_then(|c| c.as_str())
            .map(|s| s.to_string())
            .ok_or_else(|| Error::Dataset("captioner response lacks a `caption` field".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_captioner_is_deterministic_and_distinct() {
        let a = EchoCaptioner.caption(b"image-a", CAPTION_PROMPT).unwrap();
        let b = EchoCaptioner.caption(b"image-a", CAPTION_PROMPT).unwrap();
        let c = EchoCaptioner.caption(b"image-c", CAPTION_PROMPT).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(!a.trim().is_empty());
    }

    #[test]
    fn http_captioner_happy_path() {
        use std::io::{Read, Write};
        // one-shot local HTTP server
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut data = Vec::new();
            let mut buf = [0u8; 4096];
            loop {
                let n = stream.read(&mut buf).unwrap();
                if n == 0 {
                    break;
                }
                data.extend_from_slice(&buf[..n]);
                let text = String::from_utf8_lossy(&data);
                if let Some(header_end) = text.find("\r\n\r\n") {
                    let content_length = text
                        .lines()
                        .find(|l| l.to_ascii_lowercase().starts_with("content-length"))
                        .and_then(|l| l.split(':').nth(1))
                        .and_then(|v| v.trim().parse::<usize>().ok())
                        .unwrap_or(0);
                    if data.len() >= header_end + 4 + content_length {
                        break;
                    }
                }
            }
            let request = String::from_utf8_lossy(&data).to_string();
            let body = r#"{"caption":"A vase of flowers on a table."}"#;
            let response = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{}",
                body.len(),
                body
            );
            stream.write_all(response.as_bytes()).unwrap();
            request
        });

        let captioner = HttpCaptioner::new(CaptionerConfig {
            url: format!("http://{addr}/caption"),
            timeout_ms: 5_000,
            retries: 1,
        });
        let caption = captioner.caption(b"png-bytes", CAPTION_PROMPT).unwrap();
        assert_eq!(caption, "A vase of flowers on a table.");
        let request = handle.join().unwrap();
        assert!(request.contains("describe the content of this picture briefly."));
    }
}
