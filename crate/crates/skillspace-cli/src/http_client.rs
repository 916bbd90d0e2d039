//! Live LLM client speaking an OpenAI-style chat-completions protocol. The
//! credential comes from the environment; endpoint, model name, timeout, and
//! retry count from the config file.

use base64::Engine;
use serde_json::{json, Value};
use skillspace::planner_high::{ClientConfig, ClientError, LlmClient, API_KEY_ENV};

pub struct HttpLlmClient {
    cfg: ClientConfig,
    key: String,
    http: reqwest::blocking::Client,
}

impl HttpLlmClient {
    pub fn from_config(cfg: &ClientConfig) -> Result<HttpLlmClient, ClientError> {
        let key = std::env::var(API_KEY_ENV).map_err(|_| ClientError::Transport {
            msg: format!("credential environment variable {API_KEY_ENV} is not set"),
            retries: 0,
        })?;
        let http = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(cfg.timeout_s))
            .build()
            .map_err(|e| ClientError::Transport { msg: e.to_string(), retries: 0 })?;
        Ok(HttpLlmClient { cfg: cfg.clone(), key, http })
    }

    fn request_body(&self, prompt: &str, images: &[Vec<u8>]) -> Value {
        let mut content = vec![json!({ "type": "text", "text": prompt })];
        for img in images {
            let data = base64::engine::general_purpose::STANDARD.encode(img);
            content.push(json!({
                "type": "image_url",
                "image_url": { "url": format!("data:image/png;base64,{data}") }
            }));
        }
        json!({
            "model": self.cfg.model,
            "messages": [{ "role": "user", "content": content }],
        })
    }
}

impl LlmClient for HttpLlmClient {
    fn send(&self, prompt: &str, images: &[Vec<u8>]) -> Result<String, ClientError> {
        let body = self.request_body(prompt, images);
        let mut last_err = String::new();
        for attempt in 0..=self.cfg.retries {
            let result = self
                .http
                .post(&self.cfg.endpoint)
                .bearer_auth(&self.key)
                .json(&body)
                .send()
                .and_then(|r| r.error_for_status())
                .and_then(|r| r.json::<Value>());
            match result {
                Ok(value) => {
                    let text = value["choices"][0]["message"]["content"]
                        .as_str()
                        .map(str::to_string);
                    match text {
                        Some(t) => return Ok(t),
                        None => {
                            last_err = format!("response missing message content: {value}");
                        }
                    }
                }
                Err(e) => {
                    last_err = e.to_string();
                }
            }
            log::warn!("client attempt {} failed: {last_err}", attempt + 1);
        }
        Err(ClientError::Transport { msg: last_err, retries: self.cfg.retries })
    }
}
