use std::time::Duration;

use wildtrap::pipeline::{BackendError, DetectInput, DetectRequest, DetectResponse, DetectorBackend};

/// A detector reached over HTTP with `POST <base>/v1/detect`.
pub struct RemoteBackend {
    url: String,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: format!("{}/v1/detect", base_url.trim_end_matches('/')),
            agent,
        }
    }
}

fn classify(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(_) => BackendError::Timeout(e.to_string()),
        ureq::Error::Io(ref io) if io.kind() == std::io::ErrorKind::TimedOut => {
            BackendError::Timeout(e.to_string())
        }
        ureq::Error::Json(_) => BackendError::Protocol(e.to_string()),
        other => BackendError::Unreachable(other.to_string()),
    }
}

impl DetectorBackend for RemoteBackend {
    fn name(&self) -> &str {
        &self.url
    }

    fn detect(&self, input: &DetectInput<'_>) -> Result<DetectResponse, BackendError> {
        let req = DetectRequest::new(input.image, &input.profile.model_id, input.min_confidence);
        let mut resp = self.agent.post(&self.url).send_json(&req).map_err(classify)?;
        let status = resp.status().as_u16();
        if status >= 500 || status == 429 {
            return Err(BackendError::Unreachable(format!("{} returned {status}", self.url)));
        }
        if status >= 400 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(BackendError::Config(format!(
                "{} returned {status}: {body}",
                self.url
            )));
        }
        let out: DetectResponse = resp.body_mut().read_json().map_err(classify)?;
        if out.model_id != input.profile.model_id {
            return Err(BackendError::Protocol(format!(
                "asked for model `{}`, got `{}`",
                input.profile.model_id, out.model_id
            )));
        }
        Ok(out)
    }
}
