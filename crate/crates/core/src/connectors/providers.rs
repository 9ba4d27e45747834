use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ConnectorError, TimeWindow, MAX_NEWS_ITEMS, MAX_WEB_ITEMS};
use crate::evidence::BarInterval;
use crate::graph::ApiKind;
use crate::retry::RetryPolicy;
use crate::timefmt::format_utc;

/// Where a provider lives and which environment variable holds its key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderEndpoint {
    pub endpoint_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    /// Extra query parameters sent with every request (search engine id,
    /// language, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, String>,
}

struct Provider {
    endpoint: ProviderEndpoint,
    key: Option<String>,
}

impl Provider {
    fn new(endpoint: ProviderEndpoint) -> Result<Self, ConnectorError> {
        let key = match &endpoint.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| ConnectorError::MissingCredential(var.clone()))?),
            None => None,
        };
        Ok(Provider { endpoint, key })
    }
}

/// HTTP clients for the three upstream providers.
pub struct LiveProviders {
    news: Option<Provider>,
    web: Option<Provider>,
    finance: Option<Provider>,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl LiveProviders {
    /// Resolves credentials from the environment; a configured provider
    /// whose key variable is unset is an error.
    pub fn new(
        news: Option<ProviderEndpoint>,
        web: Option<ProviderEndpoint>,
        finance: Option<ProviderEndpoint>,
    ) -> Result<Self, ConnectorError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .user_agent("fingraph/0.1")
            .build()
            .map_err(|e| ConnectorError::Transport(e.to_string()))?;
        Ok(LiveProviders {
            news: news.map(Provider::new).transpose()?,
            web: web.map(Provider::new).transpose()?,
            finance: finance.map(Provider::new).transpose()?,
            client,
            retry: RetryPolicy::default(),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn get(&self, api: ApiKind, provider: Option<&Provider>, path: &str, query: Vec<(String, String)>, key_header: Option<&str>) -> Result<Value, ConnectorError> {
        let provider = provider.ok_or(ConnectorError::NotConfigured(api))?;
        let url = format!("{}{}", provider.endpoint.endpoint_url.trim_end_matches('/'), path);
        let mut params = query;
        params.extend(provider.endpoint.params.iter().map(|(k, v)| (k.clone(), v.clone())));
        let send = || -> Result<Value, ConnectorError> {
            let mut req = self.client.get(&url).query(&params);
            match (key_header, &provider.key) {
                (Some(header), Some(key)) => req = req.header(header, key),
                (None, Some(key)) => req = req.query(&[("key", key)]),
                _ => {}
            }
            let resp = req.send().map_err(|e| ConnectorError::Transport(e.to_string()))?;
            let status = resp.status();
            let body = resp.text().map_err(|e| ConnectorError::Transport(e.to_string()))?;
            if !status.is_success() {
                if api == ApiKind::Finance && status.as_u16() == 404 {
                    if let Ok(v) = serde_json::from_str::<Value>(&body) {
                        return Ok(v);
                    }
                }
                return Err(ConnectorError::Provider { code: status.as_u16(), message: body.chars().take(200).collect() });
            }
            serde_json::from_str(&body).map_err(|e| ConnectorError::DataIntegrity(format!("provider returned invalid JSON: {e}")))
        };
        self.retry.run(send, |e| match e {
            ConnectorError::Transport(_) => true,
            ConnectorError::Provider { code, .. } => *code == 429 || (500..600).contains(code),
            _ => false,
        })
    }

    pub fn news(&self, query: &str, window: &TimeWindow) -> Result<Value, ConnectorError> {
        let params = vec![
            ("q".into(), query.trim().to_string()),
            ("from".into(), format_utc(&window.from)),
            ("to".into(), format_utc(&window.to)),
            ("sortBy".into(), "publishedAt".into()),
            ("pageSize".into(), MAX_NEWS_ITEMS.to_string()),
        ];
        self.get(ApiKind::News, self.news.as_ref(), "", params, Some("X-Api-Key"))
    }

    pub fn web(&self, query: &str) -> Result<Value, ConnectorError> {
        let params = vec![("q".into(), query.trim().to_string()), ("num".into(), MAX_WEB_ITEMS.to_string())];
        self.get(ApiKind::WebSearch, self.web.as_ref(), "", params, None)
    }

    pub fn finance(&self, symbol: &str, range: &TimeWindow, interval: BarInterval) -> Result<Value, ConnectorError> {
        let params = vec![
            ("period1".into(), range.from.timestamp().to_string()),
            ("period2".into(), range.to.timestamp().to_string()),
            ("interval".into(), interval.as_str().to_string()),
        ];
        let path = format!("/{}", symbol.to_uppercase());
        self.get(ApiKind::Finance, self.finance.as_ref(), &path, params, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectors::{ConnectorSet, DataSources, FixtureStore};
    use crate::timefmt::parse_utc;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// Loopback server answering each request with the next canned response.
    fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok((mut stream, _)) = listener.accept() else { return };
                let mut buf = [0u8; 8192];
                let n = stream.read(&mut buf).unwrap_or(0);
                log.lock().unwrap().push(String::from_utf8_lossy(&buf[..n]).to_string());
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        (url, seen)
    }

    fn endpoint(url: &str) -> ProviderEndpoint {
        ProviderEndpoint { endpoint_url: url.to_string(), api_key_env: None, params: BTreeMap::new() }
    }

    fn fast() -> RetryPolicy {
        RetryPolicy { attempts: 2, base_delay: Duration::from_millis(5) }
    }

    #[test]
    fn rate_limit_retried_once_then_reported() {
        let (url, seen) = serve(vec![(429, "{}".into()), (429, "{}".into())]);
        let live = LiveProviders::new(None, Some(endpoint(&url)), None).unwrap().with_retry(fast());
        let set = ConnectorSet::live(live);
        assert!(matches!(set.fetch_web("fed minutes"), Err(ConnectorError::Provider { code: 429, .. })));
        assert_eq!(seen.lock().unwrap().len(), 2);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, seen) = serve(vec![(401, "{}".into()), (200, "{}".into())]);
        let live = LiveProviders::new(None, Some(endpoint(&url)), None).unwrap().with_retry(fast());
        assert!(matches!(live.web("q"), Err(ConnectorError::Provider { code: 401, .. })));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn record_then_replay_is_identical() {
        let news_body = serde_json::json!({"status": "ok", "articles": [
            {"source": {"name": "Wire"}, "title": "PBoC cuts rates", "description": "Broad easing.", "url": "https://wire/1", "publishedAt": "2000-01-02T00:00:00Z"}
        ]})
        .to_string();
        let (url, seen) = serve(vec![(200, news_body)]);
        let mut ep = endpoint(&url);
        ep.params.insert("language".into(), "en".into());
        let dir = tempfile::tempdir().unwrap();
        let window = TimeWindow::new(parse_utc("2000-01-01T00:00:00Z").unwrap(), parse_utc("2000-01-03T00:00:00Z").unwrap());

        let recorder = ConnectorSet::record(
            FixtureStore::open(dir.path()).unwrap(),
            LiveProviders::new(Some(ep), None, None).unwrap().with_retry(fast()),
        );
        let recorded = recorder.fetch_news("PBoC rate cut", &window).unwrap();
        assert_eq!(recorded.items.len(), 1);
        let request = seen.lock().unwrap()[0].clone();
        assert!(request.contains("language=en") && request.contains("sortBy=publishedAt"), "{request}");

        let replayer = ConnectorSet::replay(FixtureStore::open(dir.path()).unwrap());
        let replayed = replayer.fetch_news("  pboc RATE cut", &window).unwrap();
        assert_eq!(serde_json::to_string(&recorded).unwrap(), serde_json::to_string(&replayed).unwrap());
    }

    #[test]
    fn finance_not_found_maps_to_unknown_symbol() {
        let body = r#"{"chart":{"result":null,"error":{"code":"Not Found","description":"No data found, symbol may be delisted"}}}"#;
        let (url, _) = serve(vec![(404, body.into())]);
        let set = ConnectorSet::live(LiveProviders::new(None, None, Some(endpoint(&url))).unwrap().with_retry(fast()));
        let range = TimeWindow::new(parse_utc("2024-10-01T00:00:00Z").unwrap(), parse_utc("2024-10-05T00:00:00Z").unwrap());
        assert_eq!(
            set.fetch_finance("ZZZZ", &range, BarInterval::OneDay).map(|r| r.items),
            Err(ConnectorError::UnknownSymbol("ZZZZ".into()))
        );
    }

    #[test]
    fn unconfigured_provider_and_missing_key() {
        let set = ConnectorSet::live(LiveProviders::new(None, None, None).unwrap());
        assert_eq!(set.fetch_web("q").map(|r| r.items), Err(ConnectorError::NotConfigured(ApiKind::WebSearch)));
        let mut ep = endpoint("http://127.0.0.1:1");
        ep.api_key_env = Some("FINGRAPH_TEST_SURELY_UNSET_KEY".into());
        assert!(matches!(
            LiveProviders::new(Some(ep), None, None),
            Err(ConnectorError::MissingCredential(v)) if v == "FINGRAPH_TEST_SURELY_UNSET_KEY"
        ));
    }
}
