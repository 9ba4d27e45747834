//! Data-source connectors for news, web search and OHLC price history,
//! with record/replay fixtures for hermetic runs.

mod fixtures;
mod payload;
mod providers;

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use chrono::{DateTime, Duration, SubsecRound, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::evidence::{BarInterval, Evidence, OhlcBar};
use crate::graph::ApiKind;
use crate::timefmt::format_utc;

pub use fixtures::{FixtureFile, FixtureStore};
pub use payload::{parse_chart_payload, parse_news_payload, parse_web_payload};
pub use providers::{LiveProviders, ProviderEndpoint};

pub const MAX_NEWS_ITEMS: usize = 20;
pub const MAX_WEB_ITEMS: usize = 10;
pub const MAX_MINUTE_RANGE_DAYS: i64 = 7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConnectorError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider error {code}: {message}")]
    Provider { code: u16, message: String },
    #[error("no fixture recorded for `{0}`")]
    FixtureMiss(String),
    #[error("unknown symbol {0}")]
    UnknownSymbol(String),
    #[error("data integrity error: {0}")]
    DataIntegrity(String),
    #[error("fixture store error: {0}")]
    Fixture(String),
    #[error("{0} is not configured for live access")]
    NotConfigured(ApiKind),
    #[error("missing environment variable {0}")]
    MissingCredential(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FixtureMode {
    Record,
    #[default]
    Replay,
    Live,
}

impl FromStr for FixtureMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "record" => Ok(FixtureMode::Record),
            "replay" => Ok(FixtureMode::Replay),
            "live" => Ok(FixtureMode::Live),
            other => Err(format!("unknown fixtures mode `{other}` (expected record, replay or live)")),
        }
    }
}

impl fmt::Display for FixtureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FixtureMode::Record => "record",
            FixtureMode::Replay => "replay",
            FixtureMode::Live => "live",
        })
    }
}

/// Inclusive time range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeWindow {
    pub from: DateTime<Utc>,
    pub to: DateTime<Utc>,
}

impl TimeWindow {
    pub fn new(from: DateTime<Utc>, to: DateTime<Utc>) -> Self {
        TimeWindow { from, to }
    }

    pub fn contains(&self, t: &DateTime<Utc>) -> bool {
        self.from <= *t && *t <= self.to
    }
}

/// Canonical request parameters, one variant per data source.
#[derive(Debug, Clone, PartialEq)]
pub enum RequestParams<'a> {
    News { query: &'a str, window: TimeWindow },
    Web { query: &'a str },
    Finance { symbol: &'a str, range: TimeWindow, interval: BarInterval },
}

impl RequestParams<'_> {
    pub fn api(&self) -> ApiKind {
        match self {
            RequestParams::News { .. } => ApiKind::News,
            RequestParams::Web { .. } => ApiKind::WebSearch,
            RequestParams::Finance { .. } => ApiKind::Finance,
        }
    }
}

/// Lowercased, trimmed, internal whitespace collapsed.
pub fn canonical_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Deterministic fixture key: api name and canonical parameters joined by `|`.
pub fn record_key(params: &RequestParams<'_>) -> String {
    let api = params.api().key_name();
    match params {
        RequestParams::News { query, window } => {
            format!("{api}|{}|{}|{}", canonical_text(query), format_utc(&window.from), format_utc(&window.to))
        }
        RequestParams::Web { query } => format!("{api}|{}", canonical_text(query)),
        RequestParams::Finance { symbol, range, interval } => format!(
            "{api}|{}|{}|{}|{interval}",
            canonical_text(symbol),
            format_utc(&range.from),
            format_utc(&range.to)
        ),
    }
}

/// Results of one upstream call and when they were obtained (the recording
/// time, for replayed fixtures).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Retrieved<T> {
    pub items: Vec<T>,
    #[serde(with = "crate::timefmt::serde_utc")]
    pub retrieved_at: DateTime<Utc>,
}

pub trait DataSources: Send + Sync {
    /// Up to 20 items published inside `window`, newest first.
    fn fetch_news(&self, query: &str, window: &TimeWindow) -> Result<Retrieved<Evidence>, ConnectorError>;
    /// Up to 10 items in engine order.
    fn fetch_web(&self, query: &str) -> Result<Retrieved<Evidence>, ConnectorError>;
    /// Bars strictly ascending in time, each passing the OHLC checks.
    fn fetch_finance(&self, symbol: &str, range: &TimeWindow, interval: BarInterval) -> Result<Retrieved<OhlcBar>, ConnectorError>;
}

fn symbol_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Za-z0-9.^-]{1,12}$").expect("symbol regex compiles"))
}

pub fn check_news_request(query: &str, window: &TimeWindow) -> Result<(), ConnectorError> {
    if query.trim().is_empty() {
        return Err(ConnectorError::Precondition("news query is empty".into()));
    }
    if window.from > window.to {
        return Err(ConnectorError::Precondition(format!(
            "news window starts {} after it ends {}",
            format_utc(&window.from),
            format_utc(&window.to)
        )));
    }
    Ok(())
}

pub fn check_finance_request(symbol: &str, range: &TimeWindow, interval: BarInterval) -> Result<(), ConnectorError> {
    if !symbol_regex().is_match(symbol) {
        return Err(ConnectorError::Precondition(format!("invalid symbol `{symbol}`")));
    }
    if range.from >= range.to {
        return Err(ConnectorError::Precondition("finance range is empty".into()));
    }
    if interval == BarInterval::OneMinute && range.to - range.from > Duration::days(MAX_MINUTE_RANGE_DAYS) {
        return Err(ConnectorError::Precondition(format!(
            "1m bars are limited to ranges of {MAX_MINUTE_RANGE_DAYS} days"
        )));
    }
    Ok(())
}

/// Connectors backed by a fixture store, a live provider set, or both.
pub struct ConnectorSet {
    mode: FixtureMode,
    store: Option<FixtureStore>,
    live: Option<LiveProviders>,
}

impl ConnectorSet {
    /// Fixture-only; no network client exists in this mode.
    pub fn replay(store: FixtureStore) -> Self {
        ConnectorSet { mode: FixtureMode::Replay, store: Some(store), live: None }
    }

    pub fn record(store: FixtureStore, live: LiveProviders) -> Self {
        ConnectorSet { mode: FixtureMode::Record, store: Some(store), live: Some(live) }
    }

    pub fn live(live: LiveProviders) -> Self {
        ConnectorSet { mode: FixtureMode::Live, store: None, live: Some(live) }
    }

    pub fn mode(&self) -> FixtureMode {
        self.mode
    }

    pub fn has_network_client(&self) -> bool {
        self.live.is_some()
    }

    /// Returns the provider payload and the time it was retrieved.
    fn payload(
        &self,
        params: &RequestParams<'_>,
        fetch: impl FnOnce(&LiveProviders) -> Result<Value, ConnectorError>,
    ) -> Result<(Value, DateTime<Utc>), ConnectorError> {
        let key = record_key(params);
        match self.mode {
            FixtureMode::Replay => {
                let store = self.store.as_ref().expect("replay has a store");
                let file = store.get(&key)?;
                Ok((file.payload, file.recorded_at))
            }
            FixtureMode::Record => {
                let live = self.live.as_ref().expect("record has live providers");
                let payload = fetch(live)?;
                let now = Utc::now().trunc_subsecs(0);
                let store = self.store.as_ref().expect("record has a store");
                store.put(FixtureFile { key, recorded_at: now, api: params.api().key_name().into(), payload: payload.clone() })?;
                Ok((payload, now))
            }
            FixtureMode::Live => {
                let live = self.live.as_ref().expect("live has providers");
                Ok((fetch(live)?, Utc::now().trunc_subsecs(0)))
            }
        }
    }
}

impl DataSources for ConnectorSet {
    fn fetch_news(&self, query: &str, window: &TimeWindow) -> Result<Retrieved<Evidence>, ConnectorError> {
        check_news_request(query, window)?;
        let params = RequestParams::News { query, window: *window };
        let (payload, retrieved_at) = self.payload(&params, |live| live.news(query, window))?;
        Ok(Retrieved { items: parse_news_payload(&payload, window, retrieved_at)?, retrieved_at })
    }

    fn fetch_web(&self, query: &str) -> Result<Retrieved<Evidence>, ConnectorError> {
        if query.trim().is_empty() {
            return Err(ConnectorError::Precondition("web query is empty".into()));
        }
        let params = RequestParams::Web { query };
        let (payload, retrieved_at) = self.payload(&params, |live| live.web(query))?;
        Ok(Retrieved { items: parse_web_payload(&payload, retrieved_at)?, retrieved_at })
    }

    fn fetch_finance(&self, symbol: &str, range: &TimeWindow, interval: BarInterval) -> Result<Retrieved<OhlcBar>, ConnectorError> {
        check_finance_request(symbol, range, interval)?;
        let params = RequestParams::Finance { symbol, range: *range, interval };
        let (payload, retrieved_at) = self.payload(&params, |live| live.finance(symbol, range, interval))?;
        Ok(Retrieved { items: parse_chart_payload(&payload, symbol)?, retrieved_at })
    }
}
