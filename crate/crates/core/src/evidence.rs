//! Retrieved evidence items and candlestick samples.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::timefmt::{serde_utc, serde_utc_opt};

/// One timestamped retrieval result with source attribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub content: String,
    pub source_name: String,
    pub source_url: String,
    #[serde(default, with = "serde_utc_opt", skip_serializing_if = "Option::is_none")]
    pub published_at: Option<DateTime<Utc>>,
    #[serde(with = "serde_utc")]
    pub retrieved_at: DateTime<Utc>,
    /// Item-level temporal weight, assigned after traversal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<EvidencePayload>,
}

/// Structured data carried alongside the textual content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvidencePayload {
    Ohlc {
        symbol: String,
        interval: BarInterval,
        bars: Vec<OhlcBar>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BarInterval {
    #[serde(rename = "1m")]
    OneMinute,
    #[serde(rename = "1d")]
    OneDay,
}

impl BarInterval {
    pub fn as_str(self) -> &'static str {
        match self {
            BarInterval::OneMinute => "1m",
            BarInterval::OneDay => "1d",
        }
    }
}

impl std::fmt::Display for BarInterval {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One candlestick sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OhlcBar {
    #[serde(with = "serde_utc")]
    pub time: DateTime<Utc>,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume: Option<u64>,
}

impl OhlcBar {
    /// Checks the price-ordering invariants, returning a description of the
    /// first one broken.
    pub fn check(&self) -> Result<(), String> {
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(format!("bar at {} has a non-positive price", self.time));
        }
        if self.low > self.high {
            return Err(format!("bar at {}: low {} > high {}", self.time, self.low, self.high));
        }
        if self.low > self.open.min(self.close) {
            return Err(format!("bar at {}: low {} above open/close", self.time, self.low));
        }
        if self.high < self.open.max(self.close) {
            return Err(format!("bar at {}: high {} below open/close", self.time, self.high));
        }
        Ok(())
    }
}

impl Evidence {
    pub fn check(&self) -> Result<(), String> {
        if self.content.trim().is_empty() {
            return Err("evidence content is empty".into());
        }
        if let Some(p) = self.published_at {
            if p > self.retrieved_at {
                return Err(format!(
                    "published_at {} is after retrieved_at {}",
                    p, self.retrieved_at
                ));
            }
        }
        Ok(())
    }

    pub fn bars(&self) -> Option<(&str, &[OhlcBar])> {
        match &self.payload {
            Some(EvidencePayload::Ohlc { symbol, bars, .. }) => Some((symbol.as_str(), bars.as_slice())),
            None => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timefmt::parse_utc;

    fn bar(o: f64, h: f64, l: f64, c: f64) -> OhlcBar {
        OhlcBar { time: parse_utc("2024-10-01T00:00:00Z").unwrap(), open: o, high: h, low: l, close: c, volume: None }
    }

    #[test]
    fn bar_invariants() {
        assert!(bar(10.0, 12.0, 9.0, 11.0).check().is_ok());
        assert!(bar(10.0, 9.0, 12.0, 11.0).check().is_err());
        assert!(bar(10.0, 10.5, 10.2, 10.4).check().is_err());
        assert!(bar(10.0, 10.5, 9.0, 10.9).check().is_err());
        assert!(bar(-1.0, 10.5, 9.0, 10.0).check().is_err());
    }

    #[test]
    fn evidence_publication_cannot_follow_retrieval() {
        let e = Evidence {
            content: "x".into(),
            source_name: "s".into(),
            source_url: "u".into(),
            published_at: parse_utc("2024-10-02T00:00:00Z"),
            retrieved_at: parse_utc("2024-10-01T00:00:00Z").unwrap(),
            weight: None,
            payload: None,
        };
        assert!(e.check().is_err());
        assert!(Evidence { content: "  ".into(), published_at: None, ..e }.check().is_err());
    }
}
