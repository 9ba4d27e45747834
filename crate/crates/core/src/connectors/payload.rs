//! Provider-shaped payloads to validated domain values.
//!
//! News payloads follow the NewsAPI `everything` shape, web payloads the
//! Google Custom Search shape, and price payloads the Yahoo chart shape.

use chrono::{DateTime, TimeZone, Utc};
use serde_json::Value;

use super::{ConnectorError, TimeWindow, MAX_NEWS_ITEMS, MAX_WEB_ITEMS};
use crate::evidence::{Evidence, OhlcBar};
use crate::timefmt::parse_utc;

fn str_at<'a>(v: &'a Value, path: &[&str]) -> Option<&'a str> {
    path.iter().try_fold(v, |v, k| v.get(k)).and_then(Value::as_str)
}

fn join_content(title: &str, body: &str) -> String {
    let (title, body) = (title.trim(), body.trim());
    match (title.is_empty(), body.is_empty()) {
        (false, false) => format!("{title}. {body}"),
        (false, true) => title.to_string(),
        _ => body.to_string(),
    }
}

pub fn parse_news_payload(payload: &Value, window: &TimeWindow, retrieved_at: DateTime<Utc>) -> Result<Vec<Evidence>, ConnectorError> {
    if str_at(payload, &["status"]) == Some("error") {
        return Err(ConnectorError::Provider {
            code: 0,
            message: str_at(payload, &["message"]).unwrap_or("provider reported an error").to_string(),
        });
    }
    let articles = payload
        .get("articles")
        .and_then(Value::as_array)
        .ok_or_else(|| ConnectorError::DataIntegrity("news payload has no `articles` array".into()))?;

    let mut items = Vec::new();
    for article in articles {
        let content = join_content(str_at(article, &["title"]).unwrap_or(""), str_at(article, &["description"]).unwrap_or(""));
        let published_at = str_at(article, &["publishedAt"]).and_then(parse_utc);
        if published_at.is_some_and(|p| !window.contains(&p)) {
            continue;
        }
        let evidence = Evidence {
            content,
            source_name: str_at(article, &["source", "name"]).unwrap_or("unknown").to_string(),
            source_url: str_at(article, &["url"]).unwrap_or("").to_string(),
            published_at,
            retrieved_at,
            weight: None,
            payload: None,
        };
        match evidence.check() {
            Ok(()) => items.push(evidence),
            Err(why) => tracing::warn!(%why, "dropping news item"),
        }
    }
    // newest first; undated items last, original order otherwise
    items.sort_by_key(|e| std::cmp::Reverse(e.published_at));
    items.truncate(MAX_NEWS_ITEMS);
    Ok(items)
}

pub fn parse_web_payload(payload: &Value, retrieved_at: DateTime<Utc>) -> Result<Vec<Evidence>, ConnectorError> {
    if let Some(err) = payload.get("error") {
        return Err(ConnectorError::Provider {
            code: err.get("code").and_then(Value::as_u64).unwrap_or(0) as u16,
            message: str_at(err, &["message"]).unwrap_or("provider reported an error").to_string(),
        });
    }
    let Some(results) = payload.get("items").and_then(Value::as_array) else {
        // the engine omits `items` entirely when nothing matched
        return Ok(Vec::new());
    };
    let mut items = Vec::new();
    for r in results {
        let url = str_at(r, &["link"]).unwrap_or("").to_string();
        let source_name = str_at(r, &["displayLink"])
            .map(str::to_string)
            .or_else(|| url.split('/').nth(2).map(str::to_string))
            .unwrap_or_else(|| "web".into());
        let evidence = Evidence {
            content: join_content(str_at(r, &["title"]).unwrap_or(""), str_at(r, &["snippet"]).unwrap_or("")),
            source_name,
            source_url: url,
            published_at: None,
            retrieved_at,
            weight: None,
            payload: None,
        };
        match evidence.check() {
            Ok(()) => items.push(evidence),
            Err(why) => tracing::warn!(%why, "dropping web item"),
        }
        if items.len() == MAX_WEB_ITEMS {
            break;
        }
    }
    Ok(items)
}

pub fn parse_chart_payload(payload: &Value, symbol: &str) -> Result<Vec<OhlcBar>, ConnectorError> {
    let chart = payload
        .get("chart")
        .ok_or_else(|| ConnectorError::DataIntegrity("price payload has no `chart` object".into()))?;
    if let Some(err) = chart.get("error").filter(|e| !e.is_null()) {
        let code = str_at(err, &["code"]).unwrap_or("");
        if code.eq_ignore_ascii_case("Not Found") {
            return Err(ConnectorError::UnknownSymbol(symbol.to_string()));
        }
        return Err(ConnectorError::Provider {
            code: 0,
            message: str_at(err, &["description"]).unwrap_or(code).to_string(),
        });
    }
    let result = chart
        .get("result")
        .and_then(Value::as_array)
        .and_then(|r| r.first())
        .ok_or_else(|| ConnectorError::UnknownSymbol(symbol.to_string()))?;
    let empty = Vec::new();
    let stamps = result.get("timestamp").and_then(Value::as_array).unwrap_or(&empty);
    let quote = result
        .get("indicators")
        .and_then(|i| i.get("quote"))
        .and_then(Value::as_array)
        .and_then(|q| q.first())
        .ok_or_else(|| ConnectorError::DataIntegrity("price payload has no quote series".into()))?;
    let series = |name: &str| -> Result<&Vec<Value>, ConnectorError> {
        let s = quote
            .get(name)
            .and_then(Value::as_array)
            .ok_or_else(|| ConnectorError::DataIntegrity(format!("quote series `{name}` missing")))?;
        if s.len() != stamps.len() {
            return Err(ConnectorError::DataIntegrity(format!("quote series `{name}` length mismatch")));
        }
        Ok(s)
    };
    let (open, high, low, close) = (series("open")?, series("high")?, series("low")?, series("close")?);
    let volume = quote.get("volume").and_then(Value::as_array);

    let mut bars: Vec<OhlcBar> = Vec::with_capacity(stamps.len());
    for (i, ts) in stamps.iter().enumerate() {
        let secs = ts
            .as_i64()
            .ok_or_else(|| ConnectorError::DataIntegrity(format!("timestamp[{i}] is not an integer")))?;
        let prices = [&open[i], &high[i], &low[i], &close[i]].map(Value::as_f64);
        let [Some(o), Some(h), Some(l), Some(c)] = prices else {
            // the provider emits nulls for halted or empty buckets
            continue;
        };
        let time = Utc
            .timestamp_opt(secs, 0)
            .single()
            .ok_or_else(|| ConnectorError::DataIntegrity(format!("timestamp[{i}] out of range")))?;
        let bar = OhlcBar {
            time,
            open: o,
            high: h,
            low: l,
            close: c,
            volume: volume.and_then(|v| v.get(i)).and_then(Value::as_u64),
        };
        bar.check().map_err(ConnectorError::DataIntegrity)?;
        if bars.last().is_some_and(|prev| prev.time >= bar.time) {
            return Err(ConnectorError::DataIntegrity(format!("bar times not strictly increasing at index {i}")));
        }
        bars.push(bar);
    }
    Ok(bars)
}
