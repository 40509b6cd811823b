//! Rendering for the REST poller: the three-line console block and CSV rows.

use serde_json::Value;
use thiserror::Error;

use crate::node::format_trimmed;

pub const CSV_HEADER: &str = "timestamp_ms,temperature,humidity,pressure";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PollError {
    #[error("payload is not JSON: {0}")]
    NotJson(String),
    #[error("payload has no numeric {0:?}")]
    MissingField(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Telemetry {
    pub temperature: f64,
    pub humidity: f64,
    pub pressure: f64,
}

impl Telemetry {
    pub fn parse(payload: &[u8]) -> Result<Self, PollError> {
        let v: Value = serde_json::from_slice(payload).map_err(|e| PollError::NotJson(e.to_string()))?;
        let field = |name: &'static str| v.get(name).and_then(Value::as_f64).ok_or(PollError::MissingField(name));
        Ok(Telemetry {
            temperature: field("temperature")?,
            humidity: field("humidity")?,
            pressure: field("pressure")?,
        })
    }

    /// Humidity, pressure, temperature, one per line, each ending in '\n'.
    pub fn render_block(&self) -> String {
        format!(
            "inner humidity: {}%\ninner pressure: {} Pa\ninner temperature: {}°C\n",
            format_trimmed(self.humidity),
            format_trimmed(self.pressure),
            format_trimmed(self.temperature)
        )
    }

    pub fn csv_row(&self, timestamp_ms: u64) -> String {
        format!(
            "{timestamp_ms},{},{},{}",
            format_trimmed(self.temperature),
            format_trimmed(self.humidity),
            format_trimmed(self.pressure)
        )
    }
}
