//! Telemetry JSON in the node's wire format:
//! `{"temperature":26.200001,"humidity":67,"pressure":100031.59}`.
//!
//! Numbers are printed with six fractional digits and trailing zeros (and a
//! bare trailing '.') removed. Temperature and humidity are single precision
//! on the device and are widened to double before formatting, which is where
//! digits such as `26.200001` come from.

use super::sensor::SensorReading;

/// `format!("{:.6}")` with trailing zeros trimmed.
pub fn format_trimmed(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_owned()
    } else {
        s.to_owned()
    }
}

pub fn build_payload(reading: &SensorReading) -> String {
    format!(
        "{{\"temperature\":{},\"humidity\":{},\"pressure\":{}}}",
        format_trimmed(reading.temperature_c as f64),
        format_trimmed(reading.humidity_pct as f64),
        format_trimmed(reading.pressure_pa)
    )
}
