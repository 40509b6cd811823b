//! Reading-level models of the humidity/temperature sensor and the barometer.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid sensor profile {profile}: {reason}")]
pub struct ProfileError {
    pub profile: String,
    pub reason: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Range { min, max }
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.min..=self.max).contains(&v)
    }

    pub fn mid(&self) -> f64 {
        (self.min + self.max) / 2.0
    }
}

/// A (humidity %RH, temperature °C) pair of tolerances or steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HumTemp {
    pub humidity_pct: f64,
    pub temperature_c: f64,
}

/// Barometer characteristics. The defaults are nominal BMP280 figures:
/// 300..1100 hPa, ±100 Pa absolute, ±12 Pa relative, 0.01 Pa output step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PressureProfile {
    pub range: Range,
    pub accuracy_pa: f64,
    pub repeatability_pa: f64,
    pub resolution_pa: f64,
}

impl PressureProfile {
    pub fn bmp280() -> Self {
        PressureProfile {
            range: Range::new(30_000.0, 110_000.0),
            accuracy_pa: 100.0,
            repeatability_pa: 12.0,
            resolution_pa: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorProfile {
    pub name: String,
    pub humidity_range: Range,
    pub temp_range: Range,
    pub accuracy: HumTemp,
    pub repeatability: HumTemp,
    pub resolution: HumTemp,
    pub pressure: PressureProfile,
}

impl SensorProfile {
    /// The node's default sensor, paired with a BMP280.
    pub fn dht22() -> Self {
        SensorProfile {
            name: "DHT22".into(),
            humidity_range: Range::new(0.0, 100.0),
            temp_range: Range::new(-40.0, 80.0),
            accuracy: HumTemp { humidity_pct: 2.0, temperature_c: 0.5 },
            repeatability: HumTemp { humidity_pct: 0.3, temperature_c: 0.2 },
            resolution: HumTemp { humidity_pct: 0.1, temperature_c: 0.1 },
            pressure: PressureProfile::bmp280(),
        }
    }

    pub fn dht11() -> Self {
        SensorProfile {
            name: "DHT11".into(),
            humidity_range: Range::new(20.0, 80.0),
            temp_range: Range::new(0.0, 50.0),
            accuracy: HumTemp { humidity_pct: 5.0, temperature_c: 2.0 },
            repeatability: HumTemp { humidity_pct: 1.0, temperature_c: 1.0 },
            resolution: HumTemp { humidity_pct: 1.0, temperature_c: 1.0 },
            pressure: PressureProfile::bmp280(),
        }
    }

    pub fn sht31() -> Self {
        SensorProfile {
            name: "SHT31".into(),
            humidity_range: Range::new(0.0, 100.0),
            temp_range: Range::new(-40.0, 90.0),
            accuracy: HumTemp { humidity_pct: 2.0, temperature_c: 0.3 },
            repeatability: HumTemp { humidity_pct: 0.1, temperature_c: 0.06 },
            resolution: HumTemp { humidity_pct: 0.01, temperature_c: 0.01 },
            pressure: PressureProfile::bmp280(),
        }
    }

    /// Looks up a preset by (case-insensitive) name.
    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_uppercase().as_str() {
            "DHT22" => Some(Self::dht22()),
            "DHT11" => Some(Self::dht11()),
            "SHT31" => Some(Self::sht31()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let fail = |reason| {
            Err(ProfileError {
                profile: self.name.clone(),
                reason,
            })
        };
        let ranges = [self.humidity_range, self.temp_range, self.pressure.range];
        if ranges.iter().any(|r| r.min.partial_cmp(&r.max) != Some(std::cmp::Ordering::Less)) {
            return fail("range min must be below max");
        }
        if !(self.resolution.humidity_pct > 0.0
            && self.resolution.temperature_c > 0.0
            && self.pressure.resolution_pa > 0.0)
        {
            return fail("resolution must be positive");
        }
        if self.accuracy.humidity_pct < self.repeatability.humidity_pct
            || self.accuracy.temperature_c < self.repeatability.temperature_c
            || self.pressure.accuracy_pa < self.pressure.repeatability_pa
        {
            return fail("accuracy must be at least the repeatability");
        }
        Ok(())
    }
}

/// One environmental state (temperature °C, humidity %RH, pressure Pa).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conditions {
    pub temperature_c: f64,
    pub humidity_pct: f64,
    pub pressure_pa: f64,
}

impl Conditions {
    pub const ZERO: Conditions = Conditions {
        temperature_c: 0.0,
        humidity_pct: 0.0,
        pressure_pa: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub temperature_c: f32,
    pub humidity_pct: f32,
    pub pressure_pa: f64,
    pub timestamp_ms: u64,
}

/// Parameters of the environment process behind the sensors:
/// `base + amplitude·sin(2πt/period) + walk(t)`, where the walk is a
/// mean-reverting Gaussian random walk advanced once per `step_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentModel {
    pub base: Conditions,
    pub amplitude: Conditions,
    pub period_s: f64,
    pub walk_sigma: Conditions,
    /// Fraction of the walk's excursion removed each step.
    pub reversion: f64,
    pub step_s: f64,
}

impl Default for EnvironmentModel {
    fn default() -> Self {
        EnvironmentModel {
            base: Conditions {
                temperature_c: 26.2,
                humidity_pct: 67.0,
                pressure_pa: 100_031.59,
            },
            amplitude: Conditions {
                temperature_c: 1.5,
                humidity_pct: 4.0,
                pressure_pa: 120.0,
            },
            period_s: 86_400.0,
            walk_sigma: Conditions {
                temperature_c: 0.02,
                humidity_pct: 0.05,
                pressure_pa: 1.5,
            },
            reversion: 0.002,
            step_s: 1.0,
        }
    }
}

impl EnvironmentModel {
    /// Constant environment equal to `base`.
    pub fn quiet(base: Conditions) -> Self {
        EnvironmentModel {
            base,
            amplitude: Conditions::ZERO,
            walk_sigma: Conditions::ZERO,
            ..Default::default()
        }
    }
}

/// Seeded ground truth. Querying the same time twice yields the same value;
/// querying an earlier time replays the walk from the start.
#[derive(Debug, Clone)]
pub struct Environment {
    model: EnvironmentModel,
    seed: u64,
    humidity_limits: Range,
    temp_limits: Range,
    pressure_limits: Range,
    rng: ChaCha8Rng,
    walk: Conditions,
    steps: u64,
}

impl Environment {
    pub fn new(model: EnvironmentModel, profile: &SensorProfile, seed: u64) -> Self {
        Environment {
            model,
            seed,
            humidity_limits: Range::new(
                profile.humidity_range.min.max(0.0),
                profile.humidity_range.max.min(100.0),
            ),
            temp_limits: profile.temp_range,
            pressure_limits: profile.pressure.range,
            rng: ChaCha8Rng::seed_from_u64(seed),
            walk: Conditions::ZERO,
            steps: 0,
        }
    }

    fn advance_to(&mut self, t_s: f64) {
        let target = if self.model.step_s > 0.0 {
            (t_s.max(0.0) / self.model.step_s).floor() as u64
        } else {
            0
        };
        if target < self.steps {
            self.rng = ChaCha8Rng::seed_from_u64(self.seed);
            self.walk = Conditions::ZERO;
            self.steps = 0;
        }
        let keep = 1.0 - self.model.reversion;
        let sigma = self.model.walk_sigma;
        while self.steps < target {
            let (a, b, c): (f64, f64, f64) = (
                self.rng.sample(StandardNormal),
                self.rng.sample(StandardNormal),
                self.rng.sample(StandardNormal),
            );
            self.walk.temperature_c = self.walk.temperature_c * keep + sigma.temperature_c * a;
            self.walk.humidity_pct = self.walk.humidity_pct * keep + sigma.humidity_pct * b;
            self.walk.pressure_pa = self.walk.pressure_pa * keep + sigma.pressure_pa * c;
            self.steps += 1;
        }
    }

    pub fn ground_truth(&mut self, t_s: f64) -> Conditions {
        self.advance_to(t_s);
        let m = &self.model;
        let phase = if m.period_s > 0.0 {
            (2.0 * std::f64::consts::PI * t_s / m.period_s).sin()
        } else {
            0.0
        };
        Conditions {
            temperature_c: self
                .temp_limits
                .clamp(m.base.temperature_c + m.amplitude.temperature_c * phase + self.walk.temperature_c),
            humidity_pct: self
                .humidity_limits
                .clamp(m.base.humidity_pct + m.amplitude.humidity_pct * phase + self.walk.humidity_pct),
            pressure_pa: self
                .pressure_limits
                .clamp(m.base.pressure_pa + m.amplitude.pressure_pa * phase + self.walk.pressure_pa),
        }
    }
}

/// Rounds `v` to the nearest multiple of `step`, ties away from zero.
pub fn quantize(v: f64, step: f64) -> f64 {
    let steps_per_unit = 1.0 / step;
    let n = (v / step).round();
    if (steps_per_unit - steps_per_unit.round()).abs() < 1e-9 {
        // exact division gives the double nearest to n·step
        n / steps_per_unit.round()
    } else {
        n * step
    }
}

/// A sensor instance: a profile plus the calibration offset drawn for this
/// particular device.
#[derive(Debug, Clone, PartialEq)]
pub struct Sensor {
    pub profile: SensorProfile,
    pub bias: Conditions,
    /// Multiplies the repeatability noise; 0 disables it.
    pub noise_scale: f64,
}

impl Sensor {
    /// Draws a per-device bias uniformly within ±accuracy.
    pub fn new<R: Rng + ?Sized>(profile: SensorProfile, rng: &mut R) -> Self {
        let mut draw = |acc: f64| if acc > 0.0 { rng.random_range(-acc..=acc) } else { 0.0 };
        let bias = Conditions {
            temperature_c: draw(profile.accuracy.temperature_c),
            humidity_pct: draw(profile.accuracy.humidity_pct),
            pressure_pa: draw(profile.pressure.accuracy_pa),
        };
        Sensor {
            profile,
            bias,
            noise_scale: 1.0,
        }
    }

    /// No bias, no noise: readings are the quantized truth.
    pub fn ideal(profile: SensorProfile) -> Self {
        Sensor {
            profile,
            bias: Conditions::ZERO,
            noise_scale: 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, truth: Conditions, rng: &mut R, timestamp_ms: u64) -> SensorReading {
        let p = &self.profile;
        let mut noise = |sigma: f64| {
            if self.noise_scale == 0.0 || sigma == 0.0 {
                0.0
            } else {
                let z: f64 = rng.sample(StandardNormal);
                z * sigma * self.noise_scale
            }
        };
        let t = truth.temperature_c + self.bias.temperature_c + noise(p.repeatability.temperature_c);
        let h = truth.humidity_pct + self.bias.humidity_pct + noise(p.repeatability.humidity_pct);
        let pa = truth.pressure_pa + self.bias.pressure_pa + noise(p.pressure.repeatability_pa);
        SensorReading {
            temperature_c: p.temp_range.clamp(quantize(t, p.resolution.temperature_c)) as f32,
            humidity_pct: p
                .humidity_range
                .clamp(quantize(h, p.resolution.humidity_pct))
                .clamp(0.0, 100.0) as f32,
            pressure_pa: p.pressure.range.clamp(quantize(pa, p.pressure.resolution_pa)),
            timestamp_ms,
        }
    }
}
