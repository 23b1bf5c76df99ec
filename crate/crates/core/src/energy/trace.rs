use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Synthetic harvesting profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceProfile {
    /// Half-sine "days" in the first half of each period, darkness in the
    /// second. Each day gets a random brightness factor in `[0.5, 1.5)`.
    DayNight {
        period_s: f64,
        peak_w: f64,
    },
    /// Random levels uniform in `[0, peak]`, held for exponential durations.
    Bursty {
        peak_w: f64,
        mean_hold_s: f64,
    },
    Constant {
        power_w: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceSource {
    File { path: PathBuf },
    Synthetic { seed: u64, profile: TraceProfile },
}

/// Sample-and-hold harvested power.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerTrace {
    pub times: Vec<f64>,
    pub power_w: Vec<f64>,
    /// End of the last sample's hold interval.
    pub end_s: f64,
    pub source: TraceSource,
}

impl PowerTrace {
    pub fn new(
        times: Vec<f64>,
        power_w: Vec<f64>,
        end_s: f64,
        source: TraceSource,
    ) -> Result<Self> {
        let t = Self {
            times,
            power_w,
            end_s,
            source,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() || self.times.len() != self.power_w.len() {
            return Err(Error::TraceValidation(
                "trace needs at least one (time, power) sample".into(),
            ));
        }
        for (i, w) in self.times.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(Error::TraceValidation(format!(
                    "timestamps must strictly increase (sample {}: {} after {})",
                    i + 1,
                    w[1],
                    w[0]
                )));
            }
        }
        if let Some(p) = self.power_w.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::TraceValidation(format!(
                "power must be finite and >= 0, found {p}"
            )));
        }
        if !(self.end_s >= *self.times.last().expect("non-empty")) {
            return Err(Error::TraceValidation(
                "trace end precedes its last sample".into(),
            ));
        }
        Ok(())
    }

    pub fn start_s(&self) -> f64 {
        self.times[0]
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s()
    }

    /// Power at absolute time `t`; held constant past either end.
    pub fn power_at(&self, t: f64) -> f64 {
        let idx = self.times.partition_point(|&x| x <= t);
        self.power_w[idx.saturating_sub(1)]
    }

    /// Loads `timestamp_s,voltage_V,current_A` (P = V*I*eff) or
    /// `timestamp_s,power_W` (P = power*eff). The header picks the schema.
    pub fn from_csv(path: impl AsRef<Path>, efficiency: f64) -> Result<Self> {
        let path = path.as_ref();
        if !(0.0..=1.0).contains(&efficiency) {
            return Err(Error::InvalidConfig(format!(
                "harvester efficiency {efficiency} outside [0, 1]"
            )));
        }
        let perr = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| perr(0, e.to_string()))?;
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| perr(1, e.to_string()))?
            .iter()
            .map(str::to_ascii_lowercase)
            .collect();
        let vi = match header.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
            ["timestamp_s", "voltage_v", "current_a"] => true,
            ["timestamp_s", "power_w"] => false,
            _ => {
                return Err(perr(
                    1,
                    format!(
                        "unrecognised header {:?}; expected timestamp_s,voltage_V,current_A or timestamp_s,power_W",
                        header
                    ),
                ))
            }
        };
        let mut times = Vec::new();
        let mut power = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| perr(line, e.to_string()))?;
            let nums = rec
                .iter()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| perr(line, format!("{v:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if nums.iter().any(|v| !v.is_finite()) {
                return Err(perr(line, "non-finite value".into()));
            }
            let p = if vi { nums[1] * nums[2] } else { nums[1] };
            if p < 0.0 {
                return Err(perr(line, format!("negative power {p}")));
            }
            if let Some(&prev) = times.last() {
                if nums[0] <= prev {
                    return Err(Error::TraceValidation(format!(
                        "{}:{line}: timestamp {} does not increase past {prev}",
                        path.display(),
                        nums[0]
                    )));
                }
            }
            times.push(nums[0]);
            power.push(p * efficiency);
        }
        if times.is_empty() {
            return Err(Error::TraceValidation(format!(
                "{} has no samples",
                path.display()
            )));
        }
        let end_s = match times.as_slice() {
            [.., a, b] => b + (b - a),
            [only] => *only,
            [] => unreachable!(),
        };
        Self::new(
            times,
            power,
            end_s,
            TraceSource::File {
                path: path.to_path_buf(),
            },
        )
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        let io = |e: csv::Error| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        };
        w.write_record(["timestamp_s", "power_W"]).map_err(io)?;
        for (t, p) in self.times.iter().zip(&self.power_w) {
            w.write_record([t.to_string(), p.to_string()]).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Deterministic synthetic trace sampled every `dt_s` over `[0, duration_s)`.
pub fn synth_trace(
    seed: u64,
    profile: &TraceProfile,
    duration_s: f64,
    dt_s: f64,
) -> Result<PowerTrace> {
    if !(duration_s > 0.0 && duration_s.is_finite()) || !(dt_s > 0.0 && dt_s <= duration_s) {
        return Err(Error::InvalidConfig(format!(
            "synthetic trace needs 0 < dt <= duration, got dt {dt_s}, duration {duration_s}"
        )));
    }
    let n = (duration_s / dt_s).ceil() as usize;
    let times: Vec<f64> = (0..n).map(|i| i as f64 * dt_s).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let power = match *profile {
        TraceProfile::Constant { power_w } => {
            check_level(power_w)?;
            vec![power_w; n]
        }
        TraceProfile::DayNight { period_s, peak_w } => {
            check_level(peak_w)?;
            if !(period_s > 0.0) {
                return Err(Error::InvalidConfig(
                    "day-night period must be positive".into(),
                ));
            }
            let half = period_s / 2.0;
            let mut day = usize::MAX;
            let mut factor = 1.0;
            times
                .iter()
                .map(|&t| {
                    let d = (t / period_s).floor() as usize;
                    if d != day {
                        day = d;
                        factor = rng.random_range(0.5..1.5);
                    }
                    let phase = t - d as f64 * period_s;
                    // noise is drawn for every sample so day/night share one stream
                    let cloud: f64 = rng.sample(StandardNormal);
                    if phase < half {
                        let shape = (std::f64::consts::PI * (phase + 0.5 * dt_s.min(half)) / half)
                            .sin()
                            .max(0.05);
                        peak_w * factor * shape * (1.0 + 0.15 * cloud).max(0.2)
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        TraceProfile::Bursty {
            peak_w,
            mean_hold_s,
        } => {
            check_level(peak_w)?;
            let hold = Exp::new(1.0 / mean_hold_s)
                .map_err(|_| Error::InvalidConfig("bursty mean_hold_s must be positive".into()))?;
            let mut until = f64::NEG_INFINITY;
            let mut level = 0.0;
            times
                .iter()
                .map(|&t| {
                    if t >= until {
                        level = rng.random_range(0.0..=peak_w);
                        until = t + hold.sample(&mut rng).max(dt_s);
                    }
                    level
                })
                .collect()
        }
    };
    PowerTrace::new(
        times,
        power,
        n as f64 * dt_s,
        TraceSource::Synthetic {
            seed,
            profile: profile.clone(),
        },
    )
}

fn check_level(p: f64) -> Result<()> {
    if p >= 0.0 && p.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "trace power must be non-negative, got {p}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_schemas() {
        let dir = tempfile::tempdir().unwrap();
        let vi = dir.path().join("vi.csv");
        std::fs::write(
            &vi,
            "timestamp_s,voltage_V,current_A\n0.0,2.0,0.001\n1.0,3.0,0.002\n",
        )
        .unwrap();
        let t = PowerTrace::from_csv(&vi, 1.0).unwrap();
        assert!((t.power_w[0] - 0.002).abs() < 1e-15);
        assert_eq!(t.end_s, 2.0);
        let dark = PowerTrace::from_csv(&vi, 0.0).unwrap();
        assert!(dark.power_w.iter().all(|p| *p == 0.0));

        let pw = dir.path().join("pw.csv");
        std::fs::write(&pw, "timestamp_s,power_W\n0,0.5\n2,0.25\n").unwrap();
        let t = PowerTrace::from_csv(&pw, 0.5).unwrap();
        assert_eq!(t.power_w, vec![0.25, 0.125]);
        assert_eq!(t.power_at(1.9), 0.25);
        assert_eq!(t.power_at(2.0), 0.125);
        assert_eq!(t.power_at(-1.0), 0.25);
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let dup = dir.path().join("dup.csv");
        std::fs::write(&dup, "timestamp_s,power_W\n0,1\n0,1\n").unwrap();
        assert!(matches!(
            PowerTrace::from_csv(&dup, 1.0),
            Err(Error::TraceValidation(_))
        ));

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "timestamp_s,power_W\n0,1\n1,abc\n").unwrap();
        match PowerTrace::from_csv(&bad, 1.0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let hdr = dir.path().join("hdr.csv");
        std::fs::write(&hdr, "t,p\n0,1\n").unwrap();
        assert!(matches!(
            PowerTrace::from_csv(&hdr, 1.0),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn synthetic_profiles() {
        let zero = synth_trace(1, &TraceProfile::Constant { power_w: 0.0 }, 50.0, 1.0).unwrap();
        assert!(zero.power_w.iter().all(|p| *p == 0.0));

        let dn = TraceProfile::DayNight {
            period_s: 100.0,
            peak_w: 0.02,
        };
        let a = synth_trace(3, &dn, 1000.0, 1.0).unwrap();
        assert_eq!(a, synth_trace(3, &dn, 1000.0, 1.0).unwrap());
        assert_ne!(a.power_w, synth_trace(4, &dn, 1000.0, 1.0).unwrap().power_w);
        for period in a.power_w.chunks(100) {
            assert_eq!(period.iter().filter(|p| **p == 0.0).count(), 50);
        }

        let b = synth_trace(
            5,
            &TraceProfile::Bursty {
                peak_w: 0.01,
                mean_hold_s: 20.0,
            },
            500.0,
            1.0,
        )
        .unwrap();
        assert!(b.power_w.iter().all(|p| (0.0..=0.01).contains(p)));
        assert_eq!(b.duration(), 500.0);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = synth_trace(
            9,
            &TraceProfile::DayNight {
                period_s: 60.0,
                peak_w: 0.01,
            },
            120.0,
            1.0,
        )
        .unwrap();
        let p = dir.path().join("t.csv");
        t.write_csv(&p).unwrap();
        let back = PowerTrace::from_csv(&p, 1.0).unwrap();
        assert_eq!(back.power_w, t.power_w);
        assert_eq!(back.times, t.times);
    }
}
