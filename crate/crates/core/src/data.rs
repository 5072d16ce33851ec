//! File formats: shot-record CSV, simulation and chain tables, JSON reports
//! and run manifests.
//!
//! Floating-point CSV cells are written with 17 significant digits, which
//! round-trips every `f64` exactly.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{PoolDataset, PosteriorSample, ShotRecord};
use crate::simulate::FrequencyDraw;
use crate::two_scale::{BandCurve, DiffusionRates, GateCount, PoolAngle};

/// `x` in scientific notation with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Reads a shot-record CSV from `path`.
pub fn parse_dataset(path: impl AsRef<Path>) -> Result<PoolDataset> {
    let mut text = String::new();
    File::open(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?
        .read_to_string(&mut text)?;
    parse_dataset_str(&text)
}

/// Parses a shot-record CSV.
///
/// Columns are found by header name: `gates`, `shots` and either `zeros` or
/// `frequency` are required, `timestamp` is optional, other columns are
/// ignored. A frequency `f` becomes `zeros = round(f·shots)`.
pub fn parse_dataset_str(text: &str) -> Result<PoolDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h.eq_ignore_ascii_case(name));
    let header_err = |msg: &str| Error::Parse {
        line: 1,
        msg: format!(
            "malformed header `{}`: {msg}",
            header.iter().collect::<Vec<_>>().join(",")
        ),
    };
    let gates = col("gates").ok_or_else(|| header_err("missing `gates`"))?;
    let shots = col("shots").ok_or_else(|| header_err("missing `shots`"))?;
    let zeros = col("zeros");
    let freq = col("frequency");
    if zeros.is_none() && freq.is_none() {
        return Err(header_err("need `zeros` or `frequency`"));
    }
    let stamp = col("timestamp");

    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let err = |msg: String| Error::Parse { line, msg };
        let cell = |i: usize, name: &str| {
            row.get(i)
                .ok_or_else(|| err(format!("missing `{name}` field")))
        };
        let int = |i: usize, name: &str| -> Result<u64> {
            let s = cell(i, name)?;
            s.parse::<u64>().map_err(|_| {
                err(format!(
                    "`{name}` must be a non-negative integer, got `{s}`"
                ))
            })
        };
        let g = int(gates, "gates")?;
        let n = int(shots, "shots")?;
        if n == 0 {
            return Err(err("shots must be ≥ 1".into()));
        }
        let z = match zeros {
            Some(i) => int(i, "zeros")?,
            None => {
                let s = cell(freq.expect("checked"), "frequency")?;
                let f: f64 = s
                    .parse()
                    .map_err(|_| err(format!("`frequency` must be a number, got `{s}`")))?;
                if !(0.0..=1.0).contains(&f) {
                    return Err(err(format!("frequency {f} outside [0, 1]")));
                }
                (f * n as f64).round() as u64
            }
        };
        if z > n {
            return Err(err(format!("zeros > shots ({z} > {n})")));
        }
        let ts = stamp
            .and_then(|i| row.get(i))
            .filter(|s| !s.is_empty())
            .map(str::to_owned);
        records.push(ShotRecord::new(GateCount(g), n, z, ts)?);
    }
    PoolDataset::new(records)
}

/// Canonical CSV form: `gates,shots,zeros` plus `timestamp` when any record has one.
pub fn write_dataset<W: Write>(data: &PoolDataset, out: W) -> Result<()> {
    let with_ts = data.records.iter().any(|r| r.timestamp.is_some());
    let mut w = csv::Writer::from_writer(out);
    if with_ts {
        w.write_record(["gates", "shots", "zeros", "timestamp"])?;
    } else {
        w.write_record(["gates", "shots", "zeros"])?;
    }
    for r in &data.records {
        let mut row = vec![
            r.gates.0.to_string(),
            r.shots.to_string(),
            r.zeros.to_string(),
        ];
        if with_ts {
            row.push(r.timestamp.clone().unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn dataset_from_draws(draws: &[FrequencyDraw]) -> Result<PoolDataset> {
    PoolDataset::new(
        draws
            .iter()
            .map(|d| ShotRecord::new(d.gate_count, d.shots, d.zeros, None))
            .collect::<Result<_>>()?,
    )
}

/// Simulation output table. Its `gates,shots,zeros` columns make it a valid dataset.
pub fn write_draws<W: Write>(draws: &[FrequencyDraw], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "pool",
        "gates",
        "shots",
        "zeros",
        "observed_freq",
        "true_pool_prob",
        "pool_angle",
    ])?;
    for d in draws {
        w.write_record([
            d.pool.to_string(),
            d.gate_count.0.to_string(),
            d.shots.to_string(),
            d.zeros.to_string(),
            fmt_f64(d.observed_freq.value()),
            fmt_f64(d.true_pool_prob.value()),
            fmt_f64(d.pool_angle.radians()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `gates,lower,upper,pool_mean,q<level>...`
pub fn write_band<W: Write>(band: &BandCurve, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut head = vec![
        "gates".to_string(),
        "lower".into(),
        "upper".into(),
        "pool_mean".into(),
    ];
    head.extend(band.levels.iter().map(|l| format!("q{l}")));
    w.write_record(&head)?;
    for p in &band.points {
        let mut row = vec![
            p.gates.0.to_string(),
            fmt_f64(p.lower.value()),
            fmt_f64(p.upper.value()),
            fmt_f64(p.pool_mean.value()),
        ];
        row.extend(p.percentiles.iter().map(|(_, q)| fmt_f64(q.value())));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `d_ini,d_n,d_q,log_lik,log_post,theta_0,…,theta_{m−1}`.
pub fn write_chain<W: Write>(samples: &[PosteriorSample], out: W) -> Result<()> {
    let m = samples.first().map_or(0, |s| s.hidden_thetas.len());
    let mut w = csv::Writer::from_writer(out);
    let mut head: Vec<String> = ["d_ini", "d_n", "d_q", "log_lik", "log_post"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    head.extend((0..m).map(|q| format!("theta_{q}")));
    w.write_record(&head)?;
    for s in samples {
        if s.hidden_thetas.len() != m {
            return Err(Error::LengthMismatch {
                expected: m,
                got: s.hidden_thetas.len(),
            });
        }
        let mut row = vec![
            fmt_f64(s.rates.d_ini),
            fmt_f64(s.rates.d_n),
            fmt_f64(s.rates.d_q),
            fmt_f64(s.log_lik),
            fmt_f64(s.log_post),
        ];
        row.extend(s.hidden_thetas.iter().map(|t| fmt_f64(t.radians())));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_chain_str(text: &str) -> Result<Vec<PosteriorSample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    let fixed = ["d_ini", "d_n", "d_q", "log_lik", "log_post"];
    if header.len() < fixed.len() || header.iter().zip(fixed).any(|(a, b)| a != b) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("chain header must start with {}", fixed.join(",")),
        });
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let vals = row
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    msg: format!("not a number: `{s}`"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let rates = DiffusionRates::new(vals[0], vals[1], vals[2]).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        let hidden_thetas = vals[5..]
            .iter()
            .map(|&t| PoolAngle::new(t))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })?;
        out.push(PosteriorSample {
            rates,
            hidden_thetas,
            log_lik: vals[3],
            log_post: vals[4],
        });
    }
    Ok(out)
}

pub fn read_chain(path: impl AsRef<Path>) -> Result<Vec<PosteriorSample>> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    read_chain_str(&text)
}

/// Everything needed to repeat a CLI run. Contains no wall-clock data, so
/// repeated runs produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Command-line arguments after the program name.
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn path_for(output: &Path) -> std::path::PathBuf {
        let mut s = output.as_os_str().to_owned();
        s.push(".manifest.json");
        s.into()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(create(path.as_ref())?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}
