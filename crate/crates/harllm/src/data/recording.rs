//! IMU recordings and their CSV wire format.
//!
//! One CSV file holds one recording: a header row
//! `t,acc_x,acc_y,acc_z,gyro_x,gyro_y,gyro_z,label,subject` (plus an
//! optional trailing `domain`), then one row per sample with `.` decimals.
//! All rows of a file must share one subject and one domain.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::{Error, Result};

pub const CHANNELS: usize = 6;

const CHANNEL_COLUMNS: [&str; CHANNELS] =
    ["acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z"];

/// Class-name table; a label's index is its class id everywhere downstream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocab {
    names: Vec<String>,
}

impl LabelVocab {
    pub fn new(names: &[String]) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::config("label vocabulary needs at least 2 classes"));
        }
        for (i, a) in names.iter().enumerate() {
            if names[..i].contains(a) {
                return Err(Error::config(format!("duplicate label `{a}` in vocabulary")));
            }
        }
        Ok(LabelVocab {
            names: names.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<u32> {
        self.names.iter().position(|n| n == name).map(|i| i as u32)
    }

    pub fn name(&self, index: u32) -> &str {
        &self.names[index as usize]
    }
}

/// Time-ordered 6-channel samples with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    /// Sampling rate in Hz, inferred from the `t` column.
    pub rate: f64,
    pub subject: String,
    pub domain: String,
    /// Row-major, `len * CHANNELS` values.
    pub samples: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Recording {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.samples[i * CHANNELS..(i + 1) * CHANNELS]
    }

    /// Linear interpolation onto a uniform grid at `target_rate`, label by
    /// nearest source row. Identity when the rates already match.
    pub fn resample_linear(&self, target_rate: f64) -> Recording {
        if (self.rate - target_rate).abs() < 1e-9 || self.len() < 2 {
            return self.clone();
        }
        let step = self.rate / target_rate;
        let n_out = ((self.len() - 1) as f64 / step).floor() as usize + 1;
        let mut samples = Vec::with_capacity(n_out * CHANNELS);
        let mut labels = Vec::with_capacity(n_out);
        for j in 0..n_out {
            let x = j as f64 * step;
            let i0 = (x.floor() as usize).min(self.len() - 1);
            let i1 = (i0 + 1).min(self.len() - 1);
            let frac = (x - i0 as f64) as f32;
            for c in 0..CHANNELS {
                let a = self.samples[i0 * CHANNELS + c];
                let b = self.samples[i1 * CHANNELS + c];
                samples.push(a + frac * (b - a));
            }
            labels.push(self.labels[if frac < 0.5 { i0 } else { i1 }]);
        }
        Recording {
            id: self.id.clone(),
            rate: target_rate,
            subject: self.subject.clone(),
            domain: self.domain.clone(),
            samples,
            labels,
        }
    }
}

struct ColumnMap {
    t: usize,
    channels: [usize; CHANNELS],
    label: usize,
    subject: usize,
    domain: Option<usize>,
}

fn map_header(file: &str, headers: &csv::StringRecord) -> Result<ColumnMap> {
    let find = |name: &str| headers.iter().position(|h| h == name);
    let mut channels = [0usize; CHANNELS];
    for (i, col) in CHANNEL_COLUMNS.iter().enumerate() {
        channels[i] = find(col).ok_or_else(|| {
            Error::parse(
                file,
                1,
                format!("expected 6 channels: missing column `{col}`"),
            )
        })?;
    }
    Ok(ColumnMap {
        t: find("t").ok_or_else(|| Error::parse(file, 1, "missing column `t`"))?,
        channels,
        label: find("label").ok_or_else(|| Error::parse(file, 1, "missing column `label`"))?,
        subject: find("subject")
            .ok_or_else(|| Error::parse(file, 1, "missing column `subject`"))?,
        domain: find("domain"),
    })
}

pub fn load_recording(path: &Path, vocab: &LabelVocab) -> Result<Recording> {
    let file_name = path.display().to_string();
    let mut reader = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let cols = map_header(&file_name, reader.headers()?)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| file_name.clone());
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut times: Vec<f64> = Vec::new();
    let mut subject: Option<String> = None;
    let mut domain: Option<String> = None;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |idx: usize| -> Result<&str> {
            record
                .get(idx)
                .ok_or_else(|| Error::parse(&file_name, line, "short row"))
        };
        let num = |idx: usize| -> Result<f64> {
            let raw = field(idx)?;
            raw.parse::<f64>()
                .map_err(|_| Error::parse(&file_name, line, format!("non-numeric value `{raw}`")))
        };
        let t = num(cols.t)?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(Error::parse(
                    &file_name,
                    line,
                    format!("timestamps must increase: {prev} then {t}"),
                ));
            }
        }
        times.push(t);
        for &c in &cols.channels {
            samples.push(num(c)? as f32);
        }
        let label_name = field(cols.label)?;
        let label = vocab.index_of(label_name).ok_or_else(|| {
            Error::parse(&file_name, line, format!("unknown label `{label_name}`"))
        })?;
        labels.push(label);
        let row_subject = field(cols.subject)?.to_string();
        match &subject {
            None => subject = Some(row_subject),
            Some(s) if *s != row_subject => {
                return Err(Error::parse(
                    &file_name,
                    line,
                    format!("mixed subjects in one file: `{s}` and `{row_subject}`"),
                ))
            }
            _ => {}
        }
        let row_domain = match cols.domain {
            Some(d) => field(d)?.to_string(),
            None => "default".to_string(),
        };
        match &domain {
            None => domain = Some(row_domain),
            Some(d) if *d != row_domain => {
                return Err(Error::parse(
                    &file_name,
                    line,
                    format!("mixed domains in one file: `{d}` and `{row_domain}`"),
                ))
            }
            _ => {}
        }
    }
    if labels.is_empty() {
        return Err(Error::parse(&file_name, 1, "recording has no rows"));
    }
    let rate = if times.len() >= 2 {
        (times.len() - 1) as f64 / (times[times.len() - 1] - times[0])
    } else {
        1.0
    };
    Ok(Recording {
        id,
        rate,
        subject: subject.expect("at least one row"),
        domain: domain.expect("at least one row"),
        samples,
        labels,
    })
}

/// Loads every `*.csv` under `dir`, sorted by file name for a deterministic
/// merge order.
pub fn load_recordings(dir: &Path, vocab: &LabelVocab) -> Result<Vec<Recording>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::config(format!(
            "no .csv recordings under {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| load_recording(p, vocab)).collect()
}

pub fn save_recording_csv(rec: &Recording, vocab: &LabelVocab, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "t,acc_x,acc_y,acc_z,gyro_x,gyro_y,gyro_z,label,subject,domain")?;
    for i in 0..rec.len() {
        let t = i as f64 / rec.rate;
        write!(out, "{t}")?;
        for v in rec.row(i) {
            write!(out, ",{v}")?;
        }
        writeln!(
            out,
            ",{},{},{}",
            vocab.name(rec.labels[i]),
            rec.subject,
            rec.domain
        )?;
    }
    out.flush()?;
    Ok(())
}
