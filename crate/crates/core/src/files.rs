//! `AMCT` trace and dataset files.
//!
//! Layout (little-endian): magic `AMCT`, `u16` version, `u8` kind
//! (0 traces, 1 pairs), then `u32` fields count, rows per record, K, L, T_m,
//! T_d, TTI in microseconds, speed range low and high in mm/s, a `u64` seed,
//! and two `u16`-length UTF-8 strings (profile name, config digest). Each
//! record is `u32` velocity in mm/s, `u64` seed, then `rows x K` `f32`
//! linear SINR values row-major. Pair records hold the `L` history rows
//! followed by the target row.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::channel::{Dataset, Sample, SinrTrace, TraceSet, Window};
use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"AMCT";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileKind {
    Traces,
    Pairs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub kind: FileKind,
    pub count: u32,
    pub rows: u32,
    pub subcarriers: u32,
    pub history: u32,
    pub measurement_period: u32,
    pub feedback_delay: u32,
    pub tti_us: u32,
    pub speed_lo_mm_s: u32,
    pub speed_hi_mm_s: u32,
    pub seed: u64,
    pub profile: String,
    pub digest: String,
}

impl Header {
    /// `key=value` lines, one per field, in file order.
    pub fn describe(&self) -> Vec<(String, String)> {
        let kind = match self.kind {
            FileKind::Traces => "traces",
            FileKind::Pairs => "pairs",
        };
        vec![
            ("kind".into(), kind.into()),
            ("count".into(), self.count.to_string()),
            ("rows".into(), self.rows.to_string()),
            ("subcarriers".into(), self.subcarriers.to_string()),
            ("history".into(), self.history.to_string()),
            ("measurement_period".into(), self.measurement_period.to_string()),
            ("feedback_delay".into(), self.feedback_delay.to_string()),
            ("tti_us".into(), self.tti_us.to_string()),
            ("speed_lo_mm_s".into(), self.speed_lo_mm_s.to_string()),
            ("speed_hi_mm_s".into(), self.speed_hi_mm_s.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("profile".into(), self.profile.clone()),
            ("digest".into(), self.digest.clone()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub velocity_mm_s: u32,
    pub seed: u64,
    pub values: Vec<f32>,
}

pub fn kmh_to_mm_s(v: f64) -> u32 {
    (v / 3.6 * 1000.0).round() as u32
}

pub fn mm_s_to_kmh(v: u32) -> f64 {
    v as f64 * 3.6 / 1000.0
}

fn put_str(w: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Invalid(format!("string of {} bytes too long for header", s.len())))?;
    w.extend_from_slice(&len.to_le_bytes());
    w.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode(header: &Header, records: &[Record]) -> Result<Vec<u8>> {
    let per = header.rows as usize * header.subcarriers as usize;
    if records.len() != header.count as usize {
        return Err(Error::Invalid(format!("header says {} records, got {}", header.count, records.len())));
    }
    let mut out = Vec::with_capacity(64 + records.len() * (12 + 4 * per));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match header.kind {
        FileKind::Traces => 0,
        FileKind::Pairs => 1,
    });
    for v in [
        header.count,
        header.rows,
        header.subcarriers,
        header.history,
        header.measurement_period,
        header.feedback_delay,
        header.tti_us,
        header.speed_lo_mm_s,
        header.speed_hi_mm_s,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&header.seed.to_le_bytes());
    put_str(&mut out, &header.profile)?;
    put_str(&mut out, &header.digest)?;
    for r in records {
        if r.values.len() != per {
            return Err(Error::Invalid(format!("record holds {} values, expected {per}", r.values.len())));
        }
        out.extend_from_slice(&r.velocity_mm_s.to_le_bytes());
        out.extend_from_slice(&r.seed.to_le_bytes());
        for v in &r.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    path: &'a Path,
    reader: BufReader<File>,
}

impl Cursor<'_> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.reader.read_exact(&mut b).map_err(|e| self.fail(format!("truncated ({e})")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.bytes()?) as usize;
        let mut buf = vec![0u8; len];
        self.reader.read_exact(&mut buf).map_err(|e| self.fail(format!("truncated ({e})")))?;
        String::from_utf8(buf).map_err(|_| self.fail("string is not UTF-8".into()))
    }

    fn fail(&self, msg: String) -> Error {
        Error::Format { path: self.path.to_path_buf(), msg }
    }
}

fn open(path: &Path) -> Result<(Cursor<'_>, Header)> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut c = Cursor { path, reader: BufReader::new(file) };
    if &c.bytes::<4>()? != MAGIC {
        return Err(c.fail("bad magic (not an AMCT file)".into()));
    }
    let version = u16::from_le_bytes(c.bytes()?);
    if version != VERSION {
        return Err(c.fail(format!("unsupported version {version}")));
    }
    let kind = match c.bytes::<1>()?[0] {
        0 => FileKind::Traces,
        1 => FileKind::Pairs,
        k => return Err(c.fail(format!("unknown record kind {k}"))),
    };
    let mut f = [0u32; 9];
    for v in &mut f {
        *v = c.u32()?;
    }
    let seed = c.u64()?;
    let profile = c.string()?;
    let digest = c.string()?;
    let header = Header {
        kind,
        count: f[0],
        rows: f[1],
        subcarriers: f[2],
        history: f[3],
        measurement_period: f[4],
        feedback_delay: f[5],
        tti_us: f[6],
        speed_lo_mm_s: f[7],
        speed_hi_mm_s: f[8],
        seed,
        profile,
        digest,
    };
    Ok((c, header))
}

pub fn read_header(path: &Path) -> Result<Header> {
    open(path).map(|(_, h)| h)
}

pub fn read(path: &Path) -> Result<(Header, Vec<Record>)> {
    let (mut c, header) = open(path)?;
    let per = header.rows as usize * header.subcarriers as usize;
    let mut records = Vec::with_capacity(header.count as usize);
    let mut buf = vec![0u8; per * 4];
    for _ in 0..header.count {
        let velocity_mm_s = c.u32()?;
        let seed = c.u64()?;
        c.reader.read_exact(&mut buf).map_err(|e| c.fail(format!("truncated record ({e})")))?;
        let values = buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        records.push(Record { velocity_mm_s, seed, values });
    }
    if c.reader.read(&mut [0u8; 1]).map_err(io_err(path))? != 0 {
        return Err(c.fail("trailing bytes after last record".into()));
    }
    Ok((header, records))
}

/// Writes through a temporary sibling so readers never see a partial file.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("partial");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
        w.write_all(bytes).map_err(io_err(&tmp))?;
        w.flush().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

fn f32s(values: &[f64]) -> Vec<f32> {
    values.iter().map(|&v| v as f32).collect()
}

fn tti_us(tti_s: f64) -> u32 {
    (tti_s * 1e6).round() as u32
}

pub fn encode_dataset(ds: &Dataset, digest: &str) -> Result<Vec<u8>> {
    let k = ds.subcarriers;
    let header = Header {
        kind: FileKind::Pairs,
        count: ds.len() as u32,
        rows: ds.window.history as u32 + 1,
        subcarriers: k as u32,
        history: ds.window.history as u32,
        measurement_period: ds.window.measurement_period as u32,
        feedback_delay: ds.window.feedback_delay as u32,
        tti_us: tti_us(ds.tti_s),
        speed_lo_mm_s: kmh_to_mm_s(ds.speed_kmh.0),
        speed_hi_mm_s: kmh_to_mm_s(ds.speed_kmh.1),
        seed: ds.seed,
        profile: ds.profile_name.clone(),
        digest: digest.into(),
    };
    let records: Vec<Record> = ds
        .samples
        .iter()
        .map(|s| {
            let mut values = f32s(&s.history);
            values.extend(f32s(&s.target));
            Record { velocity_mm_s: kmh_to_mm_s(s.velocity_kmh), seed: s.seed, values }
        })
        .collect();
    encode(&header, &records)
}

pub fn save_dataset(path: &Path, ds: &Dataset, digest: &str) -> Result<()> {
    write_bytes(path, &encode_dataset(ds, digest)?)
}

/// Returns the dataset and the digest stored with it.
pub fn load_dataset(path: &Path) -> Result<(Dataset, String)> {
    let (h, records) = read(path)?;
    if h.kind != FileKind::Pairs {
        return Err(Error::Format { path: path.into(), msg: "expected a pair dataset, found traces".into() });
    }
    let k = h.subcarriers as usize;
    let l = h.history as usize;
    if h.rows as usize != l + 1 {
        return Err(Error::Format { path: path.into(), msg: format!("pair rows {} != history {} + 1", h.rows, l) });
    }
    let samples = records
        .into_iter()
        .map(|r| {
            let v: Vec<f64> = r.values.iter().map(|&x| x as f64).collect();
            Sample { velocity_kmh: mm_s_to_kmh(r.velocity_mm_s), seed: r.seed, history: v[..l * k].to_vec(), target: v[l * k..].to_vec() }
        })
        .collect();
    let ds = Dataset {
        subcarriers: k,
        window: Window { history: l, measurement_period: h.measurement_period as usize, feedback_delay: h.feedback_delay as usize },
        tti_s: h.tti_us as f64 * 1e-6,
        speed_kmh: (mm_s_to_kmh(h.speed_lo_mm_s), mm_s_to_kmh(h.speed_hi_mm_s)),
        seed: h.seed,
        profile_name: h.profile,
        samples,
    };
    Ok((ds, h.digest))
}

pub fn encode_traces(set: &TraceSet, digest: &str) -> Result<Vec<u8>> {
    let first = set.traces.first();
    let steps = first.map_or(0, |t| t.steps);
    let k = first.map_or(0, |t| t.subcarriers);
    if set.traces.iter().any(|t| t.steps != steps || t.subcarriers != k) {
        return Err(Error::Invalid("all traces in a set must share T and K".into()));
    }
    let v = kmh_to_mm_s(set.velocity_kmh);
    let header = Header {
        kind: FileKind::Traces,
        count: set.traces.len() as u32,
        rows: steps as u32,
        subcarriers: k as u32,
        history: 0,
        measurement_period: 0,
        feedback_delay: 0,
        tti_us: first.map_or(0, |t| tti_us(t.tti_s)),
        speed_lo_mm_s: v,
        speed_hi_mm_s: v,
        seed: set.seed,
        profile: first.map_or(String::new(), |t| t.profile_name.clone()),
        digest: digest.into(),
    };
    let records: Vec<Record> = set
        .traces
        .iter()
        .map(|t| Record { velocity_mm_s: kmh_to_mm_s(t.velocity_kmh), seed: t.seed, values: f32s(&t.values) })
        .collect();
    encode(&header, &records)
}

pub fn save_traces(path: &Path, set: &TraceSet, digest: &str) -> Result<()> {
    write_bytes(path, &encode_traces(set, digest)?)
}

pub fn load_traces(path: &Path) -> Result<(TraceSet, String)> {
    let (h, records) = read(path)?;
    if h.kind != FileKind::Traces {
        return Err(Error::Format { path: path.into(), msg: "expected traces, found a pair dataset".into() });
    }
    let traces = records
        .into_iter()
        .map(|r| SinrTrace {
            values: r.values.iter().map(|&x| x as f64).collect(),
            steps: h.rows as usize,
            subcarriers: h.subcarriers as usize,
            tti_s: h.tti_us as f64 * 1e-6,
            velocity_kmh: mm_s_to_kmh(r.velocity_mm_s),
            seed: r.seed,
            profile_name: h.profile.clone(),
        })
        .collect();
    Ok((TraceSet { velocity_kmh: mm_s_to_kmh(h.speed_lo_mm_s), seed: h.seed, traces }, h.digest))
}
