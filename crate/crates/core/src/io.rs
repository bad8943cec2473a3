//! File formats: binary gathers (VSGD), model weights (VSWT), 8-bit PGM
//! images and CSV exports. All binary fields are little-endian.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dsp::{FkSpectrum, Grid};
use crate::error::{Error, Result};
use crate::model::{LayerParams, ModelParams, ModelSpec};
use crate::picking::PickSet;
use crate::synthetics::Gather;
use crate::tensor_core::{BatchNormParams, ConvParams};
use crate::training::LossLog;

pub const GATHER_MAGIC: [u8; 4] = *b"VSGD";
pub const WEIGHTS_MAGIC: [u8; 4] = *b"VSWT";
pub const FORMAT_VERSION: u32 = 1;
const GATHER_HEADER_LEN: usize = 32;

const KIND_CONV: u8 = 0;
const KIND_BN: u8 = 1;

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn put_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    buf.reserve(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Bounds-checked little-endian reader over a byte slice.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::TruncatedPayload {
                expected: (self.pos as u64).saturating_add(n as u64),
                found: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.saturating_mul(4);
        let raw = self.take(len)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// `dt` and `dx` are stored as integer nanoseconds and micrometers; values
/// that are whole multiples of those units round-trip exactly.
pub fn encode_gather(g: &Gather) -> Result<Vec<u8>> {
    let n_t = u32::try_from(g.n_t()).map_err(|_| Error::config("n_t", "exceeds u32"))?;
    let n_x = u32::try_from(g.n_x()).map_err(|_| Error::config("n_x", "exceeds u32"))?;
    let mut buf = Vec::with_capacity(GATHER_HEADER_LEN + g.data().len() * 4);
    buf.extend_from_slice(&GATHER_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&n_t.to_le_bytes());
    buf.extend_from_slice(&n_x.to_le_bytes());
    buf.extend_from_slice(&((g.dt * 1e9).round() as u64).to_le_bytes());
    buf.extend_from_slice(&((g.dx * 1e6).round() as u64).to_le_bytes());
    put_f32s(&mut buf, g.data());
    Ok(buf)
}

pub fn decode_gather(bytes: &[u8], path: &Path) -> Result<Gather> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedHeader);
    }
    if bytes[..4] != GATHER_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: GATHER_MAGIC,
        });
    }
    if bytes.len() < GATHER_HEADER_LEN {
        return Err(Error::TruncatedHeader);
    }
    let mut c = Cursor::new(&bytes[4..]);
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let n_t = c.u32()? as u64;
    let n_x = c.u32()? as u64;
    let dt_ns = c.u64()?;
    let dx_um = c.u64()?;
    let expected = n_t.saturating_mul(n_x).saturating_mul(4);
    let found = (bytes.len() - GATHER_HEADER_LEN) as u64;
    if found < expected {
        return Err(Error::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(Error::TrailingBytes {
            extra: found - expected,
        });
    }
    let data = c.f32s((n_t * n_x) as usize)?;
    Gather::from_traces(
        n_t as usize,
        n_x as usize,
        dt_ns as f64 / 1e9,
        dx_um as f64 / 1e6,
        data,
    )
}

pub fn write_gather(g: &Gather, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_gather(g)?)
}

pub fn read_gather(path: impl AsRef<Path>) -> Result<Gather> {
    let path = path.as_ref();
    decode_gather(&read_file(path)?, path)
}

fn put_record_header(buf: &mut Vec<u8>, kind: u8, dims: &[usize]) {
    buf.push(kind);
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

/// One record per convolution and per batch normalization, in layer order.
pub fn encode_weights(params: &ModelParams) -> Vec<u8> {
    let records: usize = params
        .layers
        .iter()
        .map(|l| 1 + l.bn.is_some() as usize)
        .sum();
    let mut buf = Vec::new();
    buf.extend_from_slice(&WEIGHTS_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records as u32).to_le_bytes());
    for l in &params.layers {
        let c = &l.conv;
        put_record_header(&mut buf, KIND_CONV, &[c.c_out, c.c_in, c.kh, c.kw]);
        put_f32s(&mut buf, &c.kernels.value);
        put_f32s(&mut buf, &c.biases.value);
        if let Some(bn) = &l.bn {
            put_record_header(&mut buf, KIND_BN, &[bn.channels()]);
            put_f32s(&mut buf, &bn.gamma.value);
            put_f32s(&mut buf, &bn.beta.value);
            put_f32s(&mut buf, &bn.running_mean);
            put_f32s(&mut buf, &bn.running_var);
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

enum Record {
    Conv(ConvParams),
    Bn(BatchNormParams),
}

impl Record {
    fn describe(&self) -> String {
        match self {
            Record::Conv(c) => format!("conv {}x{}x{}x{}", c.c_out, c.c_in, c.kh, c.kw),
            Record::Bn(b) => format!("batchnorm {}", b.channels()),
        }
    }
}

fn read_record(c: &mut Cursor<'_>, index: usize) -> Result<Record> {
    let kind = c.u8()?;
    let rank = c.u32()? as usize;
    // a rank larger than the bytes left cannot be genuine
    if rank > c.remaining() / 4 {
        return Err(Error::TruncatedPayload {
            expected: (c.pos + rank * 4) as u64,
            found: c.bytes.len() as u64,
        });
    }
    let dims: Vec<usize> = (0..rank)
        .map(|_| c.u32().map(|d| d as usize))
        .collect::<Result<_>>()?;
    let bad = |what: &str| Error::IncompatibleArchitecture {
        reason: format!("record {index}: {what}"),
    };
    match (kind, dims.as_slice()) {
        (KIND_CONV, &[c_out, c_in, kh, kw]) => {
            let n = [c_in, kh, kw]
                .iter()
                .try_fold(c_out, |acc, &d| acc.checked_mul(d));
            let kernels = c.f32s(n.unwrap_or(usize::MAX))?;
            let biases = c.f32s(c_out)?;
            ConvParams::from_values(c_out, c_in, kh, kw, kernels, biases)
                .map(Record::Conv)
                .map_err(|e| bad(&e.to_string()))
        }
        (KIND_BN, &[ch]) => {
            let mut bn = BatchNormParams::new(ch);
            bn.gamma.value = c.f32s(ch)?;
            bn.beta.value = c.f32s(ch)?;
            bn.running_mean = c.f32s(ch)?;
            bn.running_var = c.f32s(ch)?;
            Ok(Record::Bn(bn))
        }
        (KIND_CONV | KIND_BN, _) => Err(bad(&format!("kind {kind} with shape {dims:?}"))),
        _ => Err(bad(&format!("unknown kind {kind}"))),
    }
}

/// Decodes weights and matches the record sequence against `spec`.
pub fn decode_weights(bytes: &[u8], path: &Path, spec: &ModelSpec) -> Result<ModelParams> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedHeader);
    }
    if bytes[..4] != WEIGHTS_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: WEIGHTS_MAGIC,
        });
    }
    if bytes.len() < 16 {
        return Err(Error::TruncatedHeader);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::CorruptWeights {
            expected: stored,
            found: computed,
        });
    }
    let mut c = Cursor::new(&body[4..]);
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = c.u32()? as usize;
    let mut records = Vec::new();
    for i in 0..count {
        records.push(read_record(&mut c, i)?);
    }
    if c.remaining() != 0 {
        return Err(Error::TrailingBytes {
            extra: c.remaining() as u64,
        });
    }
    let fail = |reason: String| Error::IncompatibleArchitecture { reason };
    let mut it = records.into_iter();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, ls) in spec.layers.iter().enumerate() {
        let conv = match it.next() {
            Some(Record::Conv(c)) => c,
            Some(other) => {
                return Err(fail(format!(
                    "layer {} expects conv, found {}",
                    i + 1,
                    other.describe()
                )))
            }
            None => {
                return Err(fail(format!(
                    "file ends before layer {} of {}",
                    i + 1,
                    spec.layers.len()
                )))
            }
        };
        let bn = if ls.batch_norm {
            match it.next() {
                Some(Record::Bn(b)) => Some(b),
                Some(other) => {
                    return Err(fail(format!(
                        "layer {} expects batchnorm, found {}",
                        i + 1,
                        other.describe()
                    )))
                }
                None => {
                    return Err(fail(format!(
                        "file ends before batchnorm of layer {}",
                        i + 1
                    )))
                }
            }
        } else {
            None
        };
        layers.push(LayerParams { conv, bn });
    }
    if let Some(extra) = it.next() {
        return Err(fail(format!(
            "unexpected record after last layer: {}",
            extra.describe()
        )));
    }
    let params = ModelParams { layers };
    params.check_against(spec)?;
    Ok(params)
}

pub fn write_weights(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_weights(params))
}

pub fn read_weights(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<ModelParams> {
    let path = path.as_ref();
    decode_weights(&read_file(path)?, path, spec)
}

/// Maps `[lo, hi]` linearly onto 0..=255 with clamping. Halves round down,
/// so the midpoint of the range lands on 127.
pub fn pixel(value: f64, lo: f64, hi: f64) -> u8 {
    let p = (value - lo) / (hi - lo) * 255.0;
    (p - 0.5).ceil().clamp(0.0, 255.0) as u8
}

/// Binary (P5) 8-bit grayscale, one image row per grid row.
pub fn encode_pgm(grid: &Grid, lo: f64, hi: f64) -> Result<Vec<u8>> {
    if grid.rows == 0 || grid.cols == 0 {
        return Err(Error::config("matrix", "empty matrix cannot be rendered"));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::config(
            "range",
            format!("need finite lo < hi, got [{lo}, {hi}]"),
        ));
    }
    if grid.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            location: "image matrix".into(),
        });
    }
    let mut buf = format!("P5\n{} {}\n255\n", grid.cols, grid.rows).into_bytes();
    buf.extend(grid.data.iter().map(|&v| pixel(v, lo, hi)));
    Ok(buf)
}

pub fn write_pgm(grid: &Grid, path: impl AsRef<Path>, lo: f64, hi: f64) -> Result<()> {
    write_file(path.as_ref(), &encode_pgm(grid, lo, hi)?)
}

pub fn loss_csv(log: &LossLog) -> String {
    let mut s = String::from("step,epoch,loss\n");
    for e in &log.steps {
        writeln!(s, "{},{},{}", e.step, e.epoch, e.loss).expect("string write");
    }
    s
}

pub fn write_loss_csv(log: &LossLog, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), loss_csv(log).as_bytes())
}

/// Absent picks leave the sample and time fields empty.
pub fn picks_csv(picks: &PickSet) -> String {
    let mut s = String::from("trace_index,sample_index,time_seconds\n");
    for (j, p) in picks.picks.iter().enumerate() {
        match p {
            Some(i) => writeln!(s, "{j},{i},{}", *i as f64 * picks.dt),
            None => writeln!(s, "{j},,"),
        }
        .expect("string write");
    }
    s
}

pub fn write_picks_csv(picks: &PickSet, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), picks_csv(picks).as_bytes())
}

/// Header row holds the wavenumbers; each following row is one frequency.
pub fn fk_csv(fk: &FkSpectrum) -> String {
    let grid = &fk.magnitude_db;
    let mut s = String::from("frequency_hz");
    for c in 0..grid.cols {
        write!(s, ",{}", fk.wavenumber(c)).expect("string write");
    }
    s.push('\n');
    for r in 0..grid.rows {
        write!(s, "{}", fk.frequency(r)).expect("string write");
        for v in grid.row(r) {
            write!(s, ",{v}").expect("string write");
        }
        s.push('\n');
    }
    s
}

pub fn write_fk_csv(fk: &FkSpectrum, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), fk_csv(fk).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::fk_spectrum;
    use crate::model::build_model;
    use crate::picking::PickMode;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gather(n_t: usize, n_x: usize, seed: u64) -> Gather {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n_t * n_x)
            .map(|_| rng.random_range(-3.0f32..3.0))
            .collect();
        Gather::from_traces(n_t, n_x, 0.002, 3.125, data).unwrap()
    }

    fn here() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn gather_header_layout() {
        let g = random_gather(3, 2, 1);
        let b = encode_gather(&g).unwrap();
        assert_eq!(&b[..4], b"VSGD");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 2_000_000);
        assert_eq!(u64::from_le_bytes(b[24..32].try_into().unwrap()), 3_125_000);
        assert_eq!(b.len(), 32 + 6 * 4);
        // trace-major payload
        assert_eq!(
            f32::from_le_bytes(b[32..36].try_into().unwrap()),
            g.at(0, 0)
        );
        assert_eq!(
            f32::from_le_bytes(b[36..40].try_into().unwrap()),
            g.at(1, 0)
        );
    }

    #[test]
    fn full_size_gather_round_trip_is_bit_exact() {
        let g = random_gather(1000, 1200, 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.vsg");
        write_gather(&g, &p).unwrap();
        let back = read_gather(&p).unwrap();
        assert_eq!(back.n_t(), 1000);
        assert_eq!(back.n_x(), 1200);
        assert_eq!(back.dt, 0.002);
        assert_eq!(back.dx, 3.125);
        assert!(back
            .data()
            .iter()
            .zip(g.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn gather_corruptions_are_distinguished() {
        let g = random_gather(4, 3, 3);
        let b = encode_gather(&g).unwrap();
        assert!(matches!(
            decode_gather(&b[..b.len() - 1], here()),
            Err(Error::TruncatedPayload { .. })
        ));
        assert!(matches!(
            decode_gather(&b[..20], here()),
            Err(Error::TruncatedHeader)
        ));
        assert!(matches!(
            decode_gather(&b[..2], here()),
            Err(Error::TruncatedHeader)
        ));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_gather(&bad, here()),
            Err(Error::BadMagic { .. })
        ));
        let mut bad = b.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_gather(&bad, here()),
            Err(Error::UnsupportedVersion {
                found: 2,
                expected: 1
            })
        ));
        let mut bad = b.clone();
        bad.push(0);
        assert!(matches!(
            decode_gather(&bad, here()),
            Err(Error::TrailingBytes { extra: 1 })
        ));
        // header claiming a huge payload is rejected without allocating it
        let mut bad = b.clone();
        bad[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            decode_gather(&bad, here()),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            read_gather("/nonexistent/x.vsg"),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn gather_round_trip(n_t in 1usize..40, n_x in 1usize..20, dt_ns in 1u64..10_000_000,
                             dx_um in 1u64..100_000_000, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..n_t * n_x).map(|_| rng.random_range(-1e6f32..1e6)).collect();
            let g = Gather::from_traces(n_t, n_x, dt_ns as f64 / 1e9, dx_um as f64 / 1e6, data).unwrap();
            let back = decode_gather(&encode_gather(&g).unwrap(), here()).unwrap();
            prop_assert_eq!(back.dt.to_bits(), g.dt.to_bits());
            prop_assert_eq!(back.dx.to_bits(), g.dx.to_bits());
            prop_assert_eq!(back, g);
        }

        #[test]
        fn truncation_never_panics(cut in 0usize..80) {
            let b = encode_gather(&random_gather(5, 3, 9)).unwrap();
            let cut = cut.min(b.len() - 1);
            prop_assert!(decode_gather(&b[..cut], here()).is_err());
        }
    }

    #[test]
    fn weights_round_trip_preserves_predictions() {
        let net = build_model(4).unwrap();
        let mut tweaked = net.clone();
        for l in &mut tweaked.params.layers {
            if let Some(bn) = &mut l.bn {
                bn.running_mean
                    .iter_mut()
                    .enumerate()
                    .for_each(|(i, v)| *v = 0.01 * i as f32);
                bn.running_var
                    .iter_mut()
                    .enumerate()
                    .for_each(|(i, v)| *v = 1.0 + 0.02 * i as f32);
            }
        }
        let bytes = encode_weights(&tweaked.params);
        let back = decode_weights(&bytes, here(), &tweaked.spec).unwrap();
        assert_eq!(back, tweaked.params);
        let mut restored = net.clone();
        restored.params = back;
        let g = random_gather(40, 30, 5);
        let a = tweaked.predict_gather(&g).unwrap();
        let b = restored.predict_gather(&g).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn weights_record_count_and_checksum() {
        let net = build_model(1).unwrap();
        let b = encode_weights(&net.params);
        assert_eq!(&b[..4], b"VSWT");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 17);
        let crc = u32::from_le_bytes(b[b.len() - 4..].try_into().unwrap());
        assert_eq!(crc, crc32fast::hash(&b[..b.len() - 4]));
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let net = build_model(1).unwrap();
        let mut b = encode_weights(&net.params);
        let mid = b.len() / 2;
        b[mid] ^= 0x01;
        assert!(matches!(
            decode_weights(&b, here(), &net.spec),
            Err(Error::CorruptWeights { .. })
        ));
    }

    #[test]
    fn eight_layer_file_is_incompatible() {
        let spec = ModelSpec::deringing();
        let mut params = ModelParams::init(&spec, 2).unwrap();
        params.layers.remove(7);
        let b = encode_weights(&params);
        assert!(matches!(
            decode_weights(&b, here(), &spec),
            Err(Error::IncompatibleArchitecture { .. })
        ));
        let mut wide = ModelParams::init(&spec, 2).unwrap();
        wide.layers.push(wide.layers[8].clone());
        assert!(matches!(
            decode_weights(&encode_weights(&wide), here(), &spec),
            Err(Error::IncompatibleArchitecture { .. })
        ));
    }

    #[test]
    fn weights_bad_magic_and_version() {
        let net = build_model(1).unwrap();
        let b = encode_weights(&net.params);
        assert!(matches!(
            decode_weights(&b[..3], here(), &net.spec),
            Err(Error::TruncatedHeader)
        ));
        let mut bad = b.clone();
        bad[1] = b'Z';
        assert!(matches!(
            decode_weights(&bad, here(), &net.spec),
            Err(Error::BadMagic { .. })
        ));
        let mut bad = b[..b.len() - 4].to_vec();
        bad[4] = 9;
        let crc = crc32fast::hash(&bad);
        bad.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            decode_weights(&bad, here(), &net.spec),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
    }

    #[test]
    fn pixel_mapping() {
        assert_eq!(pixel(0.5, 0.0, 1.0), 127);
        assert_eq!(pixel(0.0, 0.0, 1.0), 0);
        assert_eq!(pixel(1.0, 0.0, 1.0), 255);
        assert_eq!(pixel(-3.0, 0.0, 1.0), 0);
        assert_eq!(pixel(7.0, 0.0, 1.0), 255);
        assert_eq!(pixel(-60.0, -120.0, 0.0), 127);
    }

    #[test]
    fn pgm_layout_and_errors() {
        let grid = Grid {
            rows: 2,
            cols: 3,
            data: vec![0.5; 6],
        };
        let b = encode_pgm(&grid, 0.0, 1.0).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&b[..header.len()], header);
        assert!(b[header.len()..].iter().all(|&p| p == 127));
        assert_eq!(b.len(), header.len() + 6);
        let empty = Grid {
            rows: 0,
            cols: 0,
            data: vec![],
        };
        assert!(encode_pgm(&empty, 0.0, 1.0).is_err());
        assert!(encode_pgm(&grid, 1.0, 1.0).is_err());
    }

    #[test]
    fn impulse_spectrum_renders_white() {
        let mut g = Gather::zeros(16, 8, 0.002, 3.125).unwrap();
        g.trace_mut(3)[5] = 1.0;
        let fk = fk_spectrum(&g).unwrap();
        let b = encode_pgm(&fk.magnitude_db, -120.0, 0.0).unwrap();
        let header = format!(
            "P5\n{} {}\n255\n",
            fk.magnitude_db.cols, fk.magnitude_db.rows
        );
        assert!(b[header.len()..].iter().all(|&p| p == 255));
    }

    #[test]
    fn picks_csv_marks_absent_picks_empty() {
        let ps = PickSet {
            picks: vec![Some(10), None, Some(0)],
            sta_len: 10,
            lta_len: 100,
            mode: PickMode::Argmax,
            threshold: 0.0,
            ratio_max: vec![0.0; 3],
            dt: 0.002,
        };
        assert_eq!(
            picks_csv(&ps),
            "trace_index,sample_index,time_seconds\n0,10,0.02\n1,,\n2,0,0\n"
        );
    }

    #[test]
    fn fk_csv_shape() {
        let g = random_gather(8, 4, 1);
        let fk = fk_spectrum(&g).unwrap();
        let csv = fk_csv(&fk);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + fk.magnitude_db.rows);
        assert!(lines
            .iter()
            .all(|l| l.split(',').count() == 1 + fk.magnitude_db.cols));
        assert!(lines[0].starts_with("frequency_hz,"));
    }
}
