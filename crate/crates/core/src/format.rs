//! Binary files: code sets (`CRHB`), datasets (`CRHF`) and model states (`CRHM`).
//!
//! Every integer and float is little-endian. Readers check the magic, the
//! version and every length before allocating, and reject trailing bytes.

use std::io::{Read, Write};

use crate::codebook::CodebookSet;
use crate::csa::{LocalFeatureMap, Prototype};
use crate::encoder::{AdamConfig, AdamState, EncoderParams};
use crate::error::{Error, Result};
use crate::hamming::{PackedCodeSet, MAX_BITS};
use crate::losses::{ClusterMemory, MemoryBank};
use crate::matrix::Matrix;
use crate::train::{ModelState, Optimizer};

pub const CODES_MAGIC: [u8; 4] = *b"CRHB";
pub const DATASET_MAGIC: [u8; 4] = *b"CRHF";
pub const MODEL_MAGIC: [u8; 4] = *b"CRHM";
pub const VERSION: u16 = 1;

const TAG_SIGN: u8 = 0;
const TAG_CODEBOOK: u8 = 1;

/// Refuse headers that would make us allocate more than this many elements.
const MAX_ELEMENTS: u64 = 1 << 32;

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b).map_err(Error::from)
    }
    fn u8(&mut self, x: u8) -> Result<()> {
        self.bytes(&[x])
    }
    fn u16(&mut self, x: u16) -> Result<()> {
        self.bytes(&x.to_le_bytes())
    }
    fn u32(&mut self, x: usize) -> Result<()> {
        let x = u32::try_from(x).map_err(|_| Error::Format(format!("{x} does not fit in 32 bits")))?;
        self.bytes(&x.to_le_bytes())
    }
    fn u64(&mut self, x: u64) -> Result<()> {
        self.bytes(&x.to_le_bytes())
    }
    fn f64s(&mut self, xs: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(xs.len() * 8);
        for x in xs {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        self.bytes(&buf)
    }
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("file is truncated".into()),
            _ => Error::from(e),
        })?;
        Ok(buf)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let v = self.bytes(N)?;
        Ok(v.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
    fn header(&mut self, magic: [u8; 4]) -> Result<()> {
        let got: [u8; 4] = self.array()?;
        if got != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = self.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        Ok(())
    }
    fn end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after the last record".into())),
        }
    }
}

fn check_size(parts: &[usize]) -> Result<usize> {
    let mut total: u64 = 1;
    for &p in parts {
        total = total.saturating_mul(p as u64);
    }
    if total > MAX_ELEMENTS {
        return Err(Error::Format(format!("declared size {total} is implausibly large")));
    }
    Ok(total as usize)
}

pub fn write_codes(codes: &PackedCodeSet, out: impl Write) -> Result<()> {
    let mut w = Writer { inner: out };
    w.bytes(&CODES_MAGIC)?;
    w.u16(VERSION)?;
    w.u32(codes.len())?;
    w.u32(codes.bits())?;
    let mut buf = Vec::with_capacity(codes.all_words().len() * 8);
    for word in codes.all_words() {
        buf.extend_from_slice(&word.to_le_bytes());
    }
    w.bytes(&buf)
}

pub fn read_codes(input: impl Read) -> Result<PackedCodeSet> {
    let mut r = Reader { inner: input };
    r.header(CODES_MAGIC)?;
    let n = r.u32()?;
    let bits = r.u32()?;
    if bits == 0 || bits > MAX_BITS {
        return Err(Error::Format(format!("invalid code length {bits}")));
    }
    let words = check_size(&[n, bits.div_ceil(64)])?;
    let raw = r.bytes(words * 8)?;
    let words: Vec<u64> = raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    r.end()?;
    PackedCodeSet::from_words(bits, words).map_err(|e| Error::Format(e.to_string()))
}

/// Contents of a dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub samples: Vec<LocalFeatureMap>,
    /// Fine and coarse labels, when the file carries them.
    pub labels: Option<(Vec<u32>, Vec<u32>)>,
}

/// Features are stored as 32-bit floats, so values round on the way out.
pub fn write_dataset(samples: &[LocalFeatureMap], labels: Option<(&[u32], &[u32])>, out: impl Write) -> Result<()> {
    let (p, c) = samples.first().map_or((0, 0), |s| (s.positions(), s.channels()));
    if samples.iter().any(|s| s.positions() != p || s.channels() != c) {
        return Err(Error::domain("samples differ in shape"));
    }
    if let Some((fine, coarse)) = labels {
        if fine.len() != samples.len() || coarse.len() != samples.len() {
            return Err(Error::domain("label count does not match sample count"));
        }
    }
    let mut w = Writer { inner: out };
    w.bytes(&DATASET_MAGIC)?;
    w.u16(VERSION)?;
    w.u32(samples.len())?;
    w.u32(p)?;
    w.u32(c)?;
    w.u32(usize::from(labels.is_some()))?;
    let mut buf = Vec::with_capacity(samples.len() * p * c * 4);
    for s in samples {
        for x in s.as_slice() {
            buf.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    w.bytes(&buf)?;
    if let Some((fine, coarse)) = labels {
        let mut buf = Vec::with_capacity(samples.len() * 8);
        for x in fine.iter().chain(coarse) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.bytes(&buf)?;
    }
    Ok(())
}

pub fn read_dataset(input: impl Read) -> Result<DatasetFile> {
    let mut r = Reader { inner: input };
    r.header(DATASET_MAGIC)?;
    let n = r.u32()?;
    let p = r.u32()?;
    let c = r.u32()?;
    let flag = r.u32()?;
    if flag > 1 {
        return Err(Error::Format(format!("invalid label flag {flag}")));
    }
    if n > 0 && (p == 0 || c == 0) {
        return Err(Error::Format("samples must have at least one position and channel".into()));
    }
    let total = check_size(&[n, p, c])?;
    let raw = r.bytes(total * 4)?;
    let mut values = raw.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))));
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let data: Vec<f64> = values.by_ref().take(p * c).collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format(format!("sample {i} holds a non-finite feature")));
        }
        samples.push(LocalFeatureMap::new(c, p, data).map_err(|e| Error::Format(e.to_string()))?);
    }
    let labels = if flag == 1 {
        let raw = r.bytes(n * 8)?;
        let all: Vec<u32> = raw.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let (fine, coarse) = all.split_at(n);
        Some((fine.to_vec(), coarse.to_vec()))
    } else {
        None
    };
    r.end()?;
    Ok(DatasetFile { samples, labels })
}

fn adam_moments(w: &mut Writer<impl Write>, s: &AdamState) -> Result<()> {
    w.f64s(&s.m)?;
    w.f64s(&s.v)
}

/// Model state layout after the magic and version:
///
/// ```text
/// u32 l, C, N, n_c          n_c = 0 when there are no pseudo labels
/// u8  variant               0 sign, 1 codebook
/// f64 w_fc (l x 2C), b (l), w_att (C), W (N x l), W_pseudo (n_c x l)
/// f64 Adam m then v for each of those five tensors, in the same order
/// u32 assignment (N entries, only when n_c > 0)
/// u64 Adam step count for each of the five tensors
/// f64 lr, beta1, beta2, eps
/// u64 epoch, u64 seed, u8 use_csa
/// codebook block when variant = 1:
///   f64 centroids (2l x 2C), Adam m, Adam v; u64 step count
/// ```
pub fn write_model(state: &ModelState, out: impl Write) -> Result<()> {
    let p = &state.params;
    let (l, c, n) = (p.bits(), p.channels(), state.bank.len());
    let n_c = state.pseudo.as_ref().map_or(0, ClusterMemory::n_clusters);
    let opt = &state.optimizer;
    let mut w = Writer { inner: out };
    w.bytes(&MODEL_MAGIC)?;
    w.u16(VERSION)?;
    for d in [l, c, n, n_c] {
        w.u32(d)?;
    }
    w.u8(if state.codebooks.is_some() { TAG_CODEBOOK } else { TAG_SIGN })?;
    w.f64s(p.w_fc.as_slice())?;
    w.f64s(&p.b)?;
    w.f64s(p.w_att.as_slice())?;
    w.f64s(state.bank.0.as_slice())?;
    if let Some(mem) = &state.pseudo {
        w.f64s(mem.centers().as_slice())?;
    }
    let states = [&opt.w_fc, &opt.b, &opt.w_att, &opt.bank, &opt.pseudo];
    let expected = [l * 2 * c, l, c, n * l, n_c * l];
    for (s, len) in states.iter().zip(expected) {
        if s.m.len() != len || s.v.len() != len {
            return Err(Error::domain("optimizer moments do not match their tensors"));
        }
        adam_moments(&mut w, s)?;
    }
    if let Some(mem) = &state.pseudo {
        if mem.assignment().len() != n {
            return Err(Error::domain("pseudo labels do not cover every sample"));
        }
        for &a in mem.assignment() {
            w.u32(a)?;
        }
    }
    for s in states {
        w.u64(s.t)?;
    }
    let cfg = opt.w_fc.cfg;
    w.f64s(&[cfg.lr, cfg.beta1, cfg.beta2, cfg.eps])?;
    w.u64(state.epoch)?;
    w.u64(state.seed)?;
    w.u8(u8::from(state.use_csa))?;
    if let Some(cb) = &state.codebooks {
        let s = opt
            .codebooks
            .as_ref()
            .ok_or_else(|| Error::domain("codebook model without codebook optimizer state"))?;
        w.f64s(cb.centroids.as_slice())?;
        adam_moments(&mut w, s)?;
        w.u64(s.t)?;
    }
    Ok(())
}

fn read_adam(r: &mut Reader<impl Read>, len: usize) -> Result<AdamState> {
    let m = r.f64s(len)?;
    let v = r.f64s(len)?;
    Ok(AdamState {
        cfg: AdamConfig::default(),
        t: 0,
        m,
        v,
    })
}

fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
    Matrix::from_vec(rows, cols, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_model(input: impl Read) -> Result<ModelState> {
    let mut r = Reader { inner: input };
    r.header(MODEL_MAGIC)?;
    let (l, c, n, n_c) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    if l == 0 || l > MAX_BITS || c == 0 {
        return Err(Error::Format(format!("invalid dimensions l={l}, C={c}")));
    }
    check_size(&[n.max(n_c).max(2 * c), l, 2])?;
    let tag = r.u8()?;
    if tag != TAG_SIGN && tag != TAG_CODEBOOK {
        return Err(Error::Format(format!("unknown variant tag {tag}")));
    }
    let w_fc = matrix(l, 2 * c, r.f64s(l * 2 * c)?)?;
    let b = r.f64s(l)?;
    let w_att = Prototype(r.f64s(c)?);
    let bank = matrix(n, l, r.f64s(n * l)?)?;
    let centers = matrix(n_c, l, r.f64s(n_c * l)?)?;
    let mut states = Vec::with_capacity(5);
    for len in [l * 2 * c, l, c, n * l, n_c * l] {
        states.push(read_adam(&mut r, len)?);
    }
    let pseudo = if n_c > 0 {
        let mut assignment = Vec::with_capacity(n);
        for _ in 0..n {
            assignment.push(r.u32()?);
        }
        Some(ClusterMemory::new(centers, assignment).map_err(|e| Error::Format(e.to_string()))?)
    } else {
        None
    };
    for s in states.iter_mut() {
        s.t = r.u64()?;
    }
    let hyper = r.f64s(4)?;
    let cfg = AdamConfig {
        lr: hyper[0],
        beta1: hyper[1],
        beta2: hyper[2],
        eps: hyper[3],
    };
    cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
    for s in states.iter_mut() {
        s.cfg = cfg;
    }
    let epoch = r.u64()?;
    let seed = r.u64()?;
    let use_csa = match r.u8()? {
        0 => false,
        1 => true,
        x => return Err(Error::Format(format!("invalid use_csa flag {x}"))),
    };
    let (codebooks, cb_state) = if tag == TAG_CODEBOOK {
        let cents = matrix(2 * l, 2 * c, r.f64s(2 * l * 2 * c)?)?;
        let mut s = read_adam(&mut r, 2 * l * 2 * c)?;
        s.t = r.u64()?;
        s.cfg = cfg;
        (Some(CodebookSet::new(cents).map_err(|e| Error::Format(e.to_string()))?), Some(s))
    } else {
        (None, None)
    };
    r.end()?;
    let mut it = states.into_iter();
    let mut next = || it.next().expect("five optimizer states");
    let optimizer = Optimizer {
        w_fc: next(),
        b: next(),
        w_att: next(),
        bank: next(),
        pseudo: next(),
        codebooks: cb_state,
    };
    let params = EncoderParams { w_fc, b, w_att };
    params.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(ModelState {
        params,
        bank: MemoryBank(bank),
        pseudo,
        codebooks,
        optimizer,
        use_csa,
        epoch,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamming::BitCode;
    use crate::synth::{generate, SynthSpec};
    use crate::train::{train, TrainConfig, Variant};

    #[test]
    fn codes_round_trip() {
        let codes = PackedCodeSet::from_codes(
            70,
            &[
                BitCode::from_bools(&[true; 70]).unwrap(),
                BitCode::from_bools(&(0..70).map(|i| i % 3 == 0).collect::<Vec<_>>()).unwrap(),
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_codes(&codes, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"CRHB");
        assert_eq!(buf.len(), 4 + 2 + 4 + 4 + 2 * 2 * 8);
        assert_eq!(read_codes(&buf[..]).unwrap(), codes);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let codes = PackedCodeSet::new(8).unwrap();
        let mut buf = Vec::new();
        write_codes(&codes, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_codes(&bad[..]), Err(Error::Format(_))));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_codes(&long[..]), Err(Error::Format(_))));
        assert!(matches!(read_codes(&buf[..5]), Err(Error::Format(_))));
        assert!(matches!(read_dataset(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_round_trips_at_f32_precision() {
        let spec = SynthSpec {
            samples_per_fine: 2,
            ..SynthSpec::standard()
        };
        let d = generate(&spec).unwrap();
        let mut buf = Vec::new();
        write_dataset(&d.samples, Some((&d.fine_labels, &d.coarse_labels)), &mut buf).unwrap();
        let back = read_dataset(&buf[..]).unwrap();
        assert_eq!(back.labels, Some((d.fine_labels.clone(), d.coarse_labels.clone())));
        for (a, b) in back.samples.iter().zip(&d.samples) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert_eq!(*x, f64::from(*y as f32));
            }
        }
        let mut again = Vec::new();
        write_dataset(&back.samples, None, &mut again).unwrap();
        assert_eq!(read_dataset(&again[..]).unwrap().labels, None);
    }

    #[test]
    fn trained_models_round_trip_exactly() {
        let spec = SynthSpec {
            samples_per_fine: 3,
            ..SynthSpec::standard()
        };
        let d = generate(&spec).unwrap();
        for variant in [Variant::Sign, Variant::Codebook] {
            let cfg = TrainConfig {
                epochs: 2,
                bits: 10,
                variant,
                ..TrainConfig::default()
            };
            let out = train(&d.samples, None, &cfg).unwrap();
            assert!(out.state.pseudo.is_some());
            let mut buf = Vec::new();
            write_model(&out.state, &mut buf).unwrap();
            let back = read_model(&buf[..]).unwrap();
            assert_eq!(back, out.state);
            let mut again = Vec::new();
            write_model(&back, &mut again).unwrap();
            assert_eq!(again, buf);
        }
    }
}
