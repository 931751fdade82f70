//! Model files.
//!
//! Little-endian throughout:
//!
//! ```text
//! "BBCU"  u16 version
//! u32 spec length, spec block
//! u32 record count, records: u8 tag, u32 payload length, payload
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! Records appear in forward order (head, body convs, closing body conv,
//! upsampling, tail). Binary records (tag 1) hold packed sign bits, scales,
//! thresholds, RPReLU and optional BatchNorm state; full-precision records
//! (tag 2) hold raw `f64` weights and optional RPReLU. Readers skip records
//! with unknown tags.

use std::path::Path;

use bbcu_core::bbcu::{BbcuBlock, Position, Variant};
use bbcu_core::binarize::{BinarizedWeights, ScaleScope};
use bbcu_core::net::{FpConv, Layer, NetworkSpec, Parts, RestorationNet, Task};
use bbcu_core::Tensor;

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"BBCU";
pub const VERSION: u16 = 1;
const TAG_BINARY: u8 = 1;
const TAG_FULL: u8 = 2;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
    fn block(&mut self, payload: Writer) {
        self.u32(payload.0.len());
        self.0.extend_from_slice(&payload.0);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Model(msg.into())
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> CliResult<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> CliResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> CliResult<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f64(&mut self) -> CliResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> CliResult<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn encode_spec(s: &NetworkSpec) -> Writer {
    let mut w = Writer::default();
    w.u8(match s.task {
        Task::SuperResolution => 0,
        Task::Denoise => 1,
        Task::Deblock => 2,
    });
    w.u8(s.scale as u8);
    w.u32(s.image_channels);
    w.u32(s.channels);
    w.u32(s.body_blocks);
    let p = s.binarize;
    w.u8(p.head as u8 | (p.body as u8) << 1 | (p.upsampling as u8) << 2 | (p.tail as u8) << 3);
    w.u8(variant_code(s.variant));
    w.f64(s.k);
    w.u32(s.convs_per_unit.unwrap_or(0));
    w.u8(s.image_residual as u8);
    w.u8(scope_code(s.scope));
    w.u32(s.breakpoints.len());
    for &b in &s.breakpoints {
        w.u32(b);
    }
    w
}

fn decode_spec(r: &mut Reader) -> CliResult<NetworkSpec> {
    let task = match r.u8()? {
        0 => Task::SuperResolution,
        1 => Task::Denoise,
        2 => Task::Deblock,
        t => return Err(bad(format!("unknown task code {t}"))),
    };
    let scale = r.u8()? as usize;
    let image_channels = r.u32()?;
    let channels = r.u32()?;
    let body_blocks = r.u32()?;
    let m = r.u8()?;
    let binarize = Parts {
        head: m & 1 != 0,
        body: m & 2 != 0,
        upsampling: m & 4 != 0,
        tail: m & 8 != 0,
    };
    let variant = variant_from(r.u8()?)?;
    let k = r.f64()?;
    let convs_per_unit = Some(r.u32()?).filter(|&u| u != 0);
    let image_residual = r.u8()? != 0;
    let scope = scope_from(r.u8()?)?;
    let n = r.u32()?;
    let breakpoints = (0..n).map(|_| r.u32()).collect::<CliResult<_>>()?;
    Ok(NetworkSpec {
        task,
        scale,
        image_channels,
        channels,
        body_blocks,
        binarize,
        variant,
        k,
        convs_per_unit,
        breakpoints,
        image_residual,
        scope,
    })
}

fn variant_code(v: Variant) -> u8 {
    match v {
        Variant::V1 => 1,
        Variant::V2 => 2,
        Variant::V3 => 3,
        Variant::V4 => 4,
    }
}

fn variant_from(c: u8) -> CliResult<Variant> {
    Variant::ALL
        .into_iter()
        .find(|&v| variant_code(v) == c)
        .ok_or_else(|| bad(format!("unknown variant code {c}")))
}

fn scope_code(s: ScaleScope) -> u8 {
    match s {
        ScaleScope::Layer => 0,
        ScaleScope::Filter => 1,
    }
}

fn scope_from(c: u8) -> CliResult<ScaleScope> {
    match c {
        0 => Ok(ScaleScope::Layer),
        1 => Ok(ScaleScope::Filter),
        _ => Err(bad(format!("unknown scale scope code {c}"))),
    }
}

fn position_code(p: Position) -> u8 {
    match p {
        Position::Head => 0,
        Position::Body => 1,
        Position::Upsampling => 2,
        Position::Tail => 3,
    }
}

/// Sign bits, most significant first within each byte; a set bit is `+1`.
pub fn pack_signs(signs: &Tensor) -> Vec<u8> {
    let mut out = vec![0u8; signs.len().div_ceil(8)];
    for (i, &s) in signs.data().iter().enumerate() {
        if s > 0.0 {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

pub fn unpack_signs(bytes: &[u8], shape: [usize; 4]) -> Tensor {
    let mut i = 0;
    Tensor::from_fn(shape, |_| {
        let v = if bytes[i / 8] & (0x80 >> (i % 8)) != 0 { 1.0 } else { -1.0 };
        i += 1;
        v
    })
}

fn encode_binary(b: &BbcuBlock) -> Writer {
    let mut w = Writer::default();
    let bw = b.binarized();
    w.u8(position_code(b.position));
    w.u32(b.spec.in_channels);
    w.u32(b.spec.out_channels);
    w.u32(b.spec.kernel_h);
    w.u8(scope_code(bw.scope));
    w.u8(b.scale_path as u8);
    w.u32(bw.scales.len());
    w.f64s(&bw.scales);
    let bits = pack_signs(&bw.signs);
    w.u32(bits.len());
    w.0.extend_from_slice(&bits);
    w.f64s(b.alpha.value.data());
    for p in b.act.params() {
        w.f64s(p.value.data());
    }
    match &b.bn {
        Some(bn) => {
            w.u8(1);
            w.f64s(bn.kappa.value.data());
            w.f64s(bn.tau.value.data());
            w.f64s(&bn.running_mean);
            w.f64s(&bn.running_var);
            w.f64(bn.momentum);
            w.f64(bn.epsilon);
        }
        None => w.u8(0),
    }
    w
}

fn decode_binary(r: &mut Reader, b: &mut BbcuBlock) -> CliResult<()> {
    let pos = r.u8()?;
    let (cin, cout, k) = (r.u32()?, r.u32()?, r.u32()?);
    if pos != position_code(b.position) || (cin, cout, k) != (b.spec.in_channels, b.spec.out_channels, b.spec.kernel_h)
    {
        return Err(bad("binary layer does not match the network spec"));
    }
    let scope = scope_from(r.u8()?)?;
    b.scale_path = r.u8()? != 0;
    let n = r.u32()?;
    let scales = r.f64s(n)?;
    let expected_scales = match scope {
        ScaleScope::Layer => 1,
        ScaleScope::Filter => cout,
    };
    if n != expected_scales {
        return Err(bad("scale count does not match scope"));
    }
    let shape = b.spec.weight_shape();
    let nbytes = r.u32()?;
    if nbytes != b.spec.weight_count().div_ceil(8) {
        return Err(bad("sign payload has the wrong length"));
    }
    let signs = unpack_signs(r.take(nbytes)?, shape);
    b.alpha.value = Tensor::from_vec(b.alpha.value.shape(), r.f64s(cin)?)?;
    for p in b.act.params_mut() {
        p.value = Tensor::from_vec(p.value.shape(), r.f64s(cout)?)?;
    }
    let has_bn = r.u8()? != 0;
    match (&mut b.bn, has_bn) {
        (Some(bn), true) => {
            bn.kappa.value = Tensor::from_vec(bn.kappa.value.shape(), r.f64s(cout)?)?;
            bn.tau.value = Tensor::from_vec(bn.tau.value.shape(), r.f64s(cout)?)?;
            bn.running_mean = r.f64s(cout)?;
            bn.running_var = r.f64s(cout)?;
            bn.momentum = r.f64()?;
            bn.epsilon = r.f64()?;
        }
        (None, false) => {}
        _ => return Err(bad("BatchNorm presence does not match the variant")),
    }
    b.set_binarized(BinarizedWeights { signs, scales, scope });
    Ok(())
}

fn encode_full(f: &FpConv) -> Writer {
    let mut w = Writer::default();
    w.u32(f.spec.in_channels);
    w.u32(f.spec.out_channels);
    w.u32(f.spec.kernel_h);
    w.f64s(f.weight.value.data());
    match &f.act {
        Some(a) => {
            w.u8(1);
            for p in a.params() {
                w.f64s(p.value.data());
            }
        }
        None => w.u8(0),
    }
    w
}

fn decode_full(r: &mut Reader, f: &mut FpConv) -> CliResult<()> {
    let (cin, cout, k) = (r.u32()?, r.u32()?, r.u32()?);
    if (cin, cout, k) != (f.spec.in_channels, f.spec.out_channels, f.spec.kernel_h) {
        return Err(bad("full-precision layer does not match the network spec"));
    }
    f.weight.value = Tensor::from_vec(f.spec.weight_shape(), r.f64s(f.spec.weight_count())?)?;
    let has_act = r.u8()? != 0;
    match (&mut f.act, has_act) {
        (Some(a), true) => {
            for p in a.params_mut() {
                p.value = Tensor::from_vec(p.value.shape(), r.f64s(cout)?)?;
            }
        }
        (None, false) => {}
        _ => return Err(bad("activation presence does not match the network spec")),
    }
    Ok(())
}

enum Slot<'a> {
    Binary(&'a mut BbcuBlock),
    Full(&'a mut FpConv),
}

fn slots(net: &mut RestorationNet) -> Vec<Slot<'_>> {
    fn slot(l: &mut Layer) -> Slot<'_> {
        match l {
            Layer::Binary(b) => Slot::Binary(b),
            Layer::Full(f) => Slot::Full(f),
        }
    }
    let mut v = vec![slot(&mut net.head)];
    for unit in &mut net.body {
        v.extend(unit.layers.iter_mut().map(slot));
    }
    v.push(Slot::Full(&mut net.body_out));
    v.extend(net.upsampling.iter_mut().map(slot));
    v.push(slot(&mut net.tail));
    v
}

pub fn encode(net: &RestorationNet) -> Vec<u8> {
    let mut net = net.clone();
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION);
    w.block(encode_spec(&net.spec));
    let records = slots(&mut net);
    w.u32(records.len());
    for s in &records {
        let (tag, payload) = match s {
            Slot::Binary(b) => (TAG_BINARY, encode_binary(b)),
            Slot::Full(f) => (TAG_FULL, encode_full(f)),
        };
        w.u8(tag);
        w.block(payload);
    }
    let crc = crc32fast::hash(&w.0);
    w.0.extend_from_slice(&crc.to_le_bytes());
    w.0
}

pub fn decode(bytes: &[u8]) -> CliResult<RestorationNet> {
    if bytes.len() < 10 {
        return Err(bad("truncated"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(bad("checksum mismatch"));
    }
    let mut r = Reader::new(body);
    if r.take(4)? != MAGIC {
        return Err(bad("missing BBCU magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let spec_len = r.u32()?;
    let spec = decode_spec(&mut Reader::new(r.take(spec_len)?))?;
    let mut net = RestorationNet::build(&spec, 0)?;
    let count = r.u32()?;
    let mut layers = slots(&mut net).into_iter();
    for _ in 0..count {
        let tag = r.u8()?;
        let len = r.u32()?;
        let mut p = Reader::new(r.take(len)?);
        if tag != TAG_BINARY && tag != TAG_FULL {
            continue;
        }
        match (layers.next(), tag) {
            (Some(Slot::Binary(b)), TAG_BINARY) => decode_binary(&mut p, b)?,
            (Some(Slot::Full(f)), TAG_FULL) => decode_full(&mut p, f)?,
            (None, _) => return Err(bad("more layer records than the spec allows")),
            _ => return Err(bad("layer kind does not match the network spec")),
        }
        if !p.done() {
            return Err(bad("trailing bytes in layer record"));
        }
    }
    if layers.next().is_some() {
        return Err(bad("missing layer records"));
    }
    if !r.done() {
        return Err(bad("trailing bytes before checksum"));
    }
    Ok(net)
}

pub fn save(path: &Path, net: &RestorationNet) -> CliResult<Vec<u8>> {
    let bytes = encode(net);
    std::fs::write(path, &bytes).map_err(|e| CliError::io(path, e))?;
    Ok(bytes)
}

pub fn load(path: &Path) -> CliResult<RestorationNet> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes)
}

/// Body conv weight storage: packed signs plus scales, against 32-bit floats.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BodyPayload {
    pub packed_bytes: usize,
    pub full_precision_bytes: usize,
}

impl BodyPayload {
    /// `packed / (full / 32)`; at most 1.05 meets the storage target.
    pub fn ratio_to_ideal(&self) -> f64 {
        self.packed_bytes as f64 / (self.full_precision_bytes as f64 / 32.0)
    }
}

pub fn body_payload(net: &RestorationNet) -> BodyPayload {
    let mut p = BodyPayload {
        packed_bytes: 0,
        full_precision_bytes: 0,
    };
    for l in net.body.iter().flat_map(|u| u.layers.iter()) {
        let spec = l.conv_spec();
        p.full_precision_bytes += 4 * spec.weight_count();
        p.packed_bytes += match l {
            Layer::Binary(b) => spec.weight_count().div_ceil(8) + 8 * b.binarized().scales.len(),
            Layer::Full(_) => 4 * spec.weight_count(),
        };
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use bbcu_core::bbcu::Pass;
    use rand::{Rng, SeedableRng};

    fn input() -> Tensor {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        Tensor::from_fn([1, 3, 12, 12], |_| r.random_range(0.0..1.0))
    }

    #[test]
    fn sign_packing_round_trips() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let s = Tensor::from_fn([3, 2, 3, 3], |_| if r.random_bool(0.5) { 1.0 } else { -1.0 });
        assert_eq!(unpack_signs(&pack_signs(&s), s.shape()), s);
    }

    #[test]
    fn round_trip_is_bit_exact_for_every_variant() {
        for variant in Variant::ALL {
            for parts in [Parts::NONE, Parts::BODY, Parts::ALL] {
                let mut spec = NetworkSpec::toy_denoiser();
                spec.task = Task::SuperResolution;
                spec.scale = 2;
                spec.variant = variant;
                spec.binarize = parts;
                spec.scope = ScaleScope::Filter;
                if !variant.uses_amplification() {
                    spec.k = 1.0;
                }
                let mut net = RestorationNet::build(&spec, 2).unwrap();
                let bytes = encode(&net);
                let mut loaded = decode(&bytes).unwrap();
                let x = input();
                let a = net.forward(&x, Pass::INFER).unwrap();
                let b = loaded.forward(&x, Pass::INFER).unwrap();
                assert_eq!(a.data(), b.data(), "{variant:?} {parts:?}");
                assert_eq!(encode(&loaded), bytes);
            }
        }
    }

    #[test]
    fn corruption_is_detected() {
        let net = RestorationNet::build(&NetworkSpec::toy_denoiser(), 0).unwrap();
        let mut bytes = encode(&net);
        bytes[20] ^= 1;
        assert!(matches!(decode(&bytes), Err(CliError::Model(_))));
        assert!(decode(b"BBCU").is_err());
    }

    #[test]
    fn unknown_records_are_skipped() {
        let net = RestorationNet::build(&NetworkSpec::toy_denoiser(), 0).unwrap();
        let bytes = encode(&net);
        let body = &bytes[..bytes.len() - 4];
        let spec_len = u32::from_le_bytes(body[6..10].try_into().unwrap()) as usize;
        let count_at = 10 + spec_len;
        let count = u32::from_le_bytes(body[count_at..count_at + 4].try_into().unwrap());
        let mut patched = body[..count_at].to_vec();
        patched.extend_from_slice(&(count + 1).to_le_bytes());
        patched.extend_from_slice(&[9, 3, 0, 0, 0, 1, 2, 3]);
        patched.extend_from_slice(&body[count_at + 4..]);
        let crc = crc32fast::hash(&patched);
        patched.extend_from_slice(&crc.to_le_bytes());
        assert!(decode(&patched).is_ok());
    }

    #[test]
    fn packed_body_is_near_one_thirty_second() {
        let net = RestorationNet::build(&NetworkSpec::toy_denoiser(), 0).unwrap();
        let p = body_payload(&net);
        assert!(p.ratio_to_ideal() <= 1.05, "{p:?}");
    }
}
